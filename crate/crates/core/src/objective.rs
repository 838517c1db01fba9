//! The embedding objective
//! `J[φ] = E_q[½ log det(JᵀJ) + log p_data(φ(z)) − log q(z)]`
//! and its exact parameter gradient under a fixed integration rule.
//!
//! Each node is differentiated on its own tape; nodes run in parallel and
//! are combined with a fixed pairwise reduction, so results do not depend
//! on thread scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingModel;
use crate::models::{DensityModel, ModelError, PriorModel, LOG_UNDERFLOW};
use crate::numerics::{
    half_logdet_gram, half_logdet_gram_of, pairwise_sum, pairwise_sum_vectors, AffineMap, NumericsError,
    QuadratureRule, Real, Tape,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ObjectiveError {
    /// The iterate cannot be evaluated (degenerate Jacobian or density
    /// underflow at a node). Optimizers should shrink the step.
    #[error("invalid iterate at latent node {z:?}: {reason}")]
    IterateInvalid { z: Vec<f64>, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
}

/// How expectations over the prior are approximated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IntegrationScheme {
    /// Tensor-product Gauss rule with `order` nodes per latent axis.
    Quadrature { order: usize },
    /// Equal-weight average over `samples` seeded prior draws.
    MonteCarlo { samples: usize, seed: u64 },
}

impl IntegrationScheme {
    pub fn rule(&self, prior: &PriorModel) -> Result<QuadratureRule, ObjectiveError> {
        match self {
            IntegrationScheme::Quadrature { order } => Ok(prior.quadrature(*order)?),
            IntegrationScheme::MonteCarlo { samples, seed } => {
                if *samples == 0 {
                    return Err(ObjectiveError::Dimension(
                        "Monte Carlo needs at least one sample".into(),
                    ));
                }
                Ok(QuadratureRule::equal_weights(prior.sample(*samples, *seed))?)
            }
        }
    }

    pub fn is_monte_carlo(&self) -> bool {
        matches!(self, IntegrationScheme::MonteCarlo { .. })
    }
}

/// Discrete versions of the two finiteness expectations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finiteness {
    /// `E[√det(JᵀJ)]`.
    pub mean_volume_element: f64,
    /// `E[‖φ‖²]`.
    pub mean_squared_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveEstimate {
    /// Objective value in nats.
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    pub node_count: usize,
    pub scheme: IntegrationScheme,
    /// Standard error of the Monte Carlo mean.
    pub stderr: Option<f64>,
    pub finiteness: Finiteness,
}

/// Per-node terms of the integrand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegrandTerms {
    pub half_logdet: f64,
    pub log_density: f64,
    pub log_prior: f64,
}

impl IntegrandTerms {
    pub fn value(&self) -> f64 {
        self.half_logdet + self.log_density - self.log_prior
    }
}

fn check_dims(embedding: &EmbeddingModel, prior: &PriorModel, density: &DensityModel) -> Result<(), ObjectiveError> {
    if embedding.latent_dim() != prior.dim() {
        return Err(ObjectiveError::Dimension(format!(
            "embedding latent dimension {} but prior dimension {}",
            embedding.latent_dim(),
            prior.dim()
        )));
    }
    if embedding.ambient_dim() != density.dim() {
        return Err(ObjectiveError::Dimension(format!(
            "embedding ambient dimension {} but density dimension {}",
            embedding.ambient_dim(),
            density.dim()
        )));
    }
    Ok(())
}

fn node_value<T: Real>(
    embedding: &EmbeddingModel,
    density: &DensityModel,
    theta: &[T],
    z: &[f64],
    log_prior: f64,
) -> Result<(T, Vec<T>, f64), ObjectiveError> {
    let (phi, jac) = embedding.forward(theta, z);
    let hld = half_logdet_gram_of(&jac, embedding.ambient_dim(), embedding.latent_dim()).map_err(|e| {
        ObjectiveError::IterateInvalid {
            z: z.to_vec(),
            reason: e.to_string(),
        }
    })?;
    let lp = density.log_density_of(&phi);
    if !(lp.value() >= LOG_UNDERFLOW) {
        return Err(ObjectiveError::IterateInvalid {
            z: z.to_vec(),
            reason: format!("data log-density {:e} underflows", lp.value()),
        });
    }
    Ok((hld + lp - log_prior, phi, hld.value()))
}

/// Integrand terms at one latent point.
pub fn integrand_terms(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    z: &[f64],
) -> Result<IntegrandTerms, ObjectiveError> {
    check_dims(embedding, prior, density)?;
    let (phi, jac) = embedding.forward(embedding.theta(), z);
    let half_logdet = half_logdet_gram_of(&jac, embedding.ambient_dim(), embedding.latent_dim()).map_err(|e| {
        ObjectiveError::IterateInvalid {
            z: z.to_vec(),
            reason: e.to_string(),
        }
    })?;
    Ok(IntegrandTerms {
        half_logdet,
        log_density: density.log_density(&phi)?,
        log_prior: prior.log_density(z)?,
    })
}

struct NodeResult {
    value: f64,
    gradient: Option<Vec<f64>>,
    volume: f64,
    sq_norm: f64,
}

/// Estimates the objective with the nodes of `rule`.
pub fn estimate_with_rule(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    rule: &QuadratureRule,
    scheme: &IntegrationScheme,
    want_gradient: bool,
) -> Result<ObjectiveEstimate, ObjectiveError> {
    check_dims(embedding, prior, density)?;
    let theta = embedding.theta();
    let results: Vec<Result<NodeResult, ObjectiveError>> = rule
        .nodes()
        .par_iter()
        .map(|z| {
            let log_prior = prior.log_density(z)?;
            if !log_prior.is_finite() {
                return Err(ObjectiveError::IterateInvalid {
                    z: z.clone(),
                    reason: "node outside the prior support".into(),
                });
            }
            if want_gradient {
                let tape = Tape::new();
                let params = tape.vars(theta);
                let (out, phi, hld) = node_value(embedding, density, &params, z, log_prior)?;
                let gradient = tape.gradient(out, &params)?;
                Ok(NodeResult {
                    value: out.value(),
                    gradient: Some(gradient),
                    volume: hld.exp(),
                    sq_norm: phi.iter().map(|v| v.value() * v.value()).sum(),
                })
            } else {
                let (out, phi, hld) = node_value(embedding, density, theta, z, log_prior)?;
                Ok(NodeResult {
                    value: out,
                    gradient: None,
                    volume: hld.exp(),
                    sq_norm: phi.iter().map(|v| v * v).sum(),
                })
            }
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let w = rule.weights();
    let weighted = |f: &dyn Fn(&NodeResult) -> f64| -> f64 {
        let terms: Vec<f64> = results.iter().zip(w).map(|(r, wk)| wk * f(r)).collect();
        pairwise_sum(&terms)
    };
    let value = weighted(&|r| r.value);
    let finiteness = Finiteness {
        mean_volume_element: weighted(&|r| r.volume),
        mean_squared_norm: weighted(&|r| r.sq_norm),
    };
    let gradient = want_gradient.then(|| {
        let rows: Vec<Vec<f64>> = results
            .iter()
            .zip(w)
            .map(|(r, wk)| r.gradient.as_ref().expect("requested").iter().map(|g| wk * g).collect())
            .collect();
        pairwise_sum_vectors(&rows)
    });
    let stderr = scheme.is_monte_carlo().then(|| {
        let n = results.len() as f64;
        if results.len() < 2 {
            return f64::NAN;
        }
        let dev: Vec<f64> = results.iter().map(|r| (r.value - value).powi(2)).collect();
        (pairwise_sum(&dev) / (n - 1.0) / n).sqrt()
    });
    Ok(ObjectiveEstimate {
        value,
        gradient,
        node_count: results.len(),
        scheme: scheme.clone(),
        stderr,
        finiteness,
    })
}

/// Estimates `J[φ]` (and optionally `∂J/∂θ`) under `scheme`.
pub fn estimate_objective(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    scheme: &IntegrationScheme,
    want_gradient: bool,
) -> Result<ObjectiveEstimate, ObjectiveError> {
    let rule = scheme.rule(prior)?;
    estimate_with_rule(embedding, prior, density, &rule, scheme, want_gradient)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvarianceCheck {
    pub original: f64,
    pub transformed: f64,
    pub difference: f64,
}

/// Compares `J` for `(φ, q)` against `(φ∘g, q̃)` with `q̃(z') = q(g(z'))|det g|`.
/// The transformed side integrates with a rule adapted to `q̃`.
pub fn check_reparameterization_invariance(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    g: &AffineMap,
    scheme: &IntegrationScheme,
) -> Result<InvarianceCheck, ObjectiveError> {
    let original = estimate_objective(embedding, prior, density, scheme, false)?.value;
    let moved = embedding.precomposed(g)?;
    let pulled = prior.pushforward(g)?;
    let transformed = estimate_objective(&moved, &pulled, density, scheme, false)?.value;
    Ok(InvarianceCheck {
        original,
        transformed,
        difference: (original - transformed).abs(),
    })
}

pub const DEFAULT_FINITENESS_CEILING: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinitenessReport {
    pub mean_volume_element: f64,
    pub mean_squared_norm: f64,
    pub ceiling: f64,
    pub volume_exceeds_ceiling: bool,
    pub norm_exceeds_ceiling: bool,
}

/// Discrete `E[√det(JᵀJ)]` and `E[‖φ‖²]`; never fails on large values,
/// only flags them.
pub fn finiteness_report(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    scheme: &IntegrationScheme,
    ceiling: f64,
) -> Result<FinitenessReport, ObjectiveError> {
    if embedding.latent_dim() != prior.dim() {
        return Err(ObjectiveError::Dimension("embedding and prior disagree on d".into()));
    }
    let rule = scheme.rule(prior)?;
    // a degenerate node contributes zero volume
    let vol = rule.integrate(|z| half_logdet_gram(&embedding.jacobian(z)).map_or(0.0, f64::exp));
    let norm = rule.integrate(|z| embedding.eval(z).iter().map(|v| v * v).sum());
    let flag = |v: f64| !(v <= ceiling);
    Ok(FinitenessReport {
        mean_volume_element: vol,
        mean_squared_norm: norm,
        ceiling,
        volume_exceeds_ceiling: flag(vol),
        norm_exceeds_ceiling: flag(norm),
    })
}

/// Soft penalty discouraging distant latent nodes from landing close
/// together in ambient space:
/// `weight · mean_{pairs} exp(−‖φ_k − φ_l‖² / (2 length²))` over node pairs
/// whose latent distance exceeds `latent_gap`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Repulsion {
    pub weight: f64,
    pub length: f64,
    pub latent_gap: f64,
}

impl Repulsion {
    fn pairs(&self, nodes: &[Vec<f64>]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..nodes.len() {
            for b in a + 1..nodes.len() {
                let gap: f64 = nodes[a]
                    .iter()
                    .zip(&nodes[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                if gap > self.latent_gap {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Penalty value and, if requested, its gradient in θ.
    pub fn evaluate(
        &self,
        embedding: &EmbeddingModel,
        nodes: &[Vec<f64>],
        want_gradient: bool,
    ) -> Result<(f64, Option<Vec<f64>>), ObjectiveError> {
        if self.weight == 0.0 {
            return Ok((0.0, want_gradient.then(|| vec![0.0; embedding.param_count()])));
        }
        let pairs = self.pairs(nodes);
        if pairs.is_empty() {
            return Ok((0.0, want_gradient.then(|| vec![0.0; embedding.param_count()])));
        }
        let phis: Vec<Vec<f64>> = nodes.par_iter().map(|z| embedding.eval(z)).collect();
        let scale = self.weight / pairs.len() as f64;
        let inv = 1.0 / (2.0 * self.length * self.length);
        let big_d = embedding.ambient_dim();
        let mut terms = Vec::with_capacity(pairs.len());
        // ∂P/∂φ_k accumulated per node
        let mut node_grad = vec![vec![0.0; big_d]; nodes.len()];
        for &(a, b) in &pairs {
            let diff: Vec<f64> = phis[a].iter().zip(&phis[b]).map(|(x, y)| x - y).collect();
            let k = (-inv * diff.iter().map(|v| v * v).sum::<f64>()).exp();
            terms.push(scale * k);
            for i in 0..big_d {
                let g = -2.0 * inv * scale * k * diff[i];
                node_grad[a][i] += g;
                node_grad[b][i] -= g;
            }
        }
        let value = pairwise_sum(&terms);
        if !want_gradient {
            return Ok((value, None));
        }
        let theta = embedding.theta();
        let rows: Vec<Vec<f64>> = nodes
            .par_iter()
            .zip(&node_grad)
            .map(|(z, g)| {
                if g.iter().all(|v| *v == 0.0) {
                    return Ok(vec![0.0; theta.len()]);
                }
                let tape = Tape::new();
                let params = tape.vars(theta);
                let (phi, _) = embedding.forward(&params, z);
                let out = Real::dot_const(g, &phi);
                Ok(tape.gradient(out, &params)?)
            })
            .collect::<Result<Vec<_>, ObjectiveError>>()?;
        Ok((value, Some(pairwise_sum_vectors(&rows))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{Basis, Family};
    use crate::numerics::{central_gradient, Matrix};
    use std::f64::consts::PI;

    fn gauss(cov: &[f64]) -> DensityModel {
        DensityModel::gaussian(vec![0.0; cov.len()], &Matrix::diag(cov)).unwrap()
    }

    #[test]
    fn identity_map_scores_zero() {
        let emb = EmbeddingModel::linear(&Matrix::identity(1), &[0.0]).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let est = estimate_objective(
            &emb,
            &q,
            &gauss(&[1.0]),
            &IntegrationScheme::Quadrature { order: 16 },
            false,
        )
        .unwrap();
        assert!(est.value.abs() < 1e-10);
    }

    #[test]
    fn gaussian_pullback_value() {
        let emb = EmbeddingModel::linear(&Matrix::column(&[2.0, 0.0]), &[0.0, 0.0]).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let p = gauss(&[4.0, 1.0]);
        let est = estimate_objective(&emb, &q, &p, &IntegrationScheme::Quadrature { order: 64 }, true).unwrap();
        assert!((est.value + 0.5 * (2.0 * PI).ln()).abs() < 1e-6, "{}", est.value);
        assert_eq!(est.node_count, 64);
        // at the optimum the gradient vanishes
        assert!(est.gradient.unwrap().iter().all(|g| g.abs() < 1e-10));
        assert!((est.finiteness.mean_volume_element - 2.0).abs() < 1e-12);
        assert!((est.finiteness.mean_squared_norm - 4.0).abs() < 1e-12);
    }

    #[test]
    fn phi_dependent_part() {
        // ½ log det(JᵀJ) + E[−½ φᵀΣ⁻¹φ]: drop every normalizer
        let rule = PriorModel::gaussian(1, 1.0).unwrap().quadrature(32).unwrap();
        let part = rule.integrate(|z| 2f64.ln() - 0.5 * (2.0 * z[0]).powi(2) / 4.0);
        assert!((part - (-0.5 + 0.5 * 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = DensityModel::mixture(vec![vec![1.0, 0.0], vec![-1.0, 0.5]], 0.5).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let scheme = IntegrationScheme::Quadrature { order: 12 };
        for family in [
            Family::Linear,
            Family::Perceptron { hidden: vec![5, 4] },
            Family::Basis1d {
                basis: Basis::Hermite { scale: 1.0 },
                degree: 3,
            },
        ] {
            let emb = EmbeddingModel::random(family, 1, 2, &[0.1, -0.2], 4).unwrap();
            let est = estimate_objective(&emb, &q, &p, &scheme, true).unwrap();
            let fd = central_gradient(
                |t| {
                    estimate_objective(&emb.with_theta(t.to_vec()).unwrap(), &q, &p, &scheme, false)
                        .unwrap()
                        .value
                },
                emb.theta(),
                1e-6,
            );
            for (a, b) in est.gradient.unwrap().iter().zip(&fd) {
                assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn degenerate_jacobian_is_invalid() {
        let emb = EmbeddingModel::linear(&Matrix::column(&[0.0, 0.0]), &[0.0, 0.0]).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let err = estimate_objective(
            &emb,
            &q,
            &gauss(&[1.0, 1.0]),
            &IntegrationScheme::Quadrature { order: 4 },
            false,
        );
        assert!(matches!(err, Err(ObjectiveError::IterateInvalid { .. })));

        let far = EmbeddingModel::linear(&Matrix::column(&[1.0, 0.0]), &[100.0, 0.0]).unwrap();
        let err = estimate_objective(
            &far,
            &q,
            &gauss(&[1.0, 1.0]),
            &IntegrationScheme::Quadrature { order: 4 },
            false,
        );
        assert!(matches!(err, Err(ObjectiveError::IterateInvalid { .. })));
    }

    #[test]
    fn reparameterization_examples() {
        let emb = EmbeddingModel::linear(&Matrix::column(&[1.5, 0.4]), &[0.2, 0.0]).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let p = gauss(&[4.0, 1.0]);
        let scheme = IntegrationScheme::Quadrature { order: 32 };
        let same = check_reparameterization_invariance(&emb, &q, &p, &AffineMap::identity(1), &scheme).unwrap();
        assert_eq!(same.difference, 0.0);
        let g = AffineMap::new(Matrix::identity(1).scale(2.0), vec![1.0]).unwrap();
        assert!(
            check_reparameterization_invariance(&emb, &q, &p, &g, &scheme)
                .unwrap()
                .difference
                < 1e-8
        );
        let flip = AffineMap::new(Matrix::identity(1).scale(-1.0), vec![0.0]).unwrap();
        assert!(
            check_reparameterization_invariance(&emb, &q, &p, &flip, &scheme)
                .unwrap()
                .difference
                < 1e-12
        );
    }

    #[test]
    fn finiteness_examples() {
        let emb = EmbeddingModel::linear(&Matrix::column(&[0.0, 2.0]), &[0.0, 0.0]).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let r = finiteness_report(
            &emb,
            &q,
            &IntegrationScheme::Quadrature { order: 8 },
            DEFAULT_FINITENESS_CEILING,
        )
        .unwrap();
        assert!((r.mean_volume_element - 2.0).abs() < 1e-12 && (r.mean_squared_norm - 4.0).abs() < 1e-12);
        assert!(!r.volume_exceeds_ceiling && !r.norm_exceeds_ceiling);

        let id = EmbeddingModel::linear(&Matrix::identity(3), &[0.0; 3]).unwrap();
        let q3 = PriorModel::gaussian(3, 1.0).unwrap();
        let r = finiteness_report(
            &id,
            &q3,
            &IntegrationScheme::Quadrature { order: 4 },
            DEFAULT_FINITENESS_CEILING,
        )
        .unwrap();
        assert!((r.mean_volume_element - 1.0).abs() < 1e-12 && (r.mean_squared_norm - 3.0).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_reports_stderr() {
        let emb = EmbeddingModel::linear(&Matrix::column(&[1.0, 0.0]), &[0.0, 0.0]).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let est = estimate_objective(
            &emb,
            &q,
            &gauss(&[4.0, 1.0]),
            &IntegrationScheme::MonteCarlo { samples: 400, seed: 1 },
            false,
        )
        .unwrap();
        assert!(est.stderr.unwrap() > 0.0);
    }

    #[test]
    fn repulsion_gradient_matches_finite_differences() {
        let emb = EmbeddingModel::random(Family::Perceptron { hidden: vec![4] }, 1, 2, &[0.0, 0.0], 2).unwrap();
        let nodes = PriorModel::gaussian(1, 1.0)
            .unwrap()
            .quadrature(10)
            .unwrap()
            .nodes()
            .to_vec();
        let rep = Repulsion {
            weight: 0.7,
            length: 0.5,
            latent_gap: 1.0,
        };
        let (_, g) = rep.evaluate(&emb, &nodes, true).unwrap();
        let fd = central_gradient(
            |t| {
                rep.evaluate(&emb.with_theta(t.to_vec()).unwrap(), &nodes, false)
                    .unwrap()
                    .0
            },
            emb.theta(),
            1e-6,
        );
        for (a, b) in g.unwrap().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }
}
