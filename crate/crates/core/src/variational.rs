//! Stationarity residuals and conserved quantities of the objective.
//!
//! Latent derivatives use central differences with step
//! `h = 1e-4·(1 + ‖z‖)` unless a step is given.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::EmbeddingModel;
use crate::models::{DensityModel, ModelError, PriorModel};
use crate::numerics::{norm2, pseudoinverse, Matrix, NumericsError};
use crate::objective::{integrand_terms, ObjectiveError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VariationalError {
    #[error("Jacobian is rank deficient at stencil point {z:?}: {source}")]
    Stencil { z: Vec<f64>, source: NumericsError },
    #[error("pseudoinverse contraction deviates from the identity by {deviation:e}")]
    Contraction { deviation: f64 },
    #[error("zero velocity at z = {z}")]
    ZeroVelocity { z: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Default latent stencil step at `z`.
pub fn default_step(z: &[f64]) -> f64 {
    1e-4 * (1.0 + norm2(z))
}

fn pinv_at(embedding: &EmbeddingModel, z: &[f64]) -> Result<Matrix, VariationalError> {
    pseudoinverse(&embedding.jacobian(z)).map_err(|source| VariationalError::Stencil { z: z.to_vec(), source })
}

fn shifted(z: &[f64], j: usize, by: f64) -> Vec<f64> {
    let mut out = z.to_vec();
    out[j] += by;
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElResidual {
    pub z: Vec<f64>,
    pub residual: Vec<f64>,
    pub absolute: f64,
    /// `‖residual‖ / ‖s(φ(z))‖`.
    pub relative: f64,
}

/// `r_i = Σ_j [∂_j J⁺_{ji} + J⁺_{ji} ∂_j log q] − s_i(φ(z))`.
pub fn el_residual(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    z: &[f64],
    h: Option<f64>,
) -> Result<ElResidual, VariationalError> {
    let (d, big_d) = (embedding.latent_dim(), embedding.ambient_dim());
    if z.len() != d || prior.dim() != d || density.dim() != big_d {
        return Err(VariationalError::Dimension(
            "embedding, prior and density disagree".into(),
        ));
    }
    let h = h.unwrap_or_else(|| default_step(z));
    let pinv = pinv_at(embedding, z)?;
    let prior_score = prior.score(z)?;
    let score = density.score(&embedding.eval(z))?;
    let mut lhs = vec![0.0; big_d];
    for j in 0..d {
        let plus = pinv_at(embedding, &shifted(z, j, h))?;
        let minus = pinv_at(embedding, &shifted(z, j, -h))?;
        for (i, l) in lhs.iter_mut().enumerate() {
            *l += (plus[(j, i)] - minus[(j, i)]) / (2.0 * h) + pinv[(j, i)] * prior_score[j];
        }
    }
    let residual: Vec<f64> = lhs.iter().zip(&score).map(|(a, b)| a - b).collect();
    let absolute = norm2(&residual);
    let scale = norm2(&score);
    Ok(ElResidual {
        z: z.to_vec(),
        residual,
        absolute,
        relative: if scale > 0.0 {
            absolute / scale
        } else if absolute == 0.0 {
            0.0
        } else {
            f64::INFINITY
        },
    })
}

/// `E = −½ log det(JᵀJ) − log p_data(φ) + log q`.
pub fn embedding_energy(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    z: &[f64],
) -> Result<f64, VariationalError> {
    Ok(-integrand_terms(embedding, prior, density, z)?.value())
}

/// `Σ_j ∂_j [J⁺_{ji} q(z)]` for ambient direction `i`.
pub fn canonical_momentum_divergence(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    direction: usize,
    z: &[f64],
    h: Option<f64>,
) -> Result<f64, VariationalError> {
    if direction >= embedding.ambient_dim() {
        return Err(VariationalError::Dimension(format!(
            "direction {direction} out of range"
        )));
    }
    let h = h.unwrap_or_else(|| default_step(z));
    let density_at = |x: &[f64]| -> Result<f64, VariationalError> { Ok(prior.log_density(x)?.exp()) };
    let mut total = 0.0;
    for j in 0..embedding.latent_dim() {
        let zp = shifted(z, j, h);
        let zm = shifted(z, j, -h);
        let up = pinv_at(embedding, &zp)?[(j, direction)] * density_at(&zp)?;
        let down = pinv_at(embedding, &zm)?[(j, direction)] * density_at(&zm)?;
        total += (up - down) / (2.0 * h);
    }
    Ok(total)
}

/// Momentum density `J⁺_{ji} q` as a `d×D` matrix.
pub fn canonical_momentum(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    z: &[f64],
) -> Result<Matrix, VariationalError> {
    Ok(pinv_at(embedding, z)?.scale(prior.log_density(z)?.exp()))
}

/// `L = q(z)[φ₁′φ₂ − φ₁φ₂′] / ‖φ′‖²` for a planar curve.
pub fn angular_momentum_1d(embedding: &EmbeddingModel, prior: &PriorModel, z: f64) -> Result<f64, VariationalError> {
    if embedding.latent_dim() != 1 || embedding.ambient_dim() != 2 {
        return Err(VariationalError::Dimension(
            "angular momentum needs d = 1, D = 2".into(),
        ));
    }
    let (phi, jac) = embedding.eval_with_jacobian(&[z]);
    let (v1, v2) = (jac[(0, 0)], jac[(1, 0)]);
    let speed2 = v1 * v1 + v2 * v2;
    if !(speed2 > 0.0) {
        return Err(VariationalError::ZeroVelocity { z });
    }
    let q = prior.log_density(&[z])?.exp();
    Ok(q * (v1 * phi[1] - phi[0] * v2) / speed2)
}

/// `T_{ij} = δ_{ij}(q − 𝓛)` with `𝓛 = q·(½ log det(JᵀJ) + log p − log q)`,
/// after checking `J⁺J = I` to 1e-8.
pub fn stress_energy(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    z: &[f64],
) -> Result<Matrix, VariationalError> {
    let d = embedding.latent_dim();
    let jac = embedding.jacobian(z);
    let pinv = pseudoinverse(&jac).map_err(|source| VariationalError::Stencil { z: z.to_vec(), source })?;
    let deviation = pinv.matmul(&jac).sub(&Matrix::identity(d)).max_abs();
    if !(deviation <= 1e-8) {
        return Err(VariationalError::Contraction { deviation });
    }
    let terms = integrand_terms(embedding, prior, density, z)?;
    let q = terms.log_prior.exp();
    let lagrangian = q * terms.value();
    Ok(Matrix::identity(d).scale(q - lagrangian))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub range: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        Self {
            mean,
            std: var.sqrt(),
            range: hi - lo,
        }
    }

    /// `std / (1 + |mean|)`.
    pub fn relative_std(&self) -> f64 {
        self.std / (1.0 + self.mean.abs())
    }

    /// `std / |mean|`.
    pub fn coefficient_of_variation(&self) -> f64 {
        self.std / self.mean.abs()
    }
}

/// Per-sample conserved quantities.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConservationTrace {
    pub samples: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    /// Row-major `d×D` momentum density per sample.
    pub momentum: Vec<Vec<f64>>,
    /// Present for planar curves.
    pub angular_momentum: Option<Vec<f64>>,
    pub energy_summary: Summary,
    pub angular_summary: Option<Summary>,
}

impl ConservationTrace {
    pub fn energy_relative_std(&self) -> f64 {
        self.energy_summary.relative_std()
    }

    /// CSV text: latent coordinates, energy, momentum entries and (when
    /// present) angular momentum, one row per sample.
    pub fn to_csv(&self) -> String {
        let d = self.samples.first().map_or(0, Vec::len);
        let m = self.momentum.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (0..d).map(|j| format!("z{j}_latent")).collect();
        header.push("energy_nats".into());
        header.extend((0..m).map(|k| format!("momentum_{k}_per_latent_volume")));
        if self.angular_momentum.is_some() {
            header.push("angular_momentum_per_latent_volume".into());
        }
        let mut out = header.join(",");
        out.push('\n');
        for (k, z) in self.samples.iter().enumerate() {
            let mut row: Vec<String> = z.iter().map(|v| format!("{v:e}")).collect();
            row.push(format!("{:e}", self.energy[k]));
            row.extend(self.momentum[k].iter().map(|v| format!("{v:e}")));
            if let Some(l) = &self.angular_momentum {
                row.push(format!("{:e}", l[k]));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Conserved quantities at the given latent samples.
pub fn conservation_trace(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    samples: Vec<Vec<f64>>,
) -> Result<ConservationTrace, VariationalError> {
    if samples.is_empty() {
        return Err(VariationalError::Dimension("no samples".into()));
    }
    let planar = embedding.latent_dim() == 1 && embedding.ambient_dim() == 2;
    let rows: Vec<(f64, Vec<f64>, Option<f64>)> = samples
        .par_iter()
        .map(|z| {
            let e = embedding_energy(embedding, prior, density, z)?;
            let mom = canonical_momentum(embedding, prior, z)?.into_vec();
            let l = if planar {
                Some(angular_momentum_1d(embedding, prior, z[0])?)
            } else {
                None
            };
            Ok((e, mom, l))
        })
        .collect::<Result<Vec<_>, VariationalError>>()?;
    let energy: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let momentum = rows.iter().map(|r| r.1.clone()).collect();
    let angular: Option<Vec<f64>> = planar.then(|| rows.iter().map(|r| r.2.expect("planar")).collect());
    Ok(ConservationTrace {
        energy_summary: Summary::of(&energy),
        angular_summary: angular.as_deref().map(Summary::of),
        samples,
        energy,
        momentum,
        angular_momentum: angular,
    })
}

/// Energy conservation over `n` prior samples restricted to the core
/// region (within 3σ for Gaussian priors, the support otherwise).
pub fn energy_conservation_report(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    n: usize,
    seed: u64,
) -> Result<ConservationTrace, VariationalError> {
    conservation_trace(embedding, prior, density, prior.sample_core(n, seed))
}

/// Angular momentum summary over an even grid of `n` points covering the
/// central `mass` of a one-dimensional prior.
pub fn angular_momentum_profile(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    mass: f64,
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>, Summary), VariationalError> {
    let (lo, hi) = prior.central_interval(mass)?;
    let zs: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    let ls = zs
        .iter()
        .map(|z| angular_momentum_1d(embedding, prior, *z))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = Summary::of(&ls);
    Ok((zs, ls, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Basis;
    use crate::pca::closed_form_solution;

    #[test]
    fn pca_closed_form_is_stationary() {
        let sigma = Matrix::diag(&[4.0, 1.0]);
        let sol = closed_form_solution(&sigma, 1, 1.0, None).unwrap();
        let emb = EmbeddingModel::linear(&sol.a, &[0.0, 0.0]).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let p = DensityModel::gaussian(vec![0.0, 0.0], &sigma).unwrap();
        for z in [-2.5, -0.3, 0.0, 1.7] {
            let r = el_residual(&emb, &q, &p, &[z], None).unwrap();
            assert!(r.absolute < 1e-6, "{r:?}");
            let e = embedding_energy(&emb, &q, &p, &[z]).unwrap();
            assert!((e - 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_flat_case_vanishes() {
        let emb = EmbeddingModel::linear(&Matrix::column(&[0.3]), &[0.2]).unwrap();
        let q = PriorModel::uniform(vec![0.0], vec![1.0]).unwrap();
        let p = DensityModel::smoothed_ball(vec![0.35], 10.0, None).unwrap();
        let r = el_residual(&emb, &q, &p, &[0.5], None).unwrap();
        assert!(r.absolute < 1e-12, "{r:?}");
        assert_eq!(canonical_momentum_divergence(&emb, &q, 0, &[0.5], None).unwrap(), 0.0);
    }

    #[test]
    fn identity_energy_and_stress() {
        let emb = EmbeddingModel::linear(&Matrix::identity(2), &[0.0, 0.0]).unwrap();
        let q = PriorModel::gaussian(2, 1.0).unwrap();
        let p = DensityModel::gaussian(vec![0.0, 0.0], &Matrix::identity(2)).unwrap();
        for z in [[0.0, 0.0], [1.0, -2.0]] {
            assert!(embedding_energy(&emb, &q, &p, &z).unwrap().abs() < 1e-14);
            let t = stress_energy(&emb, &q, &p, &z).unwrap();
            let qz = q.log_density(&z).unwrap().exp();
            assert!(t.sub(&Matrix::identity(2).scale(qz)).max_abs() < 1e-15);
        }
    }

    #[test]
    fn circle_angular_momentum_is_exact() {
        let degree = 40;
        let mut coeffs = vec![vec![0.0, 0.0]; degree + 1];
        let mut term = 1.0;
        for n in 0..=degree {
            if n > 0 {
                term /= n as f64;
            }
            let sign = if (n / 2) % 2 == 0 { 1.0 } else { -1.0 };
            coeffs[n][n % 2] = sign * term;
        }
        let emb = EmbeddingModel::basis_1d(Basis::Monomial, &coeffs).unwrap();
        let q = PriorModel::uniform(vec![-3.0], vec![3.0]).unwrap();
        let want = -1.0 / 6.0;
        for k in 0..=20 {
            let z = -2.9 + 0.29 * k as f64;
            let l = angular_momentum_1d(&emb, &q, z).unwrap();
            assert!((l - want).abs() < 1e-12, "{l}");
        }
        let radial = EmbeddingModel::linear(&Matrix::column(&[1.0, 2.0]), &[0.0, 0.0]).unwrap();
        assert_eq!(angular_momentum_1d(&radial, &q, 0.7).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_breaks_translation_symmetry() {
        let emb = EmbeddingModel::linear(&Matrix::column(&[1.5]), &[0.0]).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let div = canonical_momentum_divergence(&emb, &q, 0, &[0.8], None).unwrap();
        assert!(div.abs() > 1e-3);
    }
}
