//! Gradient-based maximization of the embedding objective.
//!
//! The default schedule runs Adam and then a backtracking ascent tail whose
//! accepted iterates never decrease the objective. Iterates that cannot be
//! evaluated shrink the step instead of being clamped.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingModel;
use crate::models::{DensityModel, PriorModel};
use crate::numerics::{norm2, QuadratureRule};
use crate::objective::{estimate_with_rule, IntegrationScheme, ObjectiveError, Repulsion};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("every restart failed at initialization: {}", .0.join("; "))]
    AllRestartsFailed(Vec<String>),
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Adam for `max_iterations`, then `tail_iterations` backtracking steps.
    Adam,
    /// Backtracking gradient ascent only, for `max_iterations` steps.
    GradientAscentWithBacktracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub method: Method,
    pub step_size: f64,
    pub max_iterations: usize,
    pub tail_iterations: usize,
    /// Stop once the gradient norm drops below this.
    pub gradient_tolerance: f64,
    /// Backtracking stops once an accepted step gains less than this.
    pub objective_tolerance: f64,
    pub seed: u64,
    pub restarts: usize,
    /// Step halvings allowed per iteration before giving up.
    pub max_halvings: usize,
    /// Linear-path scale used when reinitializing later restarts.
    pub init_slope: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            step_size: 1e-2,
            max_iterations: 2000,
            tail_iterations: 200,
            gradient_tolerance: 1e-6,
            objective_tolerance: 1e-14,
            seed: 0,
            restarts: 1,
            max_halvings: 30,
            init_slope: 1.0,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(OptimizeError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("step_size", self.step_size)?;
        positive("gradient_tolerance", self.gradient_tolerance)?;
        positive("objective_tolerance", self.objective_tolerance)?;
        positive("init_slope", self.init_slope)?;
        if self.restarts == 0 {
            return Err(OptimizeError::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }

    /// Seed used to initialize restart `r`.
    pub fn restart_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add((r as u64).wrapping_mul(1_000_003))
    }
}

/// One objective evaluation: the maximized quantity is `value − penalty`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub penalty: f64,
    pub gradient: Option<Vec<f64>>,
}

impl Evaluation {
    pub fn objective(&self) -> f64 {
        self.value - self.penalty
    }
}

/// Anything the optimizer can maximize.
pub trait Objective: Sync {
    fn evaluate(&self, theta: &[f64], want_gradient: bool) -> Result<Evaluation, ObjectiveError>;
}

/// The embedding objective on a fixed rule, optionally with repulsion.
pub struct EmbeddingObjective<'a> {
    template: &'a EmbeddingModel,
    prior: &'a PriorModel,
    density: &'a DensityModel,
    scheme: IntegrationScheme,
    rule: QuadratureRule,
    repulsion: Option<Repulsion>,
}

impl<'a> EmbeddingObjective<'a> {
    pub fn new(
        template: &'a EmbeddingModel,
        prior: &'a PriorModel,
        density: &'a DensityModel,
        scheme: IntegrationScheme,
        repulsion: Option<Repulsion>,
    ) -> Result<Self, ObjectiveError> {
        let rule = scheme.rule(prior)?;
        Ok(Self {
            template,
            prior,
            density,
            scheme,
            rule,
            repulsion,
        })
    }
}

impl Objective for EmbeddingObjective<'_> {
    fn evaluate(&self, theta: &[f64], want_gradient: bool) -> Result<Evaluation, ObjectiveError> {
        let model = self.template.with_theta(theta.to_vec())?;
        let est = estimate_with_rule(
            &model,
            self.prior,
            self.density,
            &self.rule,
            &self.scheme,
            want_gradient,
        )?;
        let mut gradient = est.gradient;
        let penalty = match &self.repulsion {
            Some(rep) if rep.weight > 0.0 => {
                let (p, pg) = rep.evaluate(&model, self.rule.nodes(), want_gradient)?;
                if let (Some(g), Some(pg)) = (gradient.as_mut(), pg) {
                    for (a, b) in g.iter_mut().zip(pg) {
                        *a -= b;
                    }
                }
                p
            }
            _ => 0.0,
        };
        Ok(Evaluation {
            value: est.value,
            penalty,
            gradient,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Adam,
    Backtracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub phase: Phase,
    /// Objective `J` at the iterate after this iteration.
    pub value: f64,
    pub penalty: f64,
    pub gradient_norm: f64,
    pub step: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIterations,
    /// No step length improved the objective.
    Stalled,
    /// Stuck after exhausting step halvings on invalid iterates.
    Stuck(String),
    FailedAtInit(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeTrace {
    pub restart: usize,
    pub rows: Vec<TraceRow>,
    pub final_theta: Vec<f64>,
    pub final_value: f64,
    pub final_penalty: f64,
    pub final_gradient_norm: f64,
    pub status: Status,
    pub wall_clock_seconds: f64,
}

impl OptimizeTrace {
    pub fn final_objective(&self) -> f64 {
        self.final_value - self.final_penalty
    }

    pub fn succeeded(&self) -> bool {
        !matches!(self.status, Status::FailedAtInit(_))
    }
}

struct Iterate {
    theta: Vec<f64>,
    eval: Evaluation,
}

impl Iterate {
    fn grad(&self) -> &[f64] {
        self.eval.gradient.as_deref().expect("gradient requested")
    }
}

fn axpy(theta: &[f64], step: f64, dir: &[f64]) -> Vec<f64> {
    theta.iter().zip(dir).map(|(t, g)| t + step * g).collect()
}

/// Maximizes `objective` from `initial`; the returned trace carries the
/// best iterate found.
pub fn maximize(
    objective: &dyn Objective,
    initial: Vec<f64>,
    config: &OptimizeConfig,
    restart: usize,
) -> OptimizeTrace {
    let start = Instant::now();
    let mut rows = Vec::new();
    let first = match objective.evaluate(&initial, true) {
        Ok(eval) => Iterate { theta: initial, eval },
        Err(e) => {
            return OptimizeTrace {
                restart,
                rows,
                final_theta: initial,
                final_value: f64::NAN,
                final_penalty: 0.0,
                final_gradient_norm: f64::NAN,
                status: Status::FailedAtInit(e.to_string()),
                wall_clock_seconds: start.elapsed().as_secs_f64(),
            };
        }
    };
    let mut adam_stuck = None;
    let mut iteration = 0;
    let mut best = first;

    if config.method == Method::Adam {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let n = best.theta.len();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let mut current = Iterate {
            theta: best.theta.clone(),
            eval: best.eval.clone(),
        };
        for t in 1..=config.max_iterations {
            iteration += 1;
            let g = current.grad();
            if norm2(g) < config.gradient_tolerance {
                break;
            }
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            }
            let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
            let dir: Vec<f64> = (0..n).map(|i| (m[i] / c1) / ((v[i] / c2).sqrt() + eps)).collect();
            let mut step = config.step_size;
            let mut next = None;
            let mut last_err = String::new();
            for _ in 0..=config.max_halvings {
                let theta = axpy(&current.theta, step, &dir);
                match objective.evaluate(&theta, true) {
                    Ok(eval) => {
                        next = Some(Iterate { theta, eval });
                        break;
                    }
                    Err(e) => {
                        last_err = e.to_string();
                        step *= 0.5;
                    }
                }
            }
            let Some(next) = next else {
                adam_stuck = Some(last_err);
                break;
            };
            rows.push(TraceRow {
                iteration,
                phase: Phase::Adam,
                value: next.eval.value,
                penalty: next.eval.penalty,
                gradient_norm: norm2(next.grad()),
                step,
                accepted: true,
            });
            current = next;
            if current.eval.objective() > best.eval.objective() {
                best = Iterate {
                    theta: current.theta.clone(),
                    eval: current.eval.clone(),
                };
            }
        }
    }

    let tail = match config.method {
        Method::Adam => config.tail_iterations,
        Method::GradientAscentWithBacktracking => config.max_iterations,
    };
    // the tail starts from the best Adam iterate; a converged one returns at once
    let mut status = None;
    {
        let armijo = 1e-4;
        let mut alpha = config.step_size;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        for _ in 0..tail {
            let g = best.grad().to_vec();
            let gnorm = norm2(&g);
            if gnorm < config.gradient_tolerance {
                status = Some(Status::Converged);
                break;
            }
            // Barzilai-Borwein trial length from the last accepted pair
            if let Some((theta_prev, g_prev)) = &prev {
                let s: Vec<f64> = best.theta.iter().zip(theta_prev).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g.iter().zip(g_prev).map(|(a, b)| a - b).collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                let ss: f64 = s.iter().map(|a| a * a).sum();
                alpha = if sy.abs() > 1e-300 { ss / sy.abs() } else { alpha * 2.0 };
            }
            let f0 = best.eval.objective();
            let mut step = alpha;
            let mut accepted = None;
            for _ in 0..=config.max_halvings {
                iteration += 1;
                let theta = axpy(&best.theta, step, &g);
                let ok = match objective.evaluate(&theta, true) {
                    Ok(eval) if eval.objective() >= f0 + armijo * step * gnorm * gnorm && eval.objective() > f0 => {
                        Some(Iterate { theta, eval })
                    }
                    _ => None,
                };
                let is_ok = ok.is_some();
                rows.push(TraceRow {
                    iteration,
                    phase: Phase::Backtracking,
                    value: ok.as_ref().map_or(best.eval.value, |it| it.eval.value),
                    penalty: ok.as_ref().map_or(best.eval.penalty, |it| it.eval.penalty),
                    gradient_norm: ok.as_ref().map_or(gnorm, |it| norm2(it.grad())),
                    step,
                    accepted: is_ok,
                });
                if is_ok {
                    accepted = ok;
                    break;
                }
                step *= 0.5;
            }
            let Some(next) = accepted else {
                status = Some(match adam_stuck.take() {
                    Some(reason) => Status::Stuck(reason),
                    None => Status::Stalled,
                });
                break;
            };
            let gain = next.eval.objective() - f0;
            prev = Some((best.theta.clone(), g));
            alpha = step;
            best = next;
            if gain < config.objective_tolerance {
                status = Some(Status::Converged);
                break;
            }
        }
    }
    let status = status.unwrap_or_else(|| {
        if norm2(best.grad()) < config.gradient_tolerance {
            Status::Converged
        } else {
            Status::MaxIterations
        }
    });
    OptimizeTrace {
        restart,
        rows,
        final_gradient_norm: norm2(best.grad()),
        final_value: best.eval.value,
        final_penalty: best.eval.penalty,
        final_theta: best.theta,
        status,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    }
}

/// Result of a multi-restart fit.
#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub fitted: EmbeddingModel,
    pub best_restart: usize,
    pub traces: Vec<OptimizeTrace>,
}

impl OptimizeOutcome {
    pub fn best_trace(&self) -> &OptimizeTrace {
        &self.traces[self.best_restart]
    }
}

/// Fits `embedding` by maximizing the objective. Restart 0 starts from the
/// given parameters; later restarts reinitialize with derived seeds. The
/// highest final objective wins, ties going to the lowest restart index.
pub fn optimize(
    embedding: &EmbeddingModel,
    prior: &PriorModel,
    density: &DensityModel,
    scheme: &IntegrationScheme,
    repulsion: Option<Repulsion>,
    config: &OptimizeConfig,
) -> Result<OptimizeOutcome, OptimizeError> {
    config.validate()?;
    let objective = EmbeddingObjective::new(embedding, prior, density, scheme.clone(), repulsion)?;
    let mut traces = Vec::with_capacity(config.restarts);
    for r in 0..config.restarts {
        let init = if r == 0 {
            embedding.theta().to_vec()
        } else {
            match embedding.reinitialized(config.restart_seed(r), config.init_slope) {
                Ok(m) => m.theta().to_vec(),
                Err(e) => {
                    traces.push(OptimizeTrace {
                        restart: r,
                        rows: Vec::new(),
                        final_theta: Vec::new(),
                        final_value: f64::NAN,
                        final_penalty: 0.0,
                        final_gradient_norm: f64::NAN,
                        status: Status::FailedAtInit(e.to_string()),
                        wall_clock_seconds: 0.0,
                    });
                    continue;
                }
            }
        };
        traces.push(maximize(&objective, init, config, r));
    }
    let best = pick_best(&traces).ok_or_else(|| {
        OptimizeError::AllRestartsFailed(
            traces
                .iter()
                .filter_map(|t| match &t.status {
                    Status::FailedAtInit(e) => Some(format!("restart {}: {e}", t.restart)),
                    _ => None,
                })
                .collect(),
        )
    })?;
    let fitted = embedding
        .with_theta(traces[best].final_theta.clone())
        .map_err(ObjectiveError::from)?;
    Ok(OptimizeOutcome {
        fitted,
        best_restart: best,
        traces,
    })
}

fn pick_best(traces: &[OptimizeTrace]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, t) in traces.iter().enumerate() {
        if !t.succeeded() || !t.final_objective().is_finite() {
            continue;
        }
        match best {
            Some(b) if traces[b].final_objective() >= t.final_objective() => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RestartStats {
    pub best_value: f64,
    pub best_restart: usize,
    /// Max minus min final objective over successful restarts.
    pub spread: f64,
    pub finals: Vec<f64>,
}

/// Summary across restarts. Needs at least one successful trace.
pub fn multi_restart_stats(traces: &[OptimizeTrace]) -> Option<RestartStats> {
    let best = pick_best(traces)?;
    let finals: Vec<f64> = traces.iter().map(OptimizeTrace::final_objective).collect();
    let ok: Vec<f64> = finals.iter().copied().filter(|v| v.is_finite()).collect();
    let hi = ok.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = ok.iter().copied().fold(f64::INFINITY, f64::min);
    Some(RestartStats {
        best_value: traces[best].final_objective(),
        best_restart: best,
        spread: hi - lo,
        finals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Family;
    use crate::numerics::Matrix;

    struct Quadratic {
        center: Vec<f64>,
        curvature: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn evaluate(&self, theta: &[f64], want_gradient: bool) -> Result<Evaluation, ObjectiveError> {
            let value = -0.5
                * theta
                    .iter()
                    .zip(&self.center)
                    .zip(&self.curvature)
                    .map(|((t, c), k)| k * (t - c) * (t - c))
                    .sum::<f64>();
            let gradient = want_gradient.then(|| {
                theta
                    .iter()
                    .zip(&self.center)
                    .zip(&self.curvature)
                    .map(|((t, c), k)| -k * (t - c))
                    .collect()
            });
            Ok(Evaluation {
                value,
                penalty: 0.0,
                gradient,
            })
        }
    }

    #[test]
    fn quadratic_hook_converges() {
        let q = Quadratic {
            center: vec![1.0, -2.0, 0.5],
            curvature: vec![1.0, 10.0, 0.3],
        };
        for method in [Method::Adam, Method::GradientAscentWithBacktracking] {
            let cfg = OptimizeConfig {
                method,
                max_iterations: 500,
                tail_iterations: 500,
                gradient_tolerance: 1e-9,
                ..OptimizeConfig::default()
            };
            let t = maximize(&q, vec![0.0; 3], &cfg, 0);
            for (a, b) in t.final_theta.iter().zip(&q.center) {
                assert!((a - b).abs() < 1e-6, "{method:?}: {:?}", t.final_theta);
            }
            let accepted: Vec<f64> = t
                .rows
                .iter()
                .filter(|r| r.accepted && r.phase == Phase::Backtracking)
                .map(|r| r.value)
                .collect();
            assert!(accepted.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn pca_instance_fits_and_is_deterministic() {
        let p = DensityModel::gaussian(vec![0.0, 0.0], &Matrix::diag(&[4.0, 1.0])).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let emb = EmbeddingModel::random(Family::Linear, 1, 2, &[0.0, 0.0], 5).unwrap();
        let scheme = IntegrationScheme::Quadrature { order: 16 };
        let cfg = OptimizeConfig {
            restarts: 3,
            max_iterations: 300,
            ..OptimizeConfig::default()
        };
        let out = optimize(&emb, &q, &p, &scheme, None, &cfg).unwrap();
        let want = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((out.best_trace().final_value - want).abs() < 1e-3);
        let (a, _) = out.fitted.linear_parts().unwrap();
        let angle = (a[(1, 0)].abs() / a[(0, 0)].abs()).atan();
        assert!(angle < 0.02);
        let again = optimize(&emb, &q, &p, &scheme, None, &cfg).unwrap();
        for (x, y) in out.traces.iter().zip(&again.traces) {
            assert_eq!(x.rows, y.rows);
            assert_eq!(x.final_theta, y.final_theta);
        }
        let stats = multi_restart_stats(&out.traces).unwrap();
        assert!(stats.spread < 1e-3);
    }

    #[test]
    fn identical_traces_have_zero_spread() {
        let q = Quadratic {
            center: vec![1.0],
            curvature: vec![1.0],
        };
        let cfg = OptimizeConfig::default();
        let t = maximize(&q, vec![0.0], &cfg, 0);
        let stats = multi_restart_stats(&[t.clone(), t]).unwrap();
        assert_eq!(stats.spread, 0.0);
        assert_eq!(stats.best_restart, 0);
    }

    #[test]
    fn failing_init_is_reported() {
        let p = DensityModel::gaussian(vec![0.0, 0.0], &Matrix::identity(2)).unwrap();
        let q = PriorModel::gaussian(1, 1.0).unwrap();
        let emb = EmbeddingModel::linear(&Matrix::column(&[0.0, 0.0]), &[0.0, 0.0]).unwrap();
        let cfg = OptimizeConfig::default();
        let err = optimize(&emb, &q, &p, &IntegrationScheme::Quadrature { order: 4 }, None, &cfg);
        assert!(matches!(err, Err(OptimizeError::AllRestartsFailed(ref v)) if v.len() == 1));
    }
}
