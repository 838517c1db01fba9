//! Ambient data densities and latent priors.
//!
//! Densities expose a generic log-density (so the objective can tape it)
//! and an analytic score. Priors additionally provide sampling and the
//! quadrature rules used to estimate expectations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::numerics::{
    cholesky, gauss_hermite_rule, gauss_legendre_1d, gauss_legendre_rule, pairwise_sum, spd_inverse, spd_logdet,
    sym_eigendecomp, AffineMap, Matrix, NumericsError, QuadratureRule, Real,
};

/// Log-densities below this are reported as `-inf`.
pub const LOG_UNDERFLOW: f64 = -745.0;
/// Scores are only defined where the density exceeds `1e-300`.
pub const SCORE_LOG_FLOOR: f64 = -690.775_527_898_213_7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
    #[error("score undefined at this point: {0}")]
    UndefinedScore(String),
    #[error("density underflow (log density {log_density:e})")]
    Underflow { log_density: f64 },
    #[error("no quadrature rule for this prior: {0}")]
    NoQuadrature(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Serializable description of an ambient density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    /// Multivariate normal `N(mean, covariance)`.
    Gaussian { mean: Vec<f64>, covariance: Vec<Vec<f64>> },
    /// Equal-variance isotropic Gaussian mixture.
    Mixture {
        weights: Vec<f64>,
        centers: Vec<Vec<f64>>,
        variance: f64,
    },
    /// Ball with a logistic edge of width `1/sharpness`.
    SmoothedBall {
        center: Vec<f64>,
        radius: f64,
        sharpness: f64,
    },
    /// Planar ring with a Gaussian radial profile.
    Ring { center: Vec<f64>, radius: f64, width: f64 },
}

#[derive(Clone, Debug)]
enum DensityKind {
    Gaussian {
        mean: Vec<f64>,
        precision: Matrix,
    },
    Mixture {
        log_weights: Vec<f64>,
        centers: Vec<Vec<f64>>,
        variance: f64,
    },
    SmoothedBall {
        center: Vec<f64>,
        radius: f64,
        sharpness: f64,
    },
    Ring {
        center: Vec<f64>,
        radius: f64,
        width: f64,
    },
}

/// Normalized ambient density `p_data` on `R^D`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "DensitySpec", into = "DensitySpec")]
pub struct DensityModel {
    spec: DensitySpec,
    kind: DensityKind,
    dim: usize,
    log_norm: f64,
}

impl PartialEq for DensityModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl From<DensityModel> for DensitySpec {
    fn from(d: DensityModel) -> Self {
        d.spec
    }
}

impl TryFrom<DensitySpec> for DensityModel {
    type Error = ModelError;

    fn try_from(spec: DensitySpec) -> Result<Self, ModelError> {
        DensityModel::from_spec(spec)
    }
}

fn check_positive(name: &str, v: f64) -> Result<(), ModelError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<(), ModelError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter(format!("{name} has non-finite entries")))
    }
}

fn log_unit_sphere_area(dim: usize) -> f64 {
    // area of S^{D-1}: 2 π^{D/2} / Γ(D/2)
    let h = dim as f64 / 2.0;
    2f64.ln() + h * PI.ln() - ln_gamma(h)
}

#[cfg(test)]
fn log_unit_ball_volume(dim: usize) -> f64 {
    let h = dim as f64 / 2.0;
    h * PI.ln() - ln_gamma(h + 1.0)
}

/// `∫_0^∞ ρ^{D-1} / (1 + e^{β(ρ - R)}) dρ` by panelled Gauss-Legendre.
fn ball_radial_integral(dim: usize, radius: f64, sharpness: f64) -> f64 {
    let upper = radius + 60.0 / sharpness;
    // panels no wider than a quarter of the edge width
    let panels = ((upper * sharpness * 4.0).ceil() as usize).clamp(64, 200_000);
    let (x, w) = gauss_legendre_1d(12, 0.0, 1.0).expect("fixed order");
    let h = upper / panels as f64;
    let terms: Vec<f64> = (0..panels)
        .flat_map(|p| {
            let a = p as f64 * h;
            x.iter().zip(&w).map(move |(xi, wi)| {
                let rho = a + xi * h;
                let u = sharpness * (rho - radius);
                let fermi = if u > 0.0 {
                    (-u).exp() / (1.0 + (-u).exp())
                } else {
                    1.0 / (1.0 + u.exp())
                };
                wi * h * rho.powi(dim as i32 - 1) * fermi
            })
        })
        .collect();
    pairwise_sum(&terms)
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal as StdNormal};
    StdNormal::new(0.0, 1.0).expect("unit normal").inverse_cdf(p)
}

impl DensityModel {
    pub fn from_spec(spec: DensitySpec) -> Result<Self, ModelError> {
        let (kind, dim, log_norm) = match &spec {
            DensitySpec::Gaussian { mean, covariance } => {
                let dim = mean.len();
                if dim == 0 {
                    return Err(ModelError::InvalidParameter("gaussian needs a non-empty mean".into()));
                }
                check_finite("mean", mean)?;
                let cov = Matrix::from_rows(covariance)?;
                if cov.shape() != (dim, dim) {
                    return Err(ModelError::Dimension {
                        expected: dim,
                        got: cov.rows(),
                    });
                }
                let eig = sym_eigendecomp(&cov)?;
                if !(eig.values[dim - 1] > 0.0) {
                    return Err(ModelError::InvalidParameter(format!(
                        "covariance is not positive definite (smallest eigenvalue {:e})",
                        eig.values[dim - 1]
                    )));
                }
                let precision = spd_inverse(&cov)?;
                let log_norm = -0.5 * dim as f64 * (2.0 * PI).ln() - 0.5 * spd_logdet(&cov)?;
                (
                    DensityKind::Gaussian {
                        mean: mean.clone(),
                        precision,
                    },
                    dim,
                    log_norm,
                )
            }
            DensitySpec::Mixture {
                weights,
                centers,
                variance,
            } => {
                if centers.is_empty() || centers.len() != weights.len() {
                    return Err(ModelError::InvalidParameter(format!(
                        "mixture needs one weight per center ({} centers, {} weights)",
                        centers.len(),
                        weights.len()
                    )));
                }
                let dim = centers[0].len();
                if dim == 0 || centers.iter().any(|c| c.len() != dim) {
                    return Err(ModelError::InvalidParameter(
                        "mixture centers have mixed dimensions".into(),
                    ));
                }
                for c in centers {
                    check_finite("center", c)?;
                }
                check_positive("variance", *variance)?;
                if weights.iter().any(|w| !(*w > 0.0)) {
                    return Err(ModelError::InvalidParameter("mixture weights must be positive".into()));
                }
                let total: f64 = weights.iter().sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(ModelError::InvalidParameter(format!(
                        "mixture weights sum to {total}, expected 1"
                    )));
                }
                let log_norm = -0.5 * dim as f64 * (2.0 * PI * variance).ln();
                (
                    DensityKind::Mixture {
                        log_weights: weights.iter().map(|w| w.ln()).collect(),
                        centers: centers.clone(),
                        variance: *variance,
                    },
                    dim,
                    log_norm,
                )
            }
            DensitySpec::SmoothedBall {
                center,
                radius,
                sharpness,
            } => {
                let dim = center.len();
                if dim == 0 {
                    return Err(ModelError::InvalidParameter("ball needs a non-empty center".into()));
                }
                check_finite("center", center)?;
                check_positive("radius", *radius)?;
                check_positive("sharpness", *sharpness)?;
                let radial = ball_radial_integral(dim, *radius, *sharpness);
                let log_norm = -(log_unit_sphere_area(dim) + radial.ln());
                (
                    DensityKind::SmoothedBall {
                        center: center.clone(),
                        radius: *radius,
                        sharpness: *sharpness,
                    },
                    dim,
                    log_norm,
                )
            }
            DensitySpec::Ring { center, radius, width } => {
                if center.len() != 2 {
                    return Err(ModelError::Dimension {
                        expected: 2,
                        got: center.len(),
                    });
                }
                check_finite("center", center)?;
                check_positive("radius", *radius)?;
                check_positive("width", *width)?;
                let (r, s) = (*radius, *width);
                let radial = s * s * (-(r * r) / (2.0 * s * s)).exp() + r * s * (2.0 * PI).sqrt() * normal_cdf(r / s);
                let log_norm = -(2.0 * PI * radial).ln();
                (
                    DensityKind::Ring {
                        center: center.clone(),
                        radius: r,
                        width: s,
                    },
                    2,
                    log_norm,
                )
            }
        };
        Ok(Self {
            spec,
            kind,
            dim,
            log_norm,
        })
    }

    pub fn gaussian(mean: Vec<f64>, covariance: &Matrix) -> Result<Self, ModelError> {
        let rows = (0..covariance.rows()).map(|i| covariance.row(i).to_vec()).collect();
        Self::from_spec(DensitySpec::Gaussian { mean, covariance: rows })
    }

    /// Mixture with equal weights.
    pub fn mixture(centers: Vec<Vec<f64>>, variance: f64) -> Result<Self, ModelError> {
        let k = centers.len().max(1);
        Self::from_spec(DensitySpec::Mixture {
            weights: vec![1.0 / k as f64; centers.len()],
            centers,
            variance,
        })
    }

    /// Smoothed ball; `sharpness` defaults to `50 / radius`.
    pub fn smoothed_ball(center: Vec<f64>, radius: f64, sharpness: Option<f64>) -> Result<Self, ModelError> {
        let sharpness = sharpness.unwrap_or(50.0 / radius);
        Self::from_spec(DensitySpec::SmoothedBall {
            center,
            radius,
            sharpness,
        })
    }

    pub fn ring(center: Vec<f64>, radius: f64, width: f64) -> Result<Self, ModelError> {
        Self::from_spec(DensitySpec::Ring { center, radius, width })
    }

    pub fn spec(&self) -> &DensitySpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Log-density on any scalar type, all normalizers included. No
    /// underflow sentinel is applied here.
    pub fn log_density_of<T: Real>(&self, x: &[T]) -> T {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            DensityKind::Gaussian { mean, precision } => {
                let diff: Vec<T> = x.iter().zip(mean).map(|(xi, m)| *xi - *m).collect();
                let pd: Vec<T> = (0..self.dim).map(|i| T::dot_const(precision.row(i), &diff)).collect();
                T::dot(&diff, &pd) * -0.5 + self.log_norm
            }
            DensityKind::Mixture {
                log_weights,
                centers,
                variance,
            } => {
                let terms: Vec<T> = centers
                    .iter()
                    .zip(log_weights)
                    .map(|(c, lw)| {
                        let diff: Vec<T> = x.iter().zip(c).map(|(xi, ci)| *xi - *ci).collect();
                        T::dot(&diff, &diff) * (-0.5 / variance) + *lw
                    })
                    .collect();
                T::log_sum_exp(&terms) + self.log_norm
            }
            DensityKind::SmoothedBall {
                center,
                radius,
                sharpness,
            } => {
                let diff: Vec<T> = x.iter().zip(center).map(|(xi, ci)| *xi - *ci).collect();
                let r2 = T::dot(&diff, &diff);
                let r = if r2.value() > 0.0 { r2.sqrt() } else { T::cst(0.0) };
                -((r - *radius) * *sharpness).softplus() + self.log_norm
            }
            DensityKind::Ring { center, radius, width } => {
                let diff: Vec<T> = x.iter().zip(center).map(|(xi, ci)| *xi - *ci).collect();
                let r2 = T::dot(&diff, &diff);
                let r = if r2.value() > 0.0 { r2.sqrt() } else { T::cst(0.0) };
                (r - *radius).square() * (-0.5 / (width * width)) + self.log_norm
            }
        }
    }

    /// Log-density with the underflow convention: values below
    /// [`LOG_UNDERFLOW`] become `-inf`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        let v = self.log_density_of(x);
        Ok(if v < LOG_UNDERFLOW { f64::NEG_INFINITY } else { v })
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim {
            return Err(ModelError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `∇_x log p(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        let lp = self.log_density_of(x);
        if !(lp > SCORE_LOG_FLOOR) {
            return Err(ModelError::Underflow { log_density: lp });
        }
        let score = match &self.kind {
            DensityKind::Gaussian { mean, precision } => {
                let diff: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
                precision.matvec(&diff).iter().map(|v| -v).collect()
            }
            DensityKind::Mixture {
                log_weights,
                centers,
                variance,
            } => {
                let logits: Vec<f64> = centers
                    .iter()
                    .zip(log_weights)
                    .map(|(c, lw)| lw - 0.5 * x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / variance)
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let resp: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let total: f64 = resp.iter().sum();
                let mut s = vec![0.0; self.dim];
                for (r, c) in resp.iter().zip(centers) {
                    for i in 0..self.dim {
                        s[i] -= r / total * (x[i] - c[i]) / variance;
                    }
                }
                s
            }
            DensityKind::SmoothedBall {
                center,
                radius,
                sharpness,
            } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
                let r = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r == 0.0 {
                    vec![0.0; self.dim]
                } else {
                    let u = sharpness * (r - radius);
                    let logistic = if u > 0.0 {
                        1.0 / (1.0 + (-u).exp())
                    } else {
                        u.exp() / (1.0 + u.exp())
                    };
                    diff.iter().map(|v| -sharpness * logistic * v / r).collect()
                }
            }
            DensityKind::Ring { center, radius, width } => {
                let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
                let r = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r <= 1e-12 * radius {
                    return Err(ModelError::UndefinedScore(
                        "ring density has a cusp at its center".into(),
                    ));
                }
                let f = -(r - radius) / (width * width);
                diff.iter().map(|v| f * v / r).collect()
            }
        };
        Ok(score)
    }
}

/// Serializable description of a latent prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorSpec {
    /// `N(0, σ0² I_dim)`.
    Gaussian { dim: usize, sigma: f64 },
    /// Uniform on the box `Π [lower_i, upper_i]`.
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
    /// `γ e^{γz}` on `(−∞, 0]` (one-dimensional).
    Exponential { gamma: f64 },
    /// Density of `z'` when `g(z') ~ base`, i.e. `q(g(z'))·|det M|`.
    Pushforward {
        base: Box<PriorSpec>,
        linear: Vec<Vec<f64>>,
        shift: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
enum PriorKind {
    Gaussian { sigma: f64 },
    Uniform { bounds: Vec<(f64, f64)> },
    Exponential { gamma: f64 },
    Pushforward { base: Box<PriorModel>, map: AffineMap },
}

/// Latent prior `q` on `R^d`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "PriorSpec", into = "PriorSpec")]
pub struct PriorModel {
    spec: PriorSpec,
    kind: PriorKind,
    dim: usize,
}

impl PartialEq for PriorModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl From<PriorModel> for PriorSpec {
    fn from(p: PriorModel) -> Self {
        p.spec
    }
}

impl TryFrom<PriorSpec> for PriorModel {
    type Error = ModelError;

    fn try_from(spec: PriorSpec) -> Result<Self, ModelError> {
        PriorModel::from_spec(spec)
    }
}

impl PriorModel {
    pub fn from_spec(spec: PriorSpec) -> Result<Self, ModelError> {
        let (kind, dim) = match &spec {
            PriorSpec::Gaussian { dim, sigma } => {
                if *dim == 0 {
                    return Err(ModelError::InvalidParameter(
                        "prior dimension must be at least 1".into(),
                    ));
                }
                check_positive("sigma", *sigma)?;
                (PriorKind::Gaussian { sigma: *sigma }, *dim)
            }
            PriorSpec::Uniform { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(ModelError::InvalidParameter(
                        "uniform bounds must be non-empty and matching".into(),
                    ));
                }
                check_finite("lower", lower)?;
                check_finite("upper", upper)?;
                if lower.iter().zip(upper).any(|(a, b)| !(b > a)) {
                    return Err(ModelError::InvalidParameter("uniform box has an empty side".into()));
                }
                (
                    PriorKind::Uniform {
                        bounds: lower.iter().copied().zip(upper.iter().copied()).collect(),
                    },
                    lower.len(),
                )
            }
            PriorSpec::Exponential { gamma } => {
                check_positive("gamma", *gamma)?;
                (PriorKind::Exponential { gamma: *gamma }, 1)
            }
            PriorSpec::Pushforward { base, linear, shift } => {
                let base = PriorModel::from_spec((**base).clone())?;
                let map = AffineMap::new(Matrix::from_rows(linear)?, shift.clone())?;
                if map.dim() != base.dim {
                    return Err(ModelError::Dimension {
                        expected: base.dim,
                        got: map.dim(),
                    });
                }
                let dim = base.dim;
                (
                    PriorKind::Pushforward {
                        base: Box::new(base),
                        map,
                    },
                    dim,
                )
            }
        };
        Ok(Self { spec, kind, dim })
    }

    pub fn gaussian(dim: usize, sigma: f64) -> Result<Self, ModelError> {
        Self::from_spec(PriorSpec::Gaussian { dim, sigma })
    }

    pub fn uniform(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, ModelError> {
        Self::from_spec(PriorSpec::Uniform { lower, upper })
    }

    pub fn exponential(gamma: f64) -> Result<Self, ModelError> {
        Self::from_spec(PriorSpec::Exponential { gamma })
    }

    /// Prior `q̃(z') = q(g(z'))·|det M_g|` of the coordinates `z'` with
    /// `z = g(z')`.
    pub fn pushforward(&self, g: &AffineMap) -> Result<Self, ModelError> {
        if g.dim() != self.dim {
            return Err(ModelError::Dimension {
                expected: self.dim,
                got: g.dim(),
            });
        }
        if g.is_identity() {
            return Ok(self.clone());
        }
        let linear = (0..g.dim()).map(|i| g.linear().row(i).to_vec()).collect();
        Self::from_spec(PriorSpec::Pushforward {
            base: Box::new(self.spec.clone()),
            linear,
            shift: g.shift().to_vec(),
        })
    }

    pub fn spec(&self) -> &PriorSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Isotropic Gaussian scale, if this is an isotropic Gaussian prior.
    pub fn gaussian_sigma(&self) -> Option<f64> {
        match self.kind {
            PriorKind::Gaussian { sigma } => Some(sigma),
            _ => None,
        }
    }

    fn check_dim(&self, z: &[f64]) -> Result<(), ModelError> {
        if z.len() != self.dim {
            return Err(ModelError::Dimension {
                expected: self.dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        match &self.kind {
            PriorKind::Gaussian { .. } => true,
            PriorKind::Uniform { bounds } => z.iter().zip(bounds).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi),
            PriorKind::Exponential { .. } => z[0] <= 0.0,
            PriorKind::Pushforward { base, map } => base.contains(&map.apply(z)),
        }
    }

    /// `log q(z)`; `-inf` outside the support.
    pub fn log_density(&self, z: &[f64]) -> Result<f64, ModelError> {
        self.check_dim(z)?;
        if !self.contains(z) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(match &self.kind {
            PriorKind::Gaussian { sigma } => {
                let r2: f64 = z.iter().map(|v| v * v).sum();
                -0.5 * self.dim as f64 * (2.0 * PI * sigma * sigma).ln() - 0.5 * r2 / (sigma * sigma)
            }
            PriorKind::Uniform { bounds } => -bounds.iter().map(|(lo, hi)| (hi - lo).ln()).sum::<f64>(),
            PriorKind::Exponential { gamma } => gamma.ln() + gamma * z[0],
            PriorKind::Pushforward { base, map } => base.log_density(&map.apply(z))? + map.log_abs_det(),
        })
    }

    /// `∇_z log q(z)` on the support.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(z)?;
        if !self.contains(z) {
            return Err(ModelError::UndefinedScore("point outside the prior support".into()));
        }
        Ok(match &self.kind {
            PriorKind::Gaussian { sigma } => z.iter().map(|v| -v / (sigma * sigma)).collect(),
            PriorKind::Uniform { .. } => vec![0.0; self.dim],
            PriorKind::Exponential { gamma } => vec![*gamma],
            PriorKind::Pushforward { base, map } => {
                let s = base.score(&map.apply(z))?;
                map.linear().transpose().matvec(&s)
            }
        })
    }

    /// `count` independent draws, deterministic in `seed`.
    pub fn sample(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(count, &mut rng)
    }

    fn sample_with(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        match &self.kind {
            PriorKind::Gaussian { sigma } => {
                let normal = Normal::new(0.0, *sigma).expect("positive sigma");
                (0..count)
                    .map(|_| (0..self.dim).map(|_| normal.sample(rng)).collect())
                    .collect()
            }
            PriorKind::Uniform { bounds } => (0..count)
                .map(|_| {
                    bounds
                        .iter()
                        .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                        .collect()
                })
                .collect(),
            PriorKind::Exponential { gamma } => {
                let exp = Exp::new(*gamma).expect("positive rate");
                (0..count).map(|_| vec![-exp.sample(rng)]).collect()
            }
            PriorKind::Pushforward { base, map } => {
                let inv = map.inverse().expect("map validated on construction");
                base.sample_with(count, rng).iter().map(|z| inv.apply(z)).collect()
            }
        }
    }

    /// Quadrature rule with `order` nodes per axis: Gauss-Hermite for
    /// Gaussian priors, Gauss-Legendre for boxes.
    pub fn quadrature(&self, order: usize) -> Result<QuadratureRule, ModelError> {
        match &self.kind {
            PriorKind::Gaussian { sigma } => Ok(gauss_hermite_rule(order, self.dim, *sigma)?),
            PriorKind::Uniform { bounds } => Ok(gauss_legendre_rule(order, bounds)?),
            PriorKind::Exponential { .. } => Err(ModelError::NoQuadrature(
                "the truncated exponential prior is integrated by Monte Carlo".into(),
            )),
            PriorKind::Pushforward { base, map } => {
                let inv = map.inverse()?;
                match base.kind {
                    PriorKind::Gaussian { sigma } => {
                        // z' = M⁻¹(z − c) ~ N(−M⁻¹c, σ² M⁻¹M⁻ᵀ); build the rule
                        // from the Cholesky factor of that covariance
                        let cov = inv.linear().matmul(&inv.linear().transpose()).scale(sigma * sigma);
                        let n = self.dim;
                        let l = cholesky(cov.as_slice(), n)?;
                        let lmat = Matrix::from_row_major(n, n, l)?;
                        let unit = gauss_hermite_rule(order, n, 1.0)?;
                        Ok(unit.affine_image(inv.shift(), &lmat))
                    }
                    _ => {
                        let rule = base.quadrature(order)?;
                        Ok(rule.affine_image(inv.shift(), inv.linear()))
                    }
                }
            }
        }
    }

    /// Central interval holding `mass` of a one-dimensional prior.
    pub fn central_interval(&self, mass: f64) -> Result<(f64, f64), ModelError> {
        if self.dim != 1 {
            return Err(ModelError::Dimension {
                expected: 1,
                got: self.dim,
            });
        }
        let tail = 0.5 * (1.0 - mass);
        Ok(match &self.kind {
            PriorKind::Gaussian { sigma } => {
                let q = normal_quantile(1.0 - tail);
                (-sigma * q, sigma * q)
            }
            PriorKind::Uniform { bounds } => {
                let (lo, hi) = bounds[0];
                (lo + tail * (hi - lo), hi - tail * (hi - lo))
            }
            PriorKind::Exponential { gamma } => (tail.ln() / gamma, (1.0 - tail).ln() / gamma),
            PriorKind::Pushforward { .. } => {
                return Err(ModelError::InvalidParameter(
                    "central interval of a pushforward prior".into(),
                ))
            }
        })
    }

    /// Prior CDF for one-dimensional priors.
    pub fn cdf(&self, z: f64) -> Result<f64, ModelError> {
        if self.dim != 1 {
            return Err(ModelError::Dimension {
                expected: 1,
                got: self.dim,
            });
        }
        Ok(match &self.kind {
            PriorKind::Gaussian { sigma } => normal_cdf(z / sigma),
            PriorKind::Uniform { bounds } => ((z - bounds[0].0) / (bounds[0].1 - bounds[0].0)).clamp(0.0, 1.0),
            PriorKind::Exponential { gamma } => (gamma * z.min(0.0)).exp(),
            PriorKind::Pushforward { .. } => {
                return Err(ModelError::InvalidParameter("cdf of a pushforward prior".into()))
            }
        })
    }

    /// Whether `z` lies in the region used for "constant over z" checks:
    /// within 3σ for Gaussians, anywhere on the support otherwise.
    pub fn in_core_region(&self, z: &[f64]) -> bool {
        match &self.kind {
            PriorKind::Gaussian { sigma } => z.iter().map(|v| v * v).sum::<f64>().sqrt() <= 3.0 * sigma,
            _ => self.contains(z),
        }
    }

    /// Draws `count` samples restricted to [`Self::in_core_region`].
    pub fn sample_core(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            for z in self.sample_with(count, &mut rng) {
                if out.len() < count && self.in_core_region(&z) {
                    out.push(z);
                }
            }
        }
        out
    }
}
