//! Closed-form optimum for a Gaussian data density with a Gaussian prior
//! and a linear embedding, plus subspace comparison helpers.
//!
//! With `Σ = Σ_i λ_i v_i v_iᵀ` (descending) and prior `N(0, σ0² I_d)`, the
//! maximizers are `A = Σ_{k≤d} (√λ_k / σ0) v_k q_kᵀ` for any orthogonal
//! gauge `Q`; they satisfy `ΣA = σ0² A AᵀA`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::Serialize;
use thiserror::Error;

use crate::numerics::{qr_thin, singular_values, sym_eigendecomp, Matrix, NumericsError};

/// Relative eigenvalue gap below which the top-d subspace is not unique.
pub const EIGEN_GAP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PcaError {
    #[error(
        "eigenvalues {lambda_d} and {lambda_next} tie at the cut d = {d}: the optimal subspace is not unique \
         and multiple solutions are expected"
    )]
    Degenerate { d: usize, lambda_d: f64, lambda_next: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaSolution {
    /// Optimal `D×d` linear map.
    pub a: Matrix,
    /// All eigenvalues of `Σ`, descending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors as columns, matching `eigenvalues`.
    pub eigenvectors: Matrix,
    pub sigma0: f64,
    pub gauge: Matrix,
    pub latent_dim: usize,
}

impl PcaSolution {
    /// Objective value at the optimum.
    pub fn optimal_objective(&self) -> f64 {
        optimal_objective(&self.eigenvalues, self.latent_dim)
    }

    /// Top-`d` eigenvector span as a `D×d` matrix.
    pub fn top_subspace(&self) -> Matrix {
        let cols: Vec<Vec<f64>> = (0..self.latent_dim).map(|k| self.eigenvectors.col(k)).collect();
        Matrix::from_columns(&cols).expect("consistent columns")
    }
}

/// Closed-form maximizer for covariance `sigma`, latent dimension `d`,
/// prior scale `sigma0` and gauge `q` (identity when absent).
pub fn closed_form_solution(
    sigma: &Matrix,
    d: usize,
    sigma0: f64,
    gauge: Option<&Matrix>,
) -> Result<PcaSolution, PcaError> {
    let big_d = sigma.rows();
    if sigma.cols() != big_d {
        return Err(PcaError::Invalid("covariance must be square".into()));
    }
    if d == 0 || d > big_d {
        return Err(PcaError::Invalid(format!("need 1 <= d <= D, got d = {d}, D = {big_d}")));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(PcaError::Invalid(format!("sigma0 must be positive, got {sigma0}")));
    }
    let eig = sym_eigendecomp(sigma)?;
    if !(eig.values[big_d - 1] > 0.0) {
        return Err(PcaError::Invalid("covariance is not positive definite".into()));
    }
    if d < big_d && eig.values[d - 1] - eig.values[d] <= EIGEN_GAP_TOL * eig.values[0] {
        return Err(PcaError::Degenerate {
            d,
            lambda_d: eig.values[d - 1],
            lambda_next: eig.values[d],
        });
    }
    let gauge = match gauge {
        Some(q) => {
            if q.shape() != (d, d) {
                return Err(PcaError::Invalid(format!("gauge must be {d}x{d}")));
            }
            let err = q.transpose().matmul(q).sub(&Matrix::identity(d)).max_abs();
            if err > 1e-10 {
                return Err(PcaError::Invalid(format!(
                    "gauge is not orthogonal (|QᵀQ − I| = {err:e})"
                )));
            }
            q.clone()
        }
        None => Matrix::identity(d),
    };
    let mut a = Matrix::zeros(big_d, d);
    for k in 0..d {
        let s = eig.values[k].sqrt() / sigma0;
        for i in 0..big_d {
            for j in 0..d {
                // A = Σ_k s_k v_k q_kᵀ, q_k = k-th row of the gauge
                a[(i, j)] += s * eig.vectors[(i, k)] * gauge[(k, j)];
            }
        }
    }
    Ok(PcaSolution {
        a,
        eigenvalues: eig.values,
        eigenvectors: eig.vectors,
        sigma0,
        gauge,
        latent_dim: d,
    })
}

/// φ-dependent part of the objective at the optimum:
/// `−d/2 + ½ Σ_k log(λ_k / σ0²)` over the given top eigenvalues.
pub fn optimal_phi_part(top: &[f64], sigma0: f64) -> f64 {
    -(top.len() as f64) / 2.0 + 0.5 * top.iter().map(|l| (l / (sigma0 * sigma0)).ln()).sum::<f64>()
}

/// Full objective at the optimum:
/// `−((D−d)/2) log 2π − ½ Σ_{i>d} log λ_i` (independent of σ0).
pub fn optimal_objective(eigenvalues: &[f64], d: usize) -> f64 {
    let big_d = eigenvalues.len();
    -((big_d - d) as f64) / 2.0 * (2.0 * PI).ln() - 0.5 * eigenvalues[d..].iter().map(|l| l.ln()).sum::<f64>()
}

/// `‖ΣA − σ0² A AᵀA‖_F / max(1, ‖ΣA‖_F)`.
pub fn fixed_point_residual(a: &Matrix, sigma: &Matrix, sigma0: f64) -> f64 {
    let sa = sigma.matmul(a);
    let rhs = a.matmul(&a.transpose()).matmul(a).scale(sigma0 * sigma0);
    sa.sub(&rhs).frobenius_norm() / sa.frobenius_norm().max(1.0)
}

/// Principal angles (ascending, radians) between the column spans of `a`
/// and `b`; the first `k` are returned.
pub fn principal_angles(a: &Matrix, b: &Matrix, k: usize) -> Result<Vec<f64>, PcaError> {
    if a.rows() != b.rows() {
        return Err(PcaError::Invalid("subspaces live in different ambient spaces".into()));
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let m = qa.transpose().matmul(&qb);
    let cosines = singular_values(&m);
    // sines from the part of span(b) outside span(a); accurate for small angles
    let resid = qb.sub(&qa.matmul(&m));
    let mut sines = singular_values(&resid);
    sines.reverse();
    let n = cosines.len().min(k);
    Ok((0..n)
        .map(|i| {
            let c = cosines[i].min(1.0);
            if c * c > 0.5 && i < sines.len() {
                sines[i].min(1.0).asin()
            } else {
                c.acos()
            }
        })
        .collect())
}

fn orthonormal_basis(m: &Matrix) -> Result<Matrix, PcaError> {
    let s = singular_values(m);
    let (hi, lo) = (s[0], *s.last().expect("non-empty"));
    if !(lo > 1e-12 * hi) {
        return Err(PcaError::Numerics(NumericsError::RankDeficient {
            condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        }));
    }
    Ok(qr_thin(m)?.0)
}

/// Comparison of a fitted linear map against the closed form.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PcaComparison {
    pub principal_angles: Vec<f64>,
    pub max_principal_angle: f64,
    /// `|σ0 s_k − √λ_k| / √λ_k` per top component.
    pub singular_value_rel_errors: Vec<f64>,
    pub fixed_point_residual: f64,
}

pub fn compare_fit(fitted: &Matrix, solution: &PcaSolution, sigma: &Matrix) -> Result<PcaComparison, PcaError> {
    let d = solution.latent_dim;
    let angles = principal_angles(fitted, &solution.top_subspace(), d)?;
    let sv = singular_values(fitted);
    let rel = (0..d)
        .map(|k| {
            let want = solution.eigenvalues[k].sqrt();
            (solution.sigma0 * sv[k] - want).abs() / want
        })
        .collect();
    Ok(PcaComparison {
        max_principal_angle: angles.iter().copied().fold(0.0, f64::max),
        principal_angles: angles,
        singular_value_rel_errors: rel,
        fixed_point_residual: fixed_point_residual(fitted, sigma, solution.sigma0),
    })
}

/// Seeded SPD matrix with a random orthogonal eigenbasis and distinct
/// eigenvalues spread log-uniformly over `[0.5, 10]` with ±10% jitter.
pub fn seeded_spd(dim: usize, seed: u64) -> Result<Matrix, PcaError> {
    if dim == 0 {
        return Err(PcaError::Invalid("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let g = Matrix::from_row_major(dim, dim, (0..dim * dim).map(|_| normal.sample(&mut rng)).collect())?;
    let (q, _) = qr_thin(&g)?;
    let jitter = Uniform::new_inclusive(0.9, 1.1).expect("valid range");
    let (hi, lo) = (10f64.ln(), 0.5f64.ln());
    let values: Vec<f64> = (0..dim)
        .map(|k| {
            let t = if dim == 1 { 0.0 } else { k as f64 / (dim - 1) as f64 };
            (hi + (lo - hi) * t).exp() * jitter.sample(&mut rng)
        })
        .collect();
    let m = q.matmul(&Matrix::diag(&values)).matmul(&q.transpose());
    // exact symmetry
    Ok(m.add(&m.transpose()).scale(0.5))
}
