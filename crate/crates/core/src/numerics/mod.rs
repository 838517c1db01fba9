//! Dense linear algebra, quadrature, reductions and differentiation.

mod affine;
mod linalg;
mod matrix;
mod quadrature;
mod tape;

pub use affine::AffineMap;
pub use linalg::{
    cholesky, determinant, gram_of, half_logdet_gram, half_logdet_gram_of, inverse, pseudoinverse, qr_thin,
    singular_values, spd_inverse, spd_logdet, sym_eigendecomp, SymEigen, GRAM_RATIO_FLOOR, MAX_EIGEN_SIZE,
    PINV_RATIO_FLOOR,
};
pub use matrix::Matrix;
pub use quadrature::{
    gauss_hermite_1d, gauss_hermite_rule, gauss_legendre_1d, gauss_legendre_rule, tensor_product, QuadratureRule,
    MAX_ORDER, MAX_TENSOR_DIM,
};
pub use tape::{Real, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("matrix is not symmetric (max |M_ij - M_ji| = {max_asymmetry:e})")]
    NotSymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive definite (smallest Gram eigenvalue {smallest_eigenvalue:e})")]
    NotPositiveDefinite { smallest_eigenvalue: f64 },
    #[error("matrix is rank deficient (condition estimate {condition:e}); Euler-Lagrange terms are undefined here")]
    RankDeficient { condition: f64 },
    #[error("matrix is singular")]
    Singular,
    #[error("latent dimension {dim} exceeds tensor quadrature limit {max}: {hint}")]
    DimensionTooLarge { dim: usize, max: usize, hint: &'static str },
    #[error("output is not traceable to the parameters: {0}")]
    NotTraceable(String),
}

const PAIRWISE_BLOCK: usize = 8;

/// Pairwise (cascade) summation: blocks of eight are added left to right,
/// then halves are combined recursively. The order depends only on the
/// length, so results are reproducible bit for bit.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().fold(0.0, |a, b| a + b);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Componentwise pairwise sum of equally long vectors.
pub fn pairwise_sum_vectors(rows: &[Vec<f64>]) -> Vec<f64> {
    match rows.len() {
        0 => Vec::new(),
        n if n <= PAIRWISE_BLOCK => {
            let mut acc = vec![0.0; rows[0].len()];
            for r in rows {
                for (a, b) in acc.iter_mut().zip(r) {
                    *a += b;
                }
            }
            acc
        }
        n => {
            let mid = n / 2;
            let mut left = pairwise_sum_vectors(&rows[..mid]);
            let right = pairwise_sum_vectors(&rows[mid..]);
            for (a, b) in left.iter_mut().zip(&right) {
                *a += b;
            }
            left
        }
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central-difference gradient of `f` at `x` with per-coordinate step `h`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
