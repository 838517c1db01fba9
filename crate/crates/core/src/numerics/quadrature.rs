//! Probability-normalized quadrature rules.
//!
//! Every rule integrates against a probability measure, so its weights sum
//! to one. One-dimensional Gauss-Hermite and Gauss-Legendre nodes come from
//! Newton iteration on the three-term recurrences; higher dimensions use
//! tensor products.

use serde::{Deserialize, Serialize};

use super::{Matrix, NumericsError};

/// Largest per-axis order accepted by the Gaussian rules.
pub const MAX_ORDER: usize = 64;
/// Largest latent dimension for tensor-product rules.
pub const MAX_TENSOR_DIM: usize = 3;

/// Nodes and nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    dim: usize,
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Assembles a rule, checking the probability normalization.
    pub fn new(nodes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self, NumericsError> {
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(NumericsError::Shape(format!(
                "rule needs matching non-empty nodes/weights, got {} and {}",
                nodes.len(),
                weights.len()
            )));
        }
        let dim = nodes[0].len();
        if nodes.iter().any(|n| n.len() != dim) {
            return Err(NumericsError::Shape("nodes have mixed dimensions".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(NumericsError::NonFinite("negative or NaN weight".into()));
        }
        let total = super::pairwise_sum(&weights);
        if (total - 1.0).abs() > 1e-12 {
            return Err(NumericsError::Shape(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { dim, nodes, weights })
    }

    /// Equal-weight rule over the given samples (Monte Carlo).
    pub fn equal_weights(samples: Vec<Vec<f64>>) -> Result<Self, NumericsError> {
        let n = samples.len();
        if n == 0 {
            return Err(NumericsError::Shape("no samples".into()));
        }
        let w = 1.0 / n as f64;
        let dim = samples[0].len();
        Ok(Self {
            dim,
            nodes: samples,
            weights: vec![w; n],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ_k w_k f(z_k)` with pairwise summation.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let terms: Vec<f64> = self.nodes.iter().zip(&self.weights).map(|(z, w)| w * f(z)).collect();
        super::pairwise_sum(&terms)
    }

    /// Maps every node through `z ↦ shift + L z`; weights are unchanged.
    pub fn affine_image(&self, shift: &[f64], linear: &Matrix) -> QuadratureRule {
        let nodes = self
            .nodes
            .iter()
            .map(|z| linear.matvec(z).iter().zip(shift).map(|(a, b)| a + b).collect())
            .collect();
        QuadratureRule {
            dim: linear.rows(),
            nodes,
            weights: self.weights.clone(),
        }
    }
}

/// One-dimensional Gauss-Hermite rule for `N(0, 1)`: returns (nodes, weights).
pub fn gauss_hermite_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    if n == 0 || n > MAX_ORDER {
        return Err(NumericsError::Shape(format!(
            "Gauss-Hermite order must be in 1..={MAX_ORDER}, got {n}"
        )));
    }
    // physicists' rule for e^{-x²} on orthonormal Hermite functions
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut nodes: Vec<f64> = x.iter().map(|v| v * std::f64::consts::SQRT_2).collect();
    let mut weights: Vec<f64> = w.iter().map(|v| v / sqrt_pi).collect();
    // ascending order, and renormalize the last ulp of drift
    nodes.reverse();
    weights.reverse();
    let total = super::pairwise_sum(&weights);
    for v in &mut weights {
        *v /= total;
    }
    Ok((nodes, weights))
}

/// One-dimensional Gauss-Legendre rule for the uniform distribution on
/// `[lo, hi]`.
pub fn gauss_legendre_1d(n: usize, lo: f64, hi: f64) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    if n == 0 || n > 256 {
        return Err(NumericsError::Shape(format!(
            "Gauss-Legendre order must be in 1..=256, got {n}"
        )));
    }
    if !(hi > lo) {
        return Err(NumericsError::Shape(format!("empty interval [{lo}, {hi}]")));
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let xm = 0.5 * (hi + lo);
    let xl = 0.5 * (hi - lo);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = xm - xl * z;
        x[n - 1 - i] = xm + xl * z;
        w[i] = 2.0 * xl / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = xm;
    }
    let total = super::pairwise_sum(&w);
    for v in &mut w {
        *v /= total;
    }
    Ok((x, w))
}

/// Tensor product of one-dimensional rules.
pub fn tensor_product(axes: &[(Vec<f64>, Vec<f64>)]) -> Result<QuadratureRule, NumericsError> {
    let mut nodes: Vec<Vec<f64>> = vec![Vec::new()];
    let mut weights = vec![1.0];
    for (xs, ws) in axes {
        let mut next_nodes = Vec::with_capacity(nodes.len() * xs.len());
        let mut next_weights = Vec::with_capacity(nodes.len() * xs.len());
        for (node, w) in nodes.iter().zip(&weights) {
            for (x, wx) in xs.iter().zip(ws) {
                let mut n = node.clone();
                n.push(*x);
                next_nodes.push(n);
                next_weights.push(w * wx);
            }
        }
        nodes = next_nodes;
        weights = next_weights;
    }
    QuadratureRule::new(nodes, weights)
}

/// Tensor Gauss-Hermite rule for `N(0, σ0² I_dim)`, exact for polynomials of
/// degree `2n − 1` in each coordinate.
pub fn gauss_hermite_rule(n: usize, dim: usize, sigma0: f64) -> Result<QuadratureRule, NumericsError> {
    if dim == 0 {
        return Err(NumericsError::Shape("dimension must be at least 1".into()));
    }
    if dim > MAX_TENSOR_DIM {
        return Err(NumericsError::DimensionTooLarge {
            dim,
            max: MAX_TENSOR_DIM,
            hint: "use the Monte Carlo integration scheme for higher latent dimensions",
        });
    }
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(NumericsError::Shape(format!("sigma0 must be positive, got {sigma0}")));
    }
    let (x, w) = gauss_hermite_1d(n)?;
    let x: Vec<f64> = x.iter().map(|v| v * sigma0).collect();
    tensor_product(&vec![(x, w); dim])
}

/// Tensor Gauss-Legendre rule for the uniform distribution on a box.
pub fn gauss_legendre_rule(n: usize, bounds: &[(f64, f64)]) -> Result<QuadratureRule, NumericsError> {
    if bounds.is_empty() {
        return Err(NumericsError::Shape("dimension must be at least 1".into()));
    }
    if bounds.len() > MAX_TENSOR_DIM {
        return Err(NumericsError::DimensionTooLarge {
            dim: bounds.len(),
            max: MAX_TENSOR_DIM,
            hint: "use the Monte Carlo integration scheme for higher latent dimensions",
        });
    }
    let axes = bounds
        .iter()
        .map(|&(lo, hi)| gauss_legendre_1d(n, lo, hi))
        .collect::<Result<Vec<_>, _>>()?;
    tensor_product(&axes)
}
