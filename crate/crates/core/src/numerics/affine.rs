//! Invertible affine maps `z ↦ M z + c` on latent space.

use serde::{Deserialize, Serialize};

use super::{determinant, inverse, Matrix, NumericsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    linear: Matrix,
    shift: Vec<f64>,
}

impl AffineMap {
    /// Fails when `M` is not square, shapes disagree, or `|det M| ≤ 1e-10`.
    pub fn new(linear: Matrix, shift: Vec<f64>) -> Result<Self, NumericsError> {
        let (r, c) = linear.shape();
        if r != c || r != shift.len() {
            return Err(NumericsError::Shape(format!(
                "affine map needs a square linear part matching the shift, got {r}x{c} and {}",
                shift.len()
            )));
        }
        if !(determinant(&linear).abs() > 1e-10) {
            return Err(NumericsError::Singular);
        }
        Ok(Self { linear, shift })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            linear: Matrix::identity(dim),
            shift: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn linear(&self) -> &Matrix {
        &self.linear
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.linear
            .matvec(z)
            .iter()
            .zip(&self.shift)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn log_abs_det(&self) -> f64 {
        determinant(&self.linear).abs().ln()
    }

    pub fn inverse(&self) -> Result<AffineMap, NumericsError> {
        let inv = inverse(&self.linear)?;
        let shift = inv.matvec(&self.shift).iter().map(|v| -v).collect();
        Ok(AffineMap { linear: inv, shift })
    }

    pub fn is_identity(&self) -> bool {
        self.linear == Matrix::identity(self.dim()) && self.shift.iter().all(|v| *v == 0.0)
    }
}
