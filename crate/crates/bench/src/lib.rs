//! Shared fixtures for the benchmarks.

use varembed_core::embedding::Family;
use varembed_core::{DensityModel, EmbeddingModel, Matrix, PriorModel};

/// Two-component planar mixture, standard normal prior and a small
/// perceptron.
pub fn mixture_instance() -> (EmbeddingModel, PriorModel, DensityModel) {
    let density = DensityModel::mixture(vec![vec![-1.0, 0.0], vec![1.0, 0.5]], 0.5).expect("valid mixture");
    let prior = PriorModel::gaussian(1, 1.0).expect("valid prior");
    let emb = EmbeddingModel::random(Family::Perceptron { hidden: vec![16, 16] }, 1, 2, &[0.0, 0.0], 1)
        .expect("valid embedding");
    (emb, prior, density)
}

/// Anisotropic planar Gaussian with a linear embedding.
pub fn gaussian_instance() -> (EmbeddingModel, PriorModel, DensityModel) {
    let density = DensityModel::gaussian(vec![0.0, 0.0], &Matrix::diag(&[4.0, 1.0])).expect("valid density");
    let prior = PriorModel::gaussian(1, 1.0).expect("valid prior");
    let emb = EmbeddingModel::random(Family::Linear, 1, 2, &[0.0, 0.0], 1).expect("valid embedding");
    (emb, prior, density)
}
