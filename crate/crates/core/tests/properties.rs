//! Invariants checked against independent oracles: finite differences,
//! closed-form moments and the PCA solution.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varembed_core::embedding::{Basis, Family};
use varembed_core::numerics::{half_logdet_gram, pseudoinverse, qr_thin};
use varembed_core::objective::{check_reparameterization_invariance, estimate_objective, IntegrationScheme};
use varembed_core::pca::{closed_form_solution, optimal_objective};
use varembed_core::variational::el_residual;
use varembed_core::{AffineMap, DensityModel, EmbeddingModel, Matrix, PriorModel};

fn families() -> Vec<Family> {
    vec![
        Family::Linear,
        Family::Perceptron { hidden: vec![5, 3] },
        Family::Basis1d {
            basis: Basis::Hermite { scale: 1.0 },
            degree: 3,
        },
        Family::Basis1d {
            basis: Basis::Monomial,
            degree: 2,
        },
    ]
}

fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    qr_thin(&Matrix::from_row_major(n, n, data).unwrap()).unwrap().0
}

/// SPD matrix with eigenvalues spaced at least 0.2 apart.
fn random_spd(n: usize, seed: u64) -> Matrix {
    let q = random_orthogonal(n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let mut eig: Vec<f64> = (0..n)
        .map(|k| 0.3 + 0.7 * k as f64 + rng.random_range(0.0..0.5))
        .collect();
    eig.reverse();
    let m = q.matmul(&Matrix::diag(&eig)).matmul(&q.transpose());
    m.add(&m.transpose()).scale(0.5)
}

fn fd_derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (4.0 * (f(x + h / 2.0) - f(x - h / 2.0)) / h - (f(x + h) - f(x - h)) / (2.0 * h)) / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn density_scores_match_finite_differences(x in -2.5f64..2.5, y in -2.5f64..2.5, which in 0usize..4) {
        let density = match which {
            0 => DensityModel::gaussian(vec![0.3, -0.2], &Matrix::from_rows(&[vec![2.0, 0.4], vec![0.4, 1.0]]).unwrap()),
            1 => DensityModel::mixture(vec![vec![-1.0, 0.0], vec![1.0, 1.0], vec![0.0, -1.5]], 0.6),
            2 => DensityModel::ring(vec![0.0, 0.0], 1.2, 0.4),
            _ => DensityModel::smoothed_ball(vec![0.0, 0.0], 1.5, Some(4.0)),
        }
        .unwrap();
        let s = density.score(&[x, y]).unwrap();
        let fx = fd_derivative(|t| density.log_density(&[t, y]).unwrap(), x, 1e-3);
        let fy = fd_derivative(|t| density.log_density(&[x, t]).unwrap(), y, 1e-3);
        let scale = 1.0 + s[0].abs().max(s[1].abs());
        prop_assert!((s[0] - fx).abs() < 1e-6 * scale, "{} vs {}", s[0], fx);
        prop_assert!((s[1] - fy).abs() < 1e-6 * scale, "{} vs {}", s[1], fy);
    }

    #[test]
    fn latent_jacobian_matches_finite_differences(seed in 0u64..1000, z in -1.5f64..1.5, k in 0usize..4) {
        let family = families()[k].clone();
        let emb = EmbeddingModel::random(family, 1, 3, &[0.1, -0.2, 0.3], seed).unwrap();
        let jac = emb.jacobian(&[z]);
        for i in 0..3 {
            let fd = fd_derivative(|t| emb.eval(&[t])[i], z, 1e-3);
            prop_assert!((jac.row(i)[0] - fd).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn parameter_blocks_round_trip(seed in 0u64..1000, k in 0usize..4) {
        let family = families()[k].clone();
        let emb = EmbeddingModel::random(family, 1, 2, &[0.0, 0.0], seed).unwrap();
        let theta = emb.flatten(&emb.unflatten()).unwrap();
        prop_assert_eq!(theta.as_slice(), emb.theta());
        let again = emb.with_theta(theta).unwrap();
        prop_assert_eq!(again.eval(&[0.4]), emb.eval(&[0.4]));
    }

    #[test]
    fn half_logdet_is_invariant_under_orthogonal_actions(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let j = Matrix::from_row_major(4, 2, data).unwrap();
        let base = half_logdet_gram(&j).unwrap();
        let right = half_logdet_gram(&j.matmul(&random_orthogonal(2, seed + 1))).unwrap();
        let left = half_logdet_gram(&random_orthogonal(4, seed + 2).matmul(&j)).unwrap();
        prop_assert!((base - right).abs() < 1e-10 && (base - left).abs() < 1e-10);
    }

    #[test]
    fn pseudoinverse_is_a_left_inverse(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let j = Matrix::from_row_major(5, 3, data).unwrap();
        let p = pseudoinverse(&j).unwrap();
        let err = p.matmul(&j).sub(&Matrix::identity(3)).max_abs();
        prop_assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn objective_is_invariant_under_latent_affine_maps(seed in 0u64..1000, a in 0.3f64..2.5, b in -1.0f64..1.0, flip in any::<bool>()) {
        let density = DensityModel::gaussian(vec![0.0, 0.0], &Matrix::diag(&[4.0, 1.0])).unwrap();
        let prior = PriorModel::gaussian(1, 1.0).unwrap();
        let emb = EmbeddingModel::random(Family::Linear, 1, 2, &[0.0, 0.0], seed).unwrap();
        let g = AffineMap::new(Matrix::diag(&[if flip { -a } else { a }]), vec![b]).unwrap();
        let c = check_reparameterization_invariance(&emb, &prior, &density, &g, &IntegrationScheme::Quadrature { order: 16 }).unwrap();
        prop_assert!(c.difference < 1e-10, "{}", c.difference);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn parameter_gradient_matches_richardson_differences(seed in 0u64..1000, k in 0usize..4) {
        let family = families()[k].clone();
        let density = DensityModel::mixture(vec![vec![-1.0, 0.0], vec![1.0, 0.5]], 0.7).unwrap();
        let prior = PriorModel::gaussian(1, 1.0).unwrap();
        let scheme = IntegrationScheme::Quadrature { order: 10 };
        let emb = EmbeddingModel::random(family, 1, 2, &[0.0, 0.0], seed).unwrap();
        let g = estimate_objective(&emb, &prior, &density, &scheme, true).unwrap().gradient.unwrap();
        let theta = emb.theta().to_vec();
        let j = |t: Vec<f64>| estimate_objective(&emb.with_theta(t).unwrap(), &prior, &density, &scheme, false).unwrap().value;
        for (i, gi) in g.iter().enumerate() {
            let fd = fd_derivative(
                |x| {
                    let mut t = theta.clone();
                    t[i] = x;
                    j(t)
                },
                theta[i],
                1e-4,
            );
            prop_assert!((gi - fd).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {gi} vs {fd}");
        }
    }

    #[test]
    fn euler_lagrange_residual_vanishes_at_the_closed_form(seed in 0u64..1000, big_d in 2usize..5, sigma0 in 0.5f64..2.0) {
        let d = 1 + (seed as usize) % (big_d - 1);
        let sigma = random_spd(big_d, seed);
        let sol = closed_form_solution(&sigma, d, sigma0, None).unwrap();
        let emb = EmbeddingModel::linear(&sol.a, &vec![0.0; big_d]).unwrap();
        let prior = PriorModel::gaussian(d, sigma0).unwrap();
        let density = DensityModel::gaussian(vec![0.0; big_d], &sigma).unwrap();
        for z in prior.sample_core(5, seed) {
            let r = el_residual(&emb, &prior, &density, &z, None).unwrap();
            prop_assert!(r.relative < 1e-6, "{}", r.relative);
        }
    }

    #[test]
    fn pca_objective_does_not_depend_on_the_gauge(seed in 0u64..1000) {
        let sigma = random_spd(3, seed);
        let prior = PriorModel::gaussian(2, 1.0).unwrap();
        let density = DensityModel::gaussian(vec![0.0; 3], &sigma).unwrap();
        let scheme = IntegrationScheme::Quadrature { order: 8 };
        let plain = closed_form_solution(&sigma, 2, 1.0, None).unwrap();
        let q = random_orthogonal(2, seed + 7);
        let rotated = closed_form_solution(&sigma, 2, 1.0, Some(&q)).unwrap();
        let j = |a: &Matrix| {
            let e = EmbeddingModel::linear(a, &[0.0; 3]).unwrap();
            estimate_objective(&e, &prior, &density, &scheme, false).unwrap().value
        };
        let (j0, j1) = (j(&plain.a), j(&rotated.a));
        prop_assert!((j0 - j1).abs() < 1e-10);
        prop_assert!((j0 - optimal_objective(&plain.eigenvalues, 2)).abs() < 1e-9);
    }
}

#[test]
fn gaussian_quadrature_reproduces_moments() {
    let prior = PriorModel::gaussian(1, 1.5).unwrap();
    let rule = prior.quadrature(12).unwrap();
    let s2 = 1.5f64 * 1.5;
    assert!((rule.integrate(|_| 1.0) - 1.0).abs() < 1e-13);
    assert!((rule.integrate(|z| z[0] * z[0]) - s2).abs() < 1e-12);
    assert!((rule.integrate(|z| z[0].powi(4)) - 3.0 * s2 * s2).abs() < 1e-11);
    assert!((rule.integrate(|z| z[0].powi(6)) - 15.0 * s2.powi(3)).abs() < 1e-10);
}

#[test]
fn refining_quadrature_settles_the_objective() {
    let density = DensityModel::mixture(vec![vec![-1.0, 0.0], vec![1.0, 0.5]], 0.7).unwrap();
    let prior = PriorModel::gaussian(1, 1.0).unwrap();
    let emb = EmbeddingModel::random(Family::Perceptron { hidden: vec![6] }, 1, 2, &[0.0, 0.0], 3).unwrap();
    let j = |order| {
        estimate_objective(&emb, &prior, &density, &IntegrationScheme::Quadrature { order }, false)
            .unwrap()
            .value
    };
    let (a, b, c) = (j(16), j(32), j(64));
    assert!((c - b).abs() < 0.25 * (b - a).abs(), "{a} {b} {c}");
    assert!((c - b).abs() < 1e-4, "{a} {b} {c}");
}

#[test]
fn monte_carlo_error_shrinks_like_inverse_square_root() {
    let density = DensityModel::gaussian(vec![0.0, 0.0], &Matrix::diag(&[4.0, 1.0])).unwrap();
    let prior = PriorModel::gaussian(1, 1.0).unwrap();
    let emb = EmbeddingModel::random(Family::Linear, 1, 2, &[0.0, 0.0], 5).unwrap();
    let exact = estimate_objective(
        &emb,
        &prior,
        &density,
        &IntegrationScheme::Quadrature { order: 16 },
        false,
    )
    .unwrap()
    .value;
    let est = |samples| {
        estimate_objective(
            &emb,
            &prior,
            &density,
            &IntegrationScheme::MonteCarlo { samples, seed: 1 },
            false,
        )
        .unwrap()
    };
    let small = est(1000);
    let large = est(16000);
    let (s0, s1) = (small.stderr.unwrap(), large.stderr.unwrap());
    let ratio = s0 / s1;
    assert!((3.0..5.0).contains(&ratio), "stderr ratio {ratio}");
    assert!((large.value - exact).abs() < 5.0 * s1);
}

#[test]
fn matched_full_dimensional_maps_never_beat_zero() {
    // d = D: J is minus a KL divergence
    let density = DensityModel::gaussian(vec![0.0, 0.0], &Matrix::identity(2)).unwrap();
    let prior = PriorModel::gaussian(2, 1.0).unwrap();
    for seed in 0..20 {
        let emb = EmbeddingModel::random(Family::Linear, 2, 2, &[0.0, 0.0], seed).unwrap();
        let j = estimate_objective(
            &emb,
            &prior,
            &density,
            &IntegrationScheme::Quadrature { order: 8 },
            false,
        )
        .unwrap()
        .value;
        assert!(j <= 1e-12, "seed {seed}: {j}");
    }
}
