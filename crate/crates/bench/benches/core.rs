use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use varembed_bench::{gaussian_instance, mixture_instance};
use varembed_core::objective::{estimate_objective, IntegrationScheme};
use varembed_core::optimizer::{optimize, Method};
use varembed_core::variational::el_residual;
use varembed_core::{OptimizeConfig, PriorModel};

fn objective(c: &mut Criterion) {
    let (emb, prior, density) = mixture_instance();
    let mut group = c.benchmark_group("objective");
    for order in [16usize, 64] {
        let scheme = IntegrationScheme::Quadrature { order };
        group.bench_with_input(BenchmarkId::new("value", order), &scheme, |b, s| {
            b.iter(|| estimate_objective(black_box(&emb), &prior, &density, s, false).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("value_and_gradient", order), &scheme, |b, s| {
            b.iter(|| estimate_objective(black_box(&emb), &prior, &density, s, true).unwrap())
        });
    }
    group.finish();
}

fn optimizer_steps(c: &mut Criterion) {
    let (emb, prior, density) = gaussian_instance();
    let scheme = IntegrationScheme::Quadrature { order: 16 };
    let config = OptimizeConfig {
        method: Method::Adam,
        max_iterations: 50,
        tail_iterations: 0,
        ..OptimizeConfig::default()
    };
    c.bench_function("optimize/adam_50_steps_linear", |b| {
        b.iter(|| optimize(black_box(&emb), &prior, &density, &scheme, None, &config).unwrap())
    });
}

fn quadrature(c: &mut Criterion) {
    let mut group = c.benchmark_group("quadrature");
    for (dim, order) in [(1usize, 64usize), (2, 16), (3, 8)] {
        let prior = PriorModel::gaussian(dim, 1.0).unwrap();
        group.bench_with_input(
            BenchmarkId::new("gauss_hermite_rule", format!("d{dim}_n{order}")),
            &order,
            |b, &n| b.iter(|| prior.quadrature(black_box(n)).unwrap()),
        );
    }
    group.finish();
}

fn euler_lagrange(c: &mut Criterion) {
    let (emb, prior, density) = mixture_instance();
    c.bench_function("el_residual/perceptron_16x16", |b| {
        b.iter(|| el_residual(black_box(&emb), &prior, &density, &[0.3], None).unwrap())
    });
}

criterion_group!(benches, objective, optimizer_steps, quadrature, euler_lagrange);
criterion_main!(benches);
