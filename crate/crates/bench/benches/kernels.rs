use childgrad::special::chi2_quantile;
use childgrad::{
    child_tuning_adam_step, empirical_fisher_diag, forward_backward, AdamState, GradMask,
    OptimConfig,
};
use childgrad_bench::moons_fixture;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn forward_backward_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_backward");
    for width in [16, 64, 256] {
        let (model, params, data) = moons_fixture(&[width, width], 32);
        g.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| {
            b.iter(|| forward_backward(model.train_graph(), black_box(&params), &data).unwrap())
        });
    }
    g.finish();
}

fn fisher_bench(c: &mut Criterion) {
    let (model, params, data) = moons_fixture(&[32, 32], 200);
    c.bench_function("empirical_fisher_diag/200x32x32", |b| {
        b.iter(|| empirical_fisher_diag(&model, black_box(&params), &data).unwrap())
    });
}

fn adam_bench(c: &mut Criterion) {
    let n = 100_000;
    let grads: Vec<f64> = (0..n).map(|i| ((i % 17) as f64 - 8.0) * 1e-3).collect();
    let scales: Vec<f64> = (0..n).map(|i| f64::from(u8::from(i % 3 == 0))).collect();
    let mask = GradMask::custom(scales).unwrap();
    let config = OptimConfig {
        weight_decay: 0.01,
        total_steps: 1000,
        ..OptimConfig::default()
    };
    let mut params = vec![0.5; n];
    let mut state = AdamState::new(n);
    c.bench_function("child_tuning_adam_step/1e5", |b| {
        b.iter(|| {
            child_tuning_adam_step(
                &mut params,
                black_box(&grads),
                &mask,
                &mut state,
                &config,
                1e-3,
            )
            .unwrap()
        })
    });
}

fn chi2_bench(c: &mut Criterion) {
    let mut g = c.benchmark_group("chi2_quantile");
    for k in [1usize, 10, 1000] {
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| {
            b.iter(|| chi2_quantile(black_box(k), 0.95).unwrap())
        });
    }
    g.finish();
}

criterion_group!(
    benches,
    forward_backward_bench,
    fisher_bench,
    adam_bench,
    chi2_bench
);
criterion_main!(benches);
