use childgrad::special::chi2_quantile;
use childgrad::theory::{
    escape_rho_bound, generalization_bound, sharpness_power_iteration, BoundInputs,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn quantile_round_trips_an_independent_cdf() {
    for k in [1usize, 2, 3, 5, 10, 30, 100, 400] {
        let dist = ChiSquared::new(k as f64).unwrap();
        let kf = k as f64;
        for i in 0..40 {
            let x = kf * (0.05 + 0.1 * i as f64);
            let q = dist.cdf(x);
            if !(1e-6..=1.0 - 1e-6).contains(&q) {
                continue;
            }
            let back = chi2_quantile(k, q).unwrap();
            assert!((back - x).abs() <= 1e-8 * x.max(1.0), "k={k} x={x}: {back}");
        }
    }
}

/// CDF of χ²(1) by Simpson's rule after the substitution t = u², which
/// removes the singularity at 0: F(x) = 2∫₀^√x φ(u) du.
fn chi2_1_cdf_by_quadrature(x: f64) -> f64 {
    let b = x.sqrt();
    let n = 2000;
    let h = b / n as f64;
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(0.0) + phi(b);
    for i in 1..n {
        s += phi(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    2.0 * s * h / 3.0
}

#[test]
fn median_of_one_degree_of_freedom() {
    let (mut lo, mut hi) = (0.0, 5.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if chi2_1_cdf_by_quadrature(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    let q = chi2_quantile(1, 0.5).unwrap();
    assert!((q - oracle).abs() < 1e-8, "{q} vs quadrature {oracle}");
    assert!((q - 0.45494).abs() < 1e-4);
}

fn base(k: usize, dist: f64) -> BoundInputs {
    let c = dist / (k as f64).sqrt();
    BoundInputs {
        epsilon: 0.5,
        delta: 0.05,
        k,
        sigma2: 1.0,
        sigma0_2: 1.0,
        w: vec![c; k],
        w0: vec![0.0; k],
        sample_count: 500,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn escape_and_bound_strictly_decrease_in_variance(
        k in 1usize..50,
        frac in 0.0f64..0.9,
        start in 1e-4f64..1.0,
        ratio in 1.05f64..3.0,
    ) {
        let inputs = base(k, (frac * k as f64).sqrt());
        let grid: Vec<f64> = (0..10).map(|i| start * ratio.powi(i)).collect();
        let at = |s2: f64| BoundInputs { sigma2: s2, ..inputs.clone() };
        for w in grid.windows(2) {
            prop_assert!(escape_rho_bound(&at(w[1])).unwrap() < escape_rho_bound(&at(w[0])).unwrap());
            prop_assert!(
                generalization_bound(&at(w[1])).unwrap().total()
                    < generalization_bound(&at(w[0])).unwrap().total()
            );
        }
    }

    #[test]
    fn remainder_shrinks_with_sample_count(k in 1usize..50, frac in 0.0f64..0.9) {
        let inputs = base(k, (frac * k as f64).sqrt());
        let r = |s: usize| generalization_bound(&BoundInputs { sample_count: s, ..inputs.clone() }).unwrap().remainder;
        let mut s = 4;
        while s < 1 << 20 {
            prop_assert!(r(2 * s) < r(s));
            s *= 2;
        }
    }

    #[test]
    fn power_iteration_finds_the_top_eigenvalue_of_rotated_quadratics(
        seed in any::<u64>(),
        n in 2usize..12,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut eig: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        eig[0] = 3.0;
        let a = rotated_diagonal(&eig, &mut rng);
        let grad = |w: &[f64]| -> childgrad::Result<Vec<f64>> {
            Ok((0..n).map(|i| (0..n).map(|j| a[i][j] * w[j]).sum()).collect())
        };
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rho = sharpness_power_iteration(grad, &w, 100, seed).unwrap();
        prop_assert!((rho - 3.0).abs() <= 3e-3, "{}", rho);
    }
}

/// `Q diag(eig) Qᵀ` with `Q` a product of random Givens rotations.
fn rotated_diagonal(eig: &[f64], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = eig.len();
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _ in 0..3 * n {
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (c, s) = (th.cos(), th.sin());
        for row in q.iter_mut() {
            let (a, b) = (row[i], row[j]);
            row[i] = c * a - s * b;
            row[j] = s * a + c * b;
        }
    }
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| q[i][k] * eig[k] * q[j][k]).sum())
                .collect()
        })
        .collect()
}

#[test]
fn power_iteration_ignores_the_start_vector() {
    let grad = |w: &[f64]| -> childgrad::Result<Vec<f64>> { Ok(vec![w[0], 3.0 * w[1]]) };
    let estimates: Vec<f64> = (0..5)
        .map(|s| sharpness_power_iteration(grad, &[0.3, -0.7], 50, s).unwrap())
        .collect();
    for e in &estimates {
        assert!((e - 3.0).abs() <= 3e-3, "{e}");
        assert!((e - estimates[0]).abs() <= 1e-3);
    }
}
