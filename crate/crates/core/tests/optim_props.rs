use childgrad::{child_tuning_adam_step, AdamState, GradMask, OptimConfig};
use proptest::prelude::*;

/// Textbook Adam with bias correction, written independently of the crate.
struct PlainAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl PlainAdam {
    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
        self.t += 1;
        for i in 0..w.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

fn grad_seq(n: usize, steps: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, n), steps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn all_ones_mask_matches_plain_adam(
        (w0, grads) in (1usize..20).prop_flat_map(|n| (prop::collection::vec(-1.0f64..1.0, n), grad_seq(n, 30))),
        lr in 1e-4f64..0.1,
    ) {
        let n = w0.len();
        let config = OptimConfig { total_steps: 30, ..OptimConfig::default() };
        let ones = GradMask::ones(n);
        let (mut w, mut state) = (w0.clone(), AdamState::new(n));
        let (mut r, mut plain) = (w0, PlainAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0 });
        for g in &grads {
            child_tuning_adam_step(&mut w, g, &ones, &mut state, &config, lr).unwrap();
            plain.step(&mut r, g, lr, config.beta1, config.beta2, config.eps);
        }
        for (a, b) in w.iter().zip(&r) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn frozen_coordinates_keep_zero_moments_and_w0(
        (w0, grads, keep) in (2usize..30).prop_flat_map(|n| (
            prop::collection::vec(-1.0f64..1.0, n),
            grad_seq(n, 25),
            prop::collection::vec(any::<bool>(), n),
        )),
        weight_decay in 0.0f64..0.1,
    ) {
        let n = w0.len();
        let mask = GradMask::custom(keep.iter().map(|&k| f64::from(u8::from(k))).collect()).unwrap();
        let config = OptimConfig { weight_decay, total_steps: 25, ..OptimConfig::default() };
        let (mut w, mut state) = (w0.clone(), AdamState::new(n));
        for (step, g) in grads.iter().enumerate() {
            let t_before = state.t;
            child_tuning_adam_step(&mut w, g, &mask, &mut state, &config, 0.01).unwrap();
            prop_assert_eq!(state.t, t_before + 1);
            prop_assert!(w.iter().all(|x| x.is_finite()), "step {}", step);
        }
        for i in (0..n).filter(|&i| !keep[i]) {
            prop_assert_eq!(w[i].to_bits(), w0[i].to_bits());
            prop_assert_eq!(state.m[i], 0.0);
            prop_assert_eq!(state.v[i], 0.0);
        }
    }

    #[test]
    fn constant_gradient_bias_correction_is_exact(g in -10.0f64..10.0, steps in 1usize..200) {
        let config = OptimConfig { total_steps: 1000, ..OptimConfig::default() };
        let mut w = [0.0];
        let mut state = AdamState::new(1);
        for _ in 0..steps {
            child_tuning_adam_step(&mut w, &[g], &GradMask::ones(1), &mut state, &config, 1e-3).unwrap();
            let m_hat = state.m[0] / (1.0 - config.beta1.powf(state.t as f64));
            prop_assert!((m_hat - g).abs() <= 1e-12 * (1.0 + g.abs()), "{} vs {}", m_hat, g);
        }
    }
}
