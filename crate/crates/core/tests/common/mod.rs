#![allow(dead_code)]

use childgrad::model::log_likelihood_grad;
use childgrad::{init_params, Activation, Dataset, Model, ModelSpec, OutputKind, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub model: Model,
    pub params: ParamVector,
    pub data: Dataset,
}

/// A random small MLP (0 to 2 hidden layers, either activation, classifier
/// or regressor) with random weights and a random batch.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.random_range(1..=4);
    let depth = rng.random_range(0..=2);
    let hidden_dims = (0..depth).map(|_| rng.random_range(1..=6)).collect();
    let output = if rng.random_bool(0.5) {
        OutputKind::Classifier {
            num_classes: rng.random_range(2..=4),
        }
    } else {
        OutputKind::Regressor
    };
    let spec = ModelSpec {
        input_dim,
        hidden_dims,
        output,
        activation: if rng.random_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Relu
        },
        bias: rng.random_bool(0.8),
    };
    let mut params = init_params(&spec, rng.random()).unwrap();
    for v in params.values_mut() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let rows = rng.random_range(1..=6);
    let data = random_batch(&spec, rows, &mut rng);
    Instance {
        model: Model::new(spec).unwrap(),
        params,
        data,
    }
}

pub fn random_batch(spec: &ModelSpec, rows: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let features: Vec<f64> = (0..rows * spec.input_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    match spec.output {
        OutputKind::Classifier { num_classes } => Dataset::classification(
            features,
            spec.input_dim,
            (0..rows)
                .map(|_| rng.random_range(0..num_classes))
                .collect(),
        ),
        OutputKind::Regressor => Dataset::regression(
            features,
            spec.input_dim,
            (0..rows).map(|_| rng.sample(StandardNormal)).collect(),
        ),
    }
    .unwrap()
}

/// Logistic regression on `d` inputs: a two-class model with no hidden layer.
pub fn logistic_spec(d: usize) -> ModelSpec {
    ModelSpec {
        input_dim: d,
        hidden_dims: vec![],
        output: OutputKind::Classifier { num_classes: 2 },
        activation: Activation::Tanh,
        bias: true,
    }
}

/// `|a - b| / max(|a|, |b|)`, or 0 when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Straight loop: square each per-example gradient and average.
pub fn brute_force_fisher(inst: &Instance) -> Vec<f64> {
    let n = inst.data.len();
    let mut acc = vec![0.0; inst.params.len()];
    for i in 0..n {
        let g = log_likelihood_grad(&inst.model, &inst.params, &inst.data, i).unwrap();
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v * v;
        }
    }
    acc.iter().map(|a| a / n as f64).collect()
}
