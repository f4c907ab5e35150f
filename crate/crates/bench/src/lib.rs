//! Shared fixtures for the benchmarks.

use childgrad::harness::{make_dataset, DataSpec, Generator};
use childgrad::{init_params, Activation, Dataset, Model, ModelSpec, OutputKind, ParamVector};

/// A tanh classifier on two moons with the given hidden widths and `n`
/// training examples.
pub fn moons_fixture(hidden: &[usize], n: usize) -> (Model, ParamVector, Dataset) {
    let spec = ModelSpec {
        input_dim: 2,
        hidden_dims: hidden.to_vec(),
        output: OutputKind::Classifier { num_classes: 2 },
        activation: Activation::Tanh,
        bias: true,
    };
    let data = DataSpec::new(Generator::TwoMoons {
        noise: 0.2,
        n: n * 2,
    });
    let splits = make_dataset(
        &DataSpec {
            train_fraction: 0.5,
            ..data
        },
        1,
    )
    .expect("dataset");
    let params = init_params(&spec, 2).expect("init");
    (Model::new(spec).expect("model"), params, splits.train)
}
