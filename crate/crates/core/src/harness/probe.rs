//! Linear probe: a fresh linear head trained on frozen representations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ProbeConfig;
use super::data::make_dataset;
use super::derive_seed;
use crate::error::{Error, Result};
use crate::masking::GradMask;
use crate::model::{
    evaluate, init_params, Activation, Dataset, Labels, Metric, Model, ModelSpec, OutputKind,
};
use crate::optim::{child_tuning_adam_step, clip_global_norm, lr_schedule, AdamState, OptimConfig};
use crate::params::ParamVector;
use crate::tensor::forward_backward;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    /// Accuracy for class labels, mean squared error for targets.
    pub metric: f64,
    /// True when the frozen model has no hidden layer and the probe saw the
    /// raw features.
    pub used_raw_features: bool,
}

pub fn linear_probe(
    model: &Model,
    frozen: &ParamVector,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let splits = make_dataset(&probe.data, derive_seed(seed, "probe-data"))?;
    linear_probe_on(
        model,
        frozen,
        &splits.train,
        &splits.eval,
        probe.epochs,
        probe.batch_size,
        &probe.optim,
        seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn linear_probe_on(
    model: &Model,
    frozen: &ParamVector,
    train: &Dataset,
    eval: &Dataset,
    epochs: usize,
    batch_size: usize,
    optim: &OptimConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if epochs == 0 || batch_size == 0 {
        return Err(Error::invalid(
            "probe epochs and batch_size must be positive",
        ));
    }
    model.check_params(frozen)?;
    let used_raw_features = model.spec().hidden_layer_count() == 0;
    if used_raw_features {
        eprintln!("linear probe: model has no hidden layer, probing raw features");
    }
    let rep_train = model.representation(frozen, train)?;
    let rep_eval = model.representation(frozen, eval)?;
    let output = match (train.labels(), eval.labels()) {
        (Labels::Classes(a), Labels::Classes(b)) => OutputKind::Classifier {
            num_classes: a.iter().chain(b).max().map_or(2, |m| (m + 1).max(2)),
        },
        (Labels::Targets(_), Labels::Targets(_)) => OutputKind::Regressor,
        _ => {
            return Err(Error::invalid(
                "probe train and eval sets have different label types",
            ))
        }
    };
    let spec = ModelSpec {
        input_dim: rep_train.dim(),
        hidden_dims: vec![],
        output,
        activation: Activation::Tanh,
        bias: true,
    };
    let head = Model::new(spec.clone())?;
    let mut params = init_params(&spec, derive_seed(seed, "probe-init"))?;
    let mut optim = optim.clone();
    if optim.total_steps == 0 {
        optim.total_steps = rep_train.len().div_ceil(batch_size) * epochs;
    }
    let ones = GradMask::ones(params.len());
    let mut state = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe-batches"));
    let mut order: Vec<usize> = (0..rep_train.len()).collect();
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let (_, mut grads) =
                forward_backward(head.train_graph(), &params, &rep_train.select(chunk))?;
            if let Some(c) = optim.clip_max_norm {
                clip_global_norm(&mut grads, c)?;
            }
            let lr = lr_schedule(step.min(optim.total_steps), &optim)?;
            child_tuning_adam_step(params.values_mut(), &grads, &ones, &mut state, &optim, lr)?;
            step += 1;
        }
    }
    let metric = match output {
        OutputKind::Classifier { .. } => Metric::Accuracy,
        OutputKind::Regressor => Metric::Mse,
    };
    Ok(ProbeResult {
        metric: evaluate(&head, &params, &rep_eval, metric)?,
        used_raw_features,
    })
}
