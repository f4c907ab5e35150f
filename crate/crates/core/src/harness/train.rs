//! The fine-tuning loop and its report.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Method, OptimizerKind, Pretrained, RunConfig, SourceTask};
use super::data::{make_dataset, subsample, Splits};
use super::derive_seed;
use super::probe::linear_probe;
use crate::error::{check_len, Error, Result};
use crate::fisher::{empirical_fisher_diag_capped, FisherDiag};
use crate::masking::{
    bernoulli_mask, fisher_topk_mask, lowest_fisher_mask, prune_params, random_fixed_mask,
    topk_layer_mask, GradMask, HeadSet, MaskKind,
};
use crate::model::{
    evaluate, init_params, Checkpoint, Dataset, Labels, Metric, Model, ModelSpec, OutputKind,
};
use crate::optim::{
    child_tuning_adam_step, clip_global_norm, lr_schedule, sgd_masked_step,
    weight_decay_to_pretrained_loss, AdamState, OptimConfig,
};
use crate::params::ParamVector;
use crate::tensor::forward_backward;
use crate::theory::model_sharpness;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub kind: MaskKind,
    pub p: f64,
    pub param_count: usize,
    /// Positive entries of the mask used at the first step.
    pub positive_count: usize,
    pub first_step_hash: String,
    pub last_step_hash: String,
    /// Written by the caller when the mask is saved next to the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_index_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub spec: Method,
    pub mask: MaskSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the full training set after the epoch.
    pub train_loss: f64,
    pub eval: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub method: MethodReport,
    pub train_size: usize,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: BTreeMap<String, f64>,
    pub w0_hash: String,
    pub final_params_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_metric: Option<f64>,
    pub wall_seconds: f64,
}

impl RunReport {
    /// The report with the wall-clock time cleared; everything left is a
    /// function of the configuration and seed.
    pub fn canonical(&self) -> RunReport {
        RunReport {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }

    /// Final metrics plus the optional sharpness and probe results.
    pub fn summary_metrics(&self) -> BTreeMap<String, f64> {
        let mut out = self.final_metrics.clone();
        if let Some(s) = self.sharpness {
            out.insert("sharpness".into(), s);
        }
        if let Some(p) = self.probe_metric {
            out.insert("probe".into(), p);
        }
        out
    }
}

/// A report together with the tensors it summarizes.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub model: Model,
    /// Starting point of fine-tuning (after pruning for `prune_d`).
    pub w0: ParamVector,
    pub final_params: ParamVector,
    pub state: AdamState,
    pub head: HeadSet,
    /// Mask used at the first step.
    pub mask: GradMask,
    pub step_mask_hashes: Vec<String>,
    pub splits: Splits,
}

pub fn metric_for(spec: &ModelSpec) -> Metric {
    match spec.output {
        OutputKind::Classifier { .. } => Metric::Accuracy,
        OutputKind::Regressor => Metric::Mse,
    }
}

enum MaskPolicy {
    Fixed {
        mask: GradMask,
        hash: String,
    },
    Fresh {
        p: f64,
        head: HeadSet,
        rng: ChaCha8Rng,
    },
}

impl MaskPolicy {
    fn fixed(mask: GradMask) -> Self {
        let hash = mask.content_hash();
        MaskPolicy::Fixed { mask, hash }
    }

    /// The mask for the next step and its content hash.
    fn next(&mut self, n: usize) -> Result<(Cow<'_, GradMask>, String)> {
        match self {
            MaskPolicy::Fixed { mask, hash } => Ok((Cow::Borrowed(mask), hash.clone())),
            MaskPolicy::Fresh { p, head, rng } => {
                let m = bernoulli_mask(n, head, *p, rng)?;
                let h = m.content_hash();
                Ok((Cow::Owned(m), h))
            }
        }
    }
}

struct Fit<'a> {
    model: &'a Model,
    train: &'a Dataset,
    epochs: usize,
    batch_size: usize,
    optim: OptimConfig,
    optimizer: OptimizerKind,
    penalty: Option<(&'a [f64], f64)>,
    batch_seed: u64,
}

struct FitOutcome {
    params: ParamVector,
    state: AdamState,
    steps: usize,
    step_mask_hashes: Vec<String>,
}

fn total_steps(n: usize, batch_size: usize, epochs: usize) -> usize {
    n.div_ceil(batch_size) * epochs
}

impl Fit<'_> {
    fn run(
        &self,
        mut params: ParamVector,
        masks: &mut MaskPolicy,
        mut on_epoch: impl FnMut(usize, &ParamVector) -> Result<()>,
    ) -> Result<FitOutcome> {
        let n = self.train.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut optim = self.optim.clone();
        if optim.total_steps == 0 {
            optim.total_steps = total_steps(n, self.batch_size, self.epochs);
        }
        optim.validate()?;
        let graph = self.model.train_graph();
        let mut state = AdamState::new(params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.batch_seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut hashes = Vec::new();
        let mut step = 0usize;
        for epoch in 0..self.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.batch_size) {
                let batch = self.train.select(chunk);
                let (loss, mut grads) = forward_backward(graph, &params, &batch)
                    .map_err(|e| diverged(e, epoch, step))?;
                if !loss.is_finite() {
                    return Err(Error::NumericOverflow(format!(
                        "non-finite loss at epoch {epoch}, step {step}"
                    )));
                }
                if let Some((w0, lambda)) = self.penalty {
                    let (_, pg) = weight_decay_to_pretrained_loss(params.values(), w0, lambda)?;
                    grads.iter_mut().zip(&pg).for_each(|(g, p)| *g += p);
                }
                if let Some(c) = optim.clip_max_norm {
                    clip_global_norm(&mut grads, c)?;
                }
                let (mask, hash) = masks.next(params.len())?;
                hashes.push(hash);
                let lr = lr_schedule(step.min(optim.total_steps), &optim)?;
                match self.optimizer {
                    OptimizerKind::Adam => child_tuning_adam_step(
                        params.values_mut(),
                        &grads,
                        &mask,
                        &mut state,
                        &optim,
                        lr,
                    ),
                    OptimizerKind::Sgd => sgd_masked_step(params.values_mut(), &grads, &mask, lr),
                }
                .map_err(|e| diverged(e, epoch, step))?;
                step += 1;
            }
            on_epoch(epoch, &params)?;
        }
        Ok(FitOutcome {
            params,
            state,
            steps: step,
            step_mask_hashes: hashes,
        })
    }
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NumericOverflow(m) => {
            Error::NumericOverflow(format!("{m} (epoch {epoch}, step {step})"))
        }
        other => other,
    }
}

/// Copies every non-head parameter of `source` into a fresh initialization
/// of `target` (same backbone, possibly different head).
pub fn transplant_backbone(
    source: &ParamVector,
    target: &ModelSpec,
    seed: u64,
) -> Result<ParamVector> {
    let mut out = init_params(target, seed)?;
    let head = target.head_param_names();
    for e in out.entries().to_vec() {
        if head.contains(&e.name) {
            continue;
        }
        let src = source.get(&e.name)?;
        check_len("transplanted backbone", e.numel(), src.len())?;
        out.get_mut(&e.name)?.copy_from_slice(src);
    }
    Ok(out)
}

type PretrainCache = Mutex<HashMap<(String, u64), ParamVector>>;

/// [`pretrain_source`] memoized per process: methods compared on the same
/// seed share one source run.
pub fn pretrain_source_cached(
    src: &SourceTask,
    target: &ModelSpec,
    seed: u64,
) -> Result<ParamVector> {
    static CACHE: OnceLock<PretrainCache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (
        serde_json::to_string(&(src, target)).expect("source task serializes"),
        seed,
    );
    if let Some(p) = cache.lock().expect("pretrain cache poisoned").get(&key) {
        return Ok(p.clone());
    }
    let params = pretrain_source(src, target, seed)?;
    cache
        .lock()
        .expect("pretrain cache poisoned")
        .insert(key, params.clone());
    Ok(params)
}

/// Vanilla training on the source task, returning w0 for `target`.
pub fn pretrain_source(src: &SourceTask, target: &ModelSpec, seed: u64) -> Result<ParamVector> {
    let source_spec = ModelSpec {
        output: src.output.unwrap_or(target.output),
        ..target.clone()
    };
    let model = Model::new(source_spec.clone())?;
    let splits = make_dataset(&src.data, derive_seed(seed, "source-data"))?;
    model.check_dataset(&splits.train)?;
    let start = init_params(&source_spec, derive_seed(seed, "source-init"))?;
    let fit = Fit {
        model: &model,
        train: &splits.train,
        epochs: src.epochs,
        batch_size: src.batch_size,
        optim: src.optim.clone(),
        optimizer: OptimizerKind::Adam,
        penalty: None,
        batch_seed: derive_seed(seed, "source-batches"),
    };
    let mut masks = MaskPolicy::fixed(GradMask::ones(start.len()));
    let trained = fit.run(start, &mut masks, |_, _| Ok(()))?.params;
    if source_spec == *target && !src.reinit_head {
        return Ok(trained);
    }
    transplant_backbone(&trained, target, derive_seed(seed, "head-init"))
}

fn initial_params(cfg: &RunConfig) -> Result<ParamVector> {
    match &cfg.pretrained {
        Pretrained::FreshSeed => init_params(&cfg.model, derive_seed(cfg.seed, "init")),
        Pretrained::Checkpoint { path } => {
            let ck = Checkpoint::load(path)?;
            if ck.spec != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} has a different model spec",
                    path.display()
                )));
            }
            Ok(ck.params)
        }
        Pretrained::Source(src) => pretrain_source_cached(src, &cfg.model, cfg.seed),
    }
}

/// Same as [`train_run_detailed`], keeping only the report.
pub fn train_run(cfg: &RunConfig) -> Result<RunReport> {
    Ok(train_run_detailed(cfg)?.report)
}

/// Everything a run needs before the first step: data splits (after
/// subsampling), w0 and the exempt head set.
#[derive(Clone, Debug)]
pub struct RunSetup {
    pub model: Model,
    pub splits: Splits,
    pub w0: ParamVector,
    pub head: HeadSet,
}

pub fn prepare_run(cfg: &RunConfig) -> Result<RunSetup> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone())?;
    let seed = cfg.seed;
    let mut splits = make_dataset(&cfg.data, derive_seed(seed, "data"))?;
    if let Some(n) = cfg.subsample_n {
        if n > splits.train.len() {
            return Err(Error::Config(format!(
                "subsample_n {n} exceeds the {} training examples",
                splits.train.len()
            )));
        }
        splits.train = subsample(&splits.train, n, derive_seed(seed, "subsample"))?;
    }
    model.check_dataset(&splits.train)?;
    model.check_dataset(&splits.eval)?;
    let w0 = initial_params(cfg)?;
    model.check_params(&w0)?;
    let n = w0.len();
    let head = if cfg.exempt_head {
        HeadSet::new(n, model.head_indices(&w0)?)?
    } else {
        HeadSet::empty(n)
    };
    Ok(RunSetup {
        model,
        splits,
        w0,
        head,
    })
}

/// Fisher diagonal at w0 on the training split, as used by Fisher-based
/// methods.
pub fn run_fisher(cfg: &RunConfig, setup: &RunSetup) -> Result<FisherDiag> {
    empirical_fisher_diag_capped(
        &setup.model,
        &setup.w0,
        &setup.splits.train,
        cfg.fisher_samples,
    )
}

/// The mask `cfg.method` applies at the first step. Fisher-based methods
/// need `fisher`; it is ignored otherwise.
pub fn method_mask(
    cfg: &RunConfig,
    setup: &RunSetup,
    fisher: Option<&FisherDiag>,
) -> Result<GradMask> {
    let n = setup.w0.len();
    let head = &setup.head;
    let fisher = || {
        fisher
            .ok_or_else(|| Error::Config(format!("{} needs a Fisher diagonal", cfg.method.label())))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "mask"));
    match &cfg.method {
        Method::Vanilla {} | Method::WeightDecayW0 { .. } => Ok(GradMask::ones(n)),
        Method::ChildF { p } => bernoulli_mask(n, head, *p, &mut rng),
        Method::ChildD { p } | Method::PruneD { p } => fisher_topk_mask(fisher()?, head, *p),
        Method::LowestD { p } => lowest_fisher_mask(fisher()?, head, *p),
        Method::RandomD { p } => random_fixed_mask(n, head, *p, &mut rng),
        Method::TopkLayers { k } => topk_layer_mask(&setup.w0, *k, head),
    }
}

pub fn train_run_detailed(cfg: &RunConfig) -> Result<RunArtifacts> {
    let started = Instant::now();
    let setup = prepare_run(cfg)?;
    let fisher = if cfg.method.needs_fisher() {
        Some(run_fisher(cfg, &setup)?)
    } else {
        None
    };
    let first_mask = method_mask(cfg, &setup, fisher.as_ref())?;
    let RunSetup {
        model,
        splits,
        mut w0,
        head,
    } = setup;
    let seed = cfg.seed;
    let n = w0.len();
    let mut penalty_lambda = None;
    let mut policy = match &cfg.method {
        Method::ChildF { p } => MaskPolicy::Fresh {
            p: *p,
            head: head.clone(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "mask")),
        },
        Method::WeightDecayW0 { lambda } => {
            penalty_lambda = Some(*lambda);
            MaskPolicy::fixed(first_mask.clone())
        }
        Method::PruneD { .. } => {
            w0 = prune_params(&w0, &first_mask)?;
            MaskPolicy::fixed(first_mask.clone())
        }
        _ => MaskPolicy::fixed(first_mask.clone()),
    };

    let metric = metric_for(&cfg.model);
    let metric_name = match metric {
        Metric::Accuracy => "accuracy",
        Metric::Mse => "mse",
        Metric::MeanLogLikelihood => "log_likelihood",
    };
    let mut eval_sets: Vec<(String, &Dataset)> =
        vec![(format!("eval_{metric_name}"), &splits.eval)];
    if let Some(s) = &splits.shifted {
        eval_sets.push((format!("shifted_{metric_name}"), s));
    }
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let fit = Fit {
        model: &model,
        train: &splits.train,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optim: cfg.optim.clone(),
        optimizer: cfg.optimizer,
        penalty: penalty_lambda.map(|l| (w0.values(), l)),
        batch_seed: derive_seed(seed, "batches"),
    };
    let outcome = fit.run(w0.clone(), &mut policy, |epoch, params| {
        let train_loss = model.train_graph().loss(params, &splits.train)?;
        let mut eval = BTreeMap::new();
        for (name, data) in &eval_sets {
            eval.insert(name.clone(), evaluate(&model, params, data, metric)?);
        }
        if !train_loss.is_finite() || eval.values().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow(format!(
                "non-finite metrics after epoch {epoch}"
            )));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            eval,
        });
        Ok(())
    })?;

    let mut final_metrics = epochs.last().map(|e| e.eval.clone()).unwrap_or_default();
    final_metrics.insert(
        "train_loss".into(),
        epochs.last().map_or(f64::NAN, |e| e.train_loss),
    );
    let sharpness = cfg
        .sharpness_iters
        .map(|iters| {
            model_sharpness(
                &model,
                &outcome.params,
                &splits.train,
                iters,
                derive_seed(seed, "sharpness"),
            )
        })
        .transpose()?;
    let probe_metric = cfg
        .probe
        .as_ref()
        .map(|p| {
            linear_probe(&model, &outcome.params, p, derive_seed(seed, "probe")).map(|r| r.metric)
        })
        .transpose()?;

    let report = RunReport {
        format_version: REPORT_VERSION,
        config_hash: cfg.hash(),
        seed,
        method: MethodReport {
            spec: cfg.method.clone(),
            mask: MaskSummary {
                kind: first_mask.kind(),
                p: first_mask.p(),
                param_count: n,
                positive_count: first_mask.positive_count(),
                first_step_hash: outcome
                    .step_mask_hashes
                    .first()
                    .cloned()
                    .unwrap_or_default(),
                last_step_hash: outcome.step_mask_hashes.last().cloned().unwrap_or_default(),
                positive_index_file: None,
            },
        },
        train_size: splits.train.len(),
        steps: outcome.steps,
        epochs,
        final_metrics,
        w0_hash: w0.content_hash(),
        final_params_hash: outcome.params.content_hash(),
        sharpness,
        probe_metric,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(RunArtifacts {
        report,
        model,
        w0,
        final_params: outcome.params,
        state: outcome.state,
        head,
        mask: first_mask,
        step_mask_hashes: outcome.step_mask_hashes,
        splits,
    })
}

/// Labels shuffled by a seeded permutation; a chance-level control task.
pub fn shuffle_labels(data: &Dataset, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle-labels"));
    let labels = match data.labels() {
        Labels::Classes(c) => {
            let mut c = c.clone();
            c.shuffle(&mut rng);
            Labels::Classes(c)
        }
        Labels::Targets(t) => {
            let mut t = t.clone();
            t.shuffle(&mut rng);
            Labels::Targets(t)
        }
    };
    data.relabel(labels)
}
