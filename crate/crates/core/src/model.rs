//! Small dense models: logistic regression and 1-3 hidden-layer MLPs.
//!
//! Parameters are named `layer{i}.weight` ([in, out]) and `layer{i}.bias`
//! ([out]); the last layer is the task head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fsio;
use crate::optim::AdamState;
use crate::params::ParamVector;
use crate::tensor::{forward_backward, Graph, Likelihood, Node, NodeId, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Targets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(v) => Labels::Classes(idx.iter().map(|&i| v[i]).collect()),
            Labels::Targets(v) => Labels::Targets(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Row-major feature matrix with one label per row and an optional domain
/// tag per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Labels,
    domain: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Labels) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::invalid(format!(
                "{} feature values do not form rows of width {dim}",
                features.len()
            )));
        }
        check_len("Dataset labels", features.len() / dim, labels.len())?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow("dataset features".into()));
        }
        if let Labels::Targets(t) = &labels {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow("dataset targets".into()));
            }
        }
        Ok(Self {
            features,
            dim,
            labels,
            domain: None,
        })
    }

    pub fn classification(features: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        Self::new(features, dim, Labels::Classes(labels))
    }

    pub fn regression(features: Vec<f64>, dim: usize, targets: Vec<f64>) -> Result<Self> {
        Self::new(features, dim, Labels::Targets(targets))
    }

    pub fn with_domain(mut self, tags: Vec<u32>) -> Result<Self> {
        check_len("Dataset domain tags", self.len(), tags.len())?;
        self.domain = Some(tags);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn domain(&self) -> Option<&[u32]> {
        self.domain.as_deref()
    }

    /// Rows in the given order (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: self.labels.select(idx),
            domain: self
                .domain
                .as_ref()
                .map(|d| idx.iter().map(|&i| d[i]).collect()),
        }
    }

    pub fn example(&self, i: usize) -> Dataset {
        self.select(&[i])
    }

    /// Same rows with labels replaced.
    pub fn relabel(&self, labels: Labels) -> Result<Dataset> {
        check_len("Dataset::relabel", self.len(), labels.len())?;
        Ok(Dataset {
            labels,
            ..self.clone()
        })
    }

    /// Per-class counts, indexed by class (length = max label + 1).
    pub fn class_counts(&self) -> Option<Vec<usize>> {
        let Labels::Classes(l) = &self.labels else {
            return None;
        };
        let k = l.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0; k];
        for &c in l {
            counts[c] += 1;
        }
        Some(counts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutputKind {
    Classifier { num_classes: usize },
    Regressor,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub output: OutputKind,
    pub activation: Activation,
    /// Whether every layer carries a bias vector.
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_dims.len() > 3 {
            return Err(Error::Config(format!(
                "at most 3 hidden layers are supported, got {}",
                self.hidden_dims.len()
            )));
        }
        if let OutputKind::Classifier { num_classes } = self.output {
            if num_classes < 2 {
                return Err(Error::Config(format!(
                    "classifier needs >= 2 classes, got {num_classes}"
                )));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.output {
            OutputKind::Classifier { num_classes } => num_classes,
            OutputKind::Regressor => 1,
        }
    }

    /// Number of linear layers, head included.
    pub fn layer_count(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// Layers below the head.
    pub fn hidden_layer_count(&self) -> usize {
        self.hidden_dims.len()
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// Weight and bias of the final linear layer.
    pub fn head_param_names(&self) -> Vec<String> {
        let last = self.layer_count() - 1;
        let mut names = vec![Self::weight_name(last)];
        if self.bias {
            names.push(Self::bias_name(last));
        }
        names
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.output_dim());
        w
    }

    /// Zero-valued parameters with the registry for this spec.
    pub fn zero_params(&self) -> Result<ParamVector> {
        self.validate()?;
        let widths = self.widths();
        let mut p = ParamVector::new();
        for layer in 0..self.layer_count() {
            p.push(
                Self::weight_name(layer),
                &[widths[layer], widths[layer + 1]],
                layer,
            )?;
            if self.bias {
                p.push(Self::bias_name(layer), &[widths[layer + 1]], layer)?;
            }
        }
        Ok(p)
    }

    /// Number of scalars in the head.
    pub fn head_len(&self) -> usize {
        let w = self.widths();
        let (i, o) = (w[w.len() - 2], w[w.len() - 1]);
        i * o + if self.bias { o } else { 0 }
    }
}

/// A spec with its graphs built once.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    train_graph: Graph,
    likelihood_graph: Graph,
    representation: Option<NodeId>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut nodes = vec![Node::Input];
        let mut cur = 0;
        let mut representation = None;
        for layer in 0..spec.layer_count() {
            nodes.push(Node::MatMul {
                input: cur,
                weight: ModelSpec::weight_name(layer),
            });
            cur = nodes.len() - 1;
            if spec.bias {
                nodes.push(Node::AddBias {
                    input: cur,
                    bias: ModelSpec::bias_name(layer),
                });
                cur = nodes.len() - 1;
            }
            if layer + 1 < spec.layer_count() {
                nodes.push(match spec.activation {
                    Activation::Tanh => Node::Tanh { input: cur },
                    Activation::Relu => Node::Relu { input: cur },
                });
                cur = nodes.len() - 1;
                representation = Some(cur);
            }
        }
        let (loss, family) = match spec.output {
            OutputKind::Classifier { .. } => (
                Node::SoftmaxCrossEntropy { logits: cur },
                Likelihood::Categorical,
            ),
            OutputKind::Regressor => (
                Node::MeanSquaredError { prediction: cur },
                Likelihood::UnitGaussian,
            ),
        };
        nodes.push(loss);
        let train_graph = Graph::new(nodes)?;
        let likelihood_graph =
            train_graph.with_objective(Node::LogLikelihood { input: cur, family })?;
        Ok(Self {
            spec,
            train_graph,
            likelihood_graph,
            representation,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Mean training loss: cross-entropy for classifiers, squared error for
    /// regressors.
    pub fn train_graph(&self) -> &Graph {
        &self.train_graph
    }

    /// Mean log-likelihood; unit-variance Gaussian for regressors.
    pub fn likelihood_graph(&self) -> &Graph {
        &self.likelihood_graph
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        let reference = self.spec.zero_params()?;
        if reference.entries() != params.entries() {
            return Err(Error::invalid(
                "parameter registry does not match the model spec",
            ));
        }
        Ok(())
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.spec.input_dim {
            return Err(Error::invalid(format!(
                "dataset has {} features, model expects {}",
                data.dim(),
                self.spec.input_dim
            )));
        }
        match (self.spec.output, data.labels()) {
            (OutputKind::Classifier { num_classes }, Labels::Classes(l)) => {
                if let Some((index, &label)) = l.iter().enumerate().find(|(_, &c)| c >= num_classes)
                {
                    return Err(Error::LabelOutOfRange {
                        label,
                        num_classes,
                        index,
                    });
                }
                Ok(())
            }
            (OutputKind::Regressor, Labels::Targets(_)) => Ok(()),
            _ => Err(Error::invalid(
                "dataset label type does not match model output",
            )),
        }
    }

    /// Indices of the head scalars within the parameter vector.
    pub fn head_indices(&self, params: &ParamVector) -> Result<Vec<usize>> {
        let names = self.spec.head_param_names();
        params.indices_of(names.iter().map(String::as_str))
    }

    /// Length of the parameter prefix that precedes the head.
    pub fn backbone_len(&self) -> usize {
        let total: usize = self.spec.zero_params().map(|p| p.len()).unwrap_or_default();
        total - self.spec.head_len()
    }

    /// Logits (classifier) or predictions (regressor), shape [n, out].
    pub fn predict(&self, params: &ParamVector, data: &Dataset) -> Result<Tensor> {
        let mut values = self.train_graph.forward(params, data)?;
        Ok(values.swap_remove(self.train_graph.output_node()))
    }

    /// Last hidden-layer activations as a new dataset with the same labels.
    /// Models without hidden layers return the input unchanged.
    pub fn representation(&self, params: &ParamVector, data: &Dataset) -> Result<Dataset> {
        let Some(node) = self.representation else {
            return Ok(data.clone());
        };
        let mut values = self.train_graph.forward(params, data)?;
        let t = values.swap_remove(node);
        let width = t.shape()[1];
        let mut out = Dataset::new(t.into_data(), width, data.labels().clone())?;
        out.domain = data.domain.clone();
        Ok(out)
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    let mut params = spec.zero_params()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = params.entries().to_vec();
    for e in entries.iter().filter(|e| e.shape.len() == 2) {
        let limit = (6.0 / (e.shape[0] + e.shape[1]) as f64).sqrt();
        for v in &mut params.values_mut()[e.range()] {
            *v = rng.random_range(-limit..limit);
        }
    }
    Ok(params)
}

/// Gradient of log p(y | x; w) for one example of `data`.
pub fn log_likelihood_grad(
    model: &Model,
    params: &ParamVector,
    data: &Dataset,
    index: usize,
) -> Result<Vec<f64>> {
    if index >= data.len() {
        return Err(Error::invalid(format!(
            "example {index} out of range ({} rows)",
            data.len()
        )));
    }
    let example = data.example(index);
    model.check_dataset(&example).map_err(|e| match e {
        Error::LabelOutOfRange {
            label, num_classes, ..
        } => Error::LabelOutOfRange {
            label,
            num_classes,
            index,
        },
        other => other,
    })?;
    let (_, g) = forward_backward(model.likelihood_graph(), params, &example)?;
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Mse,
    MeanLogLikelihood,
}

pub fn evaluate(
    model: &Model,
    params: &ParamVector,
    data: &Dataset,
    metric: Metric,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.check_dataset(data)?;
    match (metric, model.spec.output) {
        (Metric::Accuracy, OutputKind::Classifier { .. }) => {
            let logits = model.predict(params, data)?;
            let Labels::Classes(labels) = data.labels() else {
                unreachable!("checked above")
            };
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| argmax(logits.row(i)) == y)
                .count();
            Ok(correct as f64 / data.len() as f64)
        }
        (Metric::Mse, OutputKind::Regressor) => model.train_graph.loss(params, data),
        (Metric::MeanLogLikelihood, _) => model.likelihood_graph.loss(params, data),
        (m, o) => Err(Error::invalid(format!(
            "metric {m:?} is not defined for output {o:?}"
        ))),
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Model spec, named tensors and (optionally) optimizer moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub params: ParamVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParamVector, optimizer: Option<AdamState>) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            spec,
            params,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = fsio::read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersion {
                expected: CHECKPOINT_VERSION,
                found: ck.format_version,
            });
        }
        Model::new(ck.spec.clone())?.check_params(&ck.params)?;
        if let Some(state) = &ck.optimizer {
            check_len("checkpoint optimizer state", ck.params.len(), state.m.len())?;
            check_len("checkpoint optimizer state", ck.params.len(), state.v.len())?;
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(hidden: Vec<usize>) -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden_dims: hidden,
            output: OutputKind::Classifier { num_classes: 2 },
            activation: Activation::Tanh,
            bias: true,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = mlp(vec![5, 4]);
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), init_params(&spec, 8).unwrap().values());
        for l in 0..3 {
            assert!(a
                .get(&ModelSpec::bias_name(l))
                .unwrap()
                .iter()
                .all(|&v| v == 0.0));
        }
        let lim = (6.0f64 / 8.0).sqrt();
        assert!(a
            .get("layer0.weight")
            .unwrap()
            .iter()
            .all(|v| v.abs() <= lim));
    }

    #[test]
    fn glorot_weights_have_zero_mean() {
        // 1e5 draws of a 1x1 weight (limit sqrt(3)) across seeds.
        let spec = ModelSpec {
            input_dim: 1,
            hidden_dims: vec![],
            output: OutputKind::Regressor,
            activation: Activation::Tanh,
            bias: false,
        };
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|s| init_params(&spec, s as u64).unwrap().values()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
        // uniform(-sqrt 3, sqrt 3) has unit variance
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn head_names_are_last_layer() {
        let spec = mlp(vec![5, 4]);
        assert_eq!(
            spec.head_param_names(),
            vec!["layer2.weight", "layer2.bias"]
        );
        let model = Model::new(spec.clone()).unwrap();
        let p = spec.zero_params().unwrap();
        assert_eq!(model.head_indices(&p).unwrap().len(), spec.head_len());
        assert_eq!(model.backbone_len() + spec.head_len(), p.len());
        assert_eq!(
            *model.head_indices(&p).unwrap().first().unwrap(),
            model.backbone_len()
        );
    }

    #[test]
    fn spec_validation() {
        let mut s = mlp(vec![2, 2, 2, 2]);
        assert!(s.validate().is_err());
        s.hidden_dims = vec![0];
        assert!(s.validate().is_err());
        s.hidden_dims = vec![];
        s.output = OutputKind::Classifier { num_classes: 1 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn logistic_log_likelihood_gradient_hand_value() {
        // Two-class softmax with logits (w0 x, w1 x) gives p(y=1) = sigmoid((w1 - w0) x).
        let spec = ModelSpec {
            input_dim: 1,
            hidden_dims: vec![],
            output: OutputKind::Classifier { num_classes: 2 },
            activation: Activation::Tanh,
            bias: false,
        };
        let model = Model::new(spec.clone()).unwrap();
        let params = spec.zero_params().unwrap();
        let data = Dataset::classification(vec![1.0], 1, vec![1]).unwrap();
        let g = log_likelihood_grad(&model, &params, &data, 0).unwrap();
        assert_eq!(g, vec![-0.5, 0.5]);

        let zero_x = Dataset::classification(vec![0.0], 1, vec![1]).unwrap();
        assert_eq!(
            log_likelihood_grad(&model, &params, &zero_x, 0).unwrap(),
            vec![0.0, 0.0]
        );

        let bad = Dataset::classification(vec![0.0, 1.0], 1, vec![0, 5]).unwrap();
        assert!(matches!(
            log_likelihood_grad(&model, &params, &bad, 1),
            Err(Error::LabelOutOfRange {
                label: 5,
                index: 1,
                ..
            })
        ));
    }

    #[test]
    fn evaluate_metrics() {
        let spec = ModelSpec {
            input_dim: 1,
            hidden_dims: vec![],
            output: OutputKind::Classifier { num_classes: 2 },
            activation: Activation::Tanh,
            bias: false,
        };
        let model = Model::new(spec.clone()).unwrap();
        let mut params = spec.zero_params().unwrap();
        params.values_mut().copy_from_slice(&[-1.0, 1.0]);
        let data =
            Dataset::classification(vec![1.0, 2.0, -1.0, -3.0], 1, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(
            evaluate(&model, &params, &data, Metric::Accuracy).unwrap(),
            1.0
        );
        assert!(evaluate(&model, &params, &data, Metric::MeanLogLikelihood).unwrap() < 0.0);
        assert!(evaluate(&model, &params, &data, Metric::Mse).is_err());

        // Constant predictor on a balanced set.
        let zero = spec.zero_params().unwrap();
        assert_eq!(
            evaluate(&model, &zero, &data, Metric::Accuracy).unwrap(),
            0.5
        );

        let reg = ModelSpec {
            output: OutputKind::Regressor,
            ..spec
        };
        let rmodel = Model::new(reg.clone()).unwrap();
        let mut rp = reg.zero_params().unwrap();
        rp.values_mut()[0] = 2.0;
        let rdata = Dataset::regression(vec![1.0, -1.0], 1, vec![2.0, -2.0]).unwrap();
        assert_eq!(evaluate(&rmodel, &rp, &rdata, Metric::Mse).unwrap(), 0.0);
        assert!(evaluate(&rmodel, &rp, &rdata, Metric::Accuracy).is_err());
        let empty = Dataset::regression(vec![], 1, vec![]).unwrap();
        assert!(matches!(
            evaluate(&rmodel, &rp, &empty, Metric::Mse),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let spec = mlp(vec![4]);
        let params = init_params(&spec, 3).unwrap();
        let ck = Checkpoint::new(spec, params, Some(AdamState::new(26)));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params.content_hash(), ck.params.content_hash());

        let mut bad = serde_json::to_value(&ck).unwrap();
        bad["format_version"] = 99.into();
        std::fs::write(&path, bad.to_string()).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::FormatVersion { found: 99, .. })
        ));
    }

    #[test]
    fn representation_width_is_last_hidden() {
        let spec = mlp(vec![5, 4]);
        let model = Model::new(spec.clone()).unwrap();
        let params = init_params(&spec, 1).unwrap();
        let data = Dataset::classification(vec![0.1; 6], 3, vec![0, 1]).unwrap();
        let rep = model.representation(&params, &data).unwrap();
        assert_eq!(rep.dim(), 4);
        assert_eq!(rep.labels(), data.labels());
        let logistic = Model::new(mlp(vec![])).unwrap();
        assert_eq!(
            logistic
                .representation(&mlp(vec![]).zero_params().unwrap(), &data)
                .unwrap(),
            data
        );
    }
}
