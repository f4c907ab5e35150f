//! Dense tensors and a small reverse-mode differentiator for feed-forward
//! graphs.
//!
//! A [`Graph`] is a topologically ordered list of primitive [`Node`]s that
//! ends in exactly one scalar objective. Every objective is the mean over
//! the batch, and all reductions over the batch run in ascending example
//! order with pairwise summation, so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{Dataset, Labels};
use crate::numeric::{all_finite, pairwise_sum, pairwise_sum_by};
use crate::params::ParamVector;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Row-major tensor. Fails if the shape does not cover `data` exactly or
    /// any entry is NaN/Inf.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} has a zero or missing dimension"
            )));
        }
        check_len("Tensor::new", shape.iter().product(), data.len())?;
        if !all_finite(&data) {
            return Err(Error::NumericOverflow("Tensor::new".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    fn matrix_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// (rows, cols) of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }
}

pub type NodeId = usize;

/// Likelihood family used by [`Node::LogLikelihood`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// log softmax(z)[y]
    Categorical,
    /// log N(y; z, 1)
    UnitGaussian,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Batch features, shape [batch, input_dim].
    Input,
    /// `input · W` with W of shape [in, out].
    MatMul {
        input: NodeId,
        weight: String,
    },
    /// `input + b` broadcast over rows.
    AddBias {
        input: NodeId,
        bias: String,
    },
    Tanh {
        input: NodeId,
    },
    Relu {
        input: NodeId,
    },
    /// Mean over the batch of -log softmax(z)[y].
    SoftmaxCrossEntropy {
        logits: NodeId,
    },
    /// Mean over the batch of (prediction - y)^2, single-output.
    MeanSquaredError {
        prediction: NodeId,
    },
    /// Mean over the batch of log p(y | x).
    LogLikelihood {
        input: NodeId,
        family: Likelihood,
    },
}

impl Node {
    fn name(&self) -> &'static str {
        match self {
            Node::Input => "input",
            Node::MatMul { .. } => "matmul",
            Node::AddBias { .. } => "add_bias",
            Node::Tanh { .. } => "tanh",
            Node::Relu { .. } => "relu",
            Node::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Node::MeanSquaredError { .. } => "mean_squared_error",
            Node::LogLikelihood { .. } => "log_likelihood",
        }
    }

    fn operand(&self) -> Option<NodeId> {
        match *self {
            Node::Input => None,
            Node::MatMul { input, .. }
            | Node::AddBias { input, .. }
            | Node::Tanh { input }
            | Node::Relu { input }
            | Node::LogLikelihood { input, .. } => Some(input),
            Node::SoftmaxCrossEntropy { logits } => Some(logits),
            Node::MeanSquaredError { prediction } => Some(prediction),
        }
    }

    fn is_objective(&self) -> bool {
        matches!(
            self,
            Node::SoftmaxCrossEntropy { .. }
                | Node::MeanSquaredError { .. }
                | Node::LogLikelihood { .. }
        )
    }

    fn param(&self) -> Option<&str> {
        match self {
            Node::MatMul { weight, .. } => Some(weight),
            Node::AddBias { bias, .. } => Some(bias),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    /// Validates ordering: every operand refers to an earlier node and the
    /// last node is the only objective.
    pub fn new(nodes: Vec<Node>) -> Result<Self> {
        let Some(last) = nodes.last() else {
            return Err(Error::invalid("graph has no nodes"));
        };
        if !last.is_objective() {
            return Err(Error::invalid("graph must end in a scalar objective node"));
        }
        for (id, node) in nodes.iter().enumerate() {
            if let Some(op) = node.operand() {
                if op >= id {
                    return Err(Error::ShapeMismatch {
                        node: node_label(id, node),
                        detail: format!("operand #{op} is not an earlier node"),
                    });
                }
            }
            if node.is_objective() && id + 1 != nodes.len() {
                return Err(Error::invalid(format!(
                    "objective {} at #{id} is not the final node",
                    node.name()
                )));
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Index of the node feeding the objective (logits or prediction).
    pub fn output_node(&self) -> NodeId {
        self.nodes
            .last()
            .and_then(Node::operand)
            .expect("validated graph ends in an objective")
    }

    /// Same graph with the objective replaced.
    pub fn with_objective(&self, objective: Node) -> Result<Self> {
        let mut nodes = self.nodes.clone();
        nodes.pop();
        nodes.push(objective);
        Graph::new(nodes)
    }

    /// Checks that every referenced parameter exists in `params`.
    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = node.param() {
                if !params.contains(name) {
                    return Err(Error::ShapeMismatch {
                        node: node_label(id, node),
                        detail: format!("parameter `{name}` missing from registry"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Evaluates every node. The returned vector is indexed by node id; the
    /// last entry is the scalar objective.
    pub fn forward(&self, params: &ParamVector, batch: &Dataset) -> Result<Vec<Tensor>> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = eval_node(id, node, &values, params, batch)?;
            values.push(v);
        }
        Ok(values)
    }

    /// Objective value only.
    pub fn loss(&self, params: &ParamVector, batch: &Dataset) -> Result<f64> {
        let values = self.forward(params, batch)?;
        let loss = values.last().expect("non-empty graph").data[0];
        if !loss.is_finite() {
            return Err(Error::NumericOverflow("loss".into()));
        }
        Ok(loss)
    }
}

fn node_label(id: NodeId, node: &Node) -> String {
    match node.param() {
        Some(p) => format!("#{id} {}({p})", node.name()),
        None => format!("#{id} {}", node.name()),
    }
}

fn operand_matrix<'a>(
    id: NodeId,
    node: &Node,
    values: &'a [Tensor],
) -> Result<(&'a Tensor, usize, usize)> {
    let op = node.operand().expect("node has an operand");
    let t = &values[op];
    let (r, c) = t.dims2().ok_or_else(|| Error::ShapeMismatch {
        node: node_label(id, node),
        detail: format!("operand #{op} has shape {:?}, expected a matrix", t.shape),
    })?;
    Ok((t, r, c))
}

fn param_tensor<'a>(
    id: NodeId,
    node: &Node,
    params: &'a ParamVector,
) -> Result<(&'a [f64], &'a [usize])> {
    let name = node.param().expect("node references a parameter");
    let entry = params.entry(name).map_err(|_| Error::ShapeMismatch {
        node: node_label(id, node),
        detail: format!("parameter `{name}` missing from registry"),
    })?;
    Ok((&params.values()[entry.range()], &entry.shape))
}

fn eval_node(
    id: NodeId,
    node: &Node,
    values: &[Tensor],
    params: &ParamVector,
    batch: &Dataset,
) -> Result<Tensor> {
    let mismatch = |detail: String| Error::ShapeMismatch {
        node: node_label(id, node),
        detail,
    };
    match node {
        Node::Input => Ok(Tensor::matrix_unchecked(
            batch.len(),
            batch.dim(),
            batch.features().to_vec(),
        )),
        Node::MatMul { .. } => {
            let (x, rows, inner) = operand_matrix(id, node, values)?;
            let (w, shape) = param_tensor(id, node, params)?;
            let &[w_in, w_out] = shape else {
                return Err(mismatch(format!("weight shape {shape:?} is not 2-D")));
            };
            if w_in != inner {
                return Err(mismatch(format!(
                    "input width {inner} vs weight rows {w_in}"
                )));
            }
            let mut out = vec![0.0; rows * w_out];
            for r in 0..rows {
                let xr = x.row(r);
                let o = &mut out[r * w_out..(r + 1) * w_out];
                for (k, &xv) in xr.iter().enumerate() {
                    let wk = &w[k * w_out..(k + 1) * w_out];
                    for (oj, &wv) in o.iter_mut().zip(wk) {
                        *oj += xv * wv;
                    }
                }
            }
            Ok(Tensor::matrix_unchecked(rows, w_out, out))
        }
        Node::AddBias { .. } => {
            let (x, rows, cols) = operand_matrix(id, node, values)?;
            let (b, shape) = param_tensor(id, node, params)?;
            if shape != [cols] {
                return Err(mismatch(format!(
                    "bias shape {shape:?} vs input width {cols}"
                )));
            }
            let mut out = x.data.clone();
            for r in 0..rows {
                for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                    *o += bv;
                }
            }
            Ok(Tensor::matrix_unchecked(rows, cols, out))
        }
        Node::Tanh { .. } => {
            let (x, rows, cols) = operand_matrix(id, node, values)?;
            Ok(Tensor::matrix_unchecked(
                rows,
                cols,
                x.data.iter().map(|v| v.tanh()).collect(),
            ))
        }
        Node::Relu { .. } => {
            let (x, rows, cols) = operand_matrix(id, node, values)?;
            Ok(Tensor::matrix_unchecked(
                rows,
                cols,
                x.data.iter().map(|v| v.max(0.0)).collect(),
            ))
        }
        Node::SoftmaxCrossEntropy { .. }
        | Node::LogLikelihood {
            family: Likelihood::Categorical,
            ..
        } => {
            let (z, rows, cols) = operand_matrix(id, node, values)?;
            let Labels::Classes(labels) = batch.labels() else {
                return Err(mismatch("categorical objective needs class labels".into()));
            };
            check_labels(labels, cols)?;
            let sum = pairwise_sum_by(rows, &|r| {
                let zr = z.row(r);
                log_sum_exp(zr) - zr[labels[r]]
            });
            let mean_nll = sum / rows as f64;
            let v = if matches!(node, Node::SoftmaxCrossEntropy { .. }) {
                mean_nll
            } else {
                -mean_nll
            };
            Ok(Tensor::scalar(v))
        }
        Node::MeanSquaredError { .. }
        | Node::LogLikelihood {
            family: Likelihood::UnitGaussian,
            ..
        } => {
            let (pred, rows, cols) = operand_matrix(id, node, values)?;
            if cols != 1 {
                return Err(mismatch(format!(
                    "regression objective expects 1 output, got {cols}"
                )));
            }
            let Labels::Targets(targets) = batch.labels() else {
                return Err(mismatch("regression objective needs real targets".into()));
            };
            let sq = pairwise_sum_by(rows, &|r| (pred.data[r] - targets[r]).powi(2)) / rows as f64;
            let v = if matches!(node, Node::MeanSquaredError { .. }) {
                sq
            } else {
                -0.5 * sq - 0.5 * (2.0 * std::f64::consts::PI).ln()
            };
            Ok(Tensor::scalar(v))
        }
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    for (index, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes,
                index,
            });
        }
    }
    Ok(())
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(z);
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - lse).exp();
    }
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = m[r * cols + c];
        }
    }
    t
}

/// Objective value and its exact gradient with respect to every parameter,
/// laid out like `params.values()`.
pub fn forward_backward(
    graph: &Graph,
    params: &ParamVector,
    batch: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    let values = graph.forward(params, batch)?;
    let loss = values.last().expect("non-empty graph").data[0];
    if !loss.is_finite() {
        return Err(Error::NumericOverflow("loss".into()));
    }
    let nodes = graph.nodes();
    let rows = batch.len();
    let inv_rows = 1.0 / rows as f64;
    let mut grads = vec![0.0; params.len()];
    let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];

    // Seed: gradient of the objective with respect to its operand.
    let last = nodes.len() - 1;
    let out = graph.output_node();
    let z = &values[out];
    let cols = z.shape[1];
    let mut seed = vec![0.0; z.data.len()];
    match &nodes[last] {
        Node::SoftmaxCrossEntropy { .. }
        | Node::LogLikelihood {
            family: Likelihood::Categorical,
            ..
        } => {
            let Labels::Classes(labels) = batch.labels() else {
                unreachable!("checked in forward")
            };
            let sign = if matches!(nodes[last], Node::SoftmaxCrossEntropy { .. }) {
                1.0
            } else {
                -1.0
            };
            for r in 0..rows {
                let s = &mut seed[r * cols..(r + 1) * cols];
                softmax_into(z.row(r), s);
                s[labels[r]] -= 1.0;
                for v in s.iter_mut() {
                    *v *= sign * inv_rows;
                }
            }
        }
        Node::MeanSquaredError { .. } => {
            let Labels::Targets(t) = batch.labels() else {
                unreachable!("checked in forward")
            };
            for r in 0..rows {
                seed[r] = 2.0 * (z.data[r] - t[r]) * inv_rows;
            }
        }
        Node::LogLikelihood {
            family: Likelihood::UnitGaussian,
            ..
        } => {
            let Labels::Targets(t) = batch.labels() else {
                unreachable!("checked in forward")
            };
            for r in 0..rows {
                seed[r] = (t[r] - z.data[r]) * inv_rows;
            }
        }
        _ => unreachable!("validated graph ends in an objective"),
    }
    adjoint[out] = Some(seed);

    for id in (0..last).rev() {
        let Some(dy) = adjoint[id].take() else {
            continue;
        };
        let node = &nodes[id];
        let Some(op) = node.operand() else {
            continue;
        };
        let (r, c) = values[id]
            .dims2()
            .expect("non-objective values are matrices");
        let dx: Vec<f64> = match node {
            Node::MatMul { .. } => {
                let x = &values[op];
                let inner = x.shape[1];
                let entry = params.entry(node.param().unwrap())?;
                let w = &params.values()[entry.range()];
                let gw = &mut grads[entry.range()];
                let xt = transpose(&x.data, r, inner);
                let dyt = transpose(&dy, r, c);
                for k in 0..inner {
                    let xk = &xt[k * r..(k + 1) * r];
                    for j in 0..c {
                        let dj = &dyt[j * r..(j + 1) * r];
                        gw[k * c + j] += pairwise_sum_by(r, &|b| xk[b] * dj[b]);
                    }
                }
                if matches!(nodes[op], Node::Input) {
                    continue;
                }
                let mut dx = vec![0.0; r * inner];
                for b in 0..r {
                    let dyb = &dy[b * c..(b + 1) * c];
                    for k in 0..inner {
                        let wk = &w[k * c..(k + 1) * c];
                        dx[b * inner + k] = wk.iter().zip(dyb).map(|(a, d)| a * d).sum();
                    }
                }
                dx
            }
            Node::AddBias { .. } => {
                let entry = params.entry(node.param().unwrap())?;
                let gb = &mut grads[entry.range()];
                let dyt = transpose(&dy, r, c);
                for (j, g) in gb.iter_mut().enumerate() {
                    *g += pairwise_sum(&dyt[j * r..(j + 1) * r]);
                }
                if matches!(nodes[op], Node::Input) {
                    continue;
                }
                dy
            }
            Node::Tanh { .. } => {
                let y = &values[id].data;
                dy.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect()
            }
            Node::Relu { .. } => {
                let x = &values[op].data;
                dy.iter()
                    .zip(x)
                    .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                    .collect()
            }
            _ => unreachable!("objective nodes only appear last"),
        };
        match &mut adjoint[op] {
            Some(acc) => acc.iter_mut().zip(&dx).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(dx),
        }
    }

    if !all_finite(&grads) {
        return Err(Error::NumericOverflow("gradient".into()));
    }
    Ok((loss, grads))
}

/// Step size rule for [`finite_diff_grad`].
#[derive(Clone, Copy, Debug)]
pub enum FdStep {
    Fixed(f64),
    /// `h_i = base * (1 + |w_i|)`
    Relative(f64),
}

/// Central differences `(L(w + h e_i) - L(w - h e_i)) / 2h`, one coordinate
/// at a time. Test oracle for [`forward_backward`].
pub fn finite_diff_grad(
    graph: &Graph,
    params: &ParamVector,
    batch: &Dataset,
    step: FdStep,
) -> Result<Vec<f64>> {
    let base = match step {
        FdStep::Fixed(h) | FdStep::Relative(h) => h,
    };
    if !(base > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {base}"
        )));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let w = params.values()[i];
        let h = match step {
            FdStep::Fixed(h) => h,
            FdStep::Relative(h) => h * (1.0 + w.abs()),
        };
        probe.values_mut()[i] = w + h;
        let up = graph.loss(&probe, batch)?;
        probe.values_mut()[i] = w - h;
        let down = graph.loss(&probe, batch)?;
        probe.values_mut()[i] = w;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_graph() -> Graph {
        Graph::new(vec![
            Node::Input,
            Node::MatMul {
                input: 0,
                weight: "w".into(),
            },
            Node::MeanSquaredError { prediction: 1 },
        ])
        .unwrap()
    }

    fn scalar_param(w: f64) -> ParamVector {
        let mut p = ParamVector::new();
        p.push("w", &[1, 1], 0).unwrap();
        p.values_mut()[0] = w;
        p
    }

    #[test]
    fn linear_mse_hand_value() {
        let batch = Dataset::regression(vec![1.0], 1, vec![0.0]).unwrap();
        let (loss, g) = forward_backward(&linear_graph(), &scalar_param(2.0), &batch).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(g, vec![4.0]);
    }

    #[test]
    fn exact_interpolation_gives_zero() {
        let batch = Dataset::regression(vec![1.0, -2.0, 0.5], 1, vec![3.0, -6.0, 1.5]).unwrap();
        let (loss, g) = forward_backward(&linear_graph(), &scalar_param(3.0), &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn finite_diff_of_square() {
        // (w * 1 - 0)^2 = w^2
        let batch = Dataset::regression(vec![1.0], 1, vec![0.0]).unwrap();
        let g = finite_diff_grad(
            &linear_graph(),
            &scalar_param(1.0),
            &batch,
            FdStep::Fixed(1e-4),
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn finite_diff_of_constant_loss_is_zero() {
        // relu(-w x) stays at 0 around w = 1, so the loss is locally constant.
        let graph = Graph::new(vec![
            Node::Input,
            Node::MatMul {
                input: 0,
                weight: "w".into(),
            },
            Node::Relu { input: 1 },
            Node::MeanSquaredError { prediction: 2 },
        ])
        .unwrap();
        let batch = Dataset::regression(vec![-1.0, -2.0], 1, vec![0.5, 0.5]).unwrap();
        let g = finite_diff_grad(&graph, &scalar_param(1.0), &batch, FdStep::Fixed(1e-4)).unwrap();
        assert_eq!(g, vec![0.0]);
        assert!(finite_diff_grad(&graph, &scalar_param(1.0), &batch, FdStep::Fixed(0.0)).is_err());
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut p = ParamVector::new();
        p.push("w", &[3, 1], 0).unwrap();
        let batch = Dataset::regression(vec![1.0, 2.0], 2, vec![0.0]).unwrap();
        let err = forward_backward(&linear_graph(), &p, &batch).unwrap_err();
        match err {
            Error::ShapeMismatch { node, .. } => assert_eq!(node, "#1 matmul(w)"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let batch = Dataset::regression(vec![1.0], 1, vec![0.0]).unwrap();
        let err = forward_backward(&linear_graph(), &scalar_param(1e300), &batch).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn graph_structure_is_validated() {
        assert!(Graph::new(vec![]).is_err());
        assert!(Graph::new(vec![Node::Input, Node::Tanh { input: 0 }]).is_err());
        assert!(Graph::new(vec![
            Node::Input,
            Node::Tanh { input: 2 },
            Node::MeanSquaredError { prediction: 1 }
        ])
        .is_err());
        assert!(Graph::new(vec![
            Node::Input,
            Node::MeanSquaredError { prediction: 0 },
            Node::MeanSquaredError { prediction: 0 }
        ])
        .is_err());
        let g = linear_graph();
        assert!(g.check_params(&ParamVector::new()).is_err());
        assert!(g.check_params(&scalar_param(0.0)).is_ok());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }
}
