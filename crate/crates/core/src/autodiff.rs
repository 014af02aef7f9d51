//! Tape-based reverse-mode differentiation over the tensor kernels.
//!
//! A [`Graph`] records every operation in execution order together with the
//! values its backward needs. [`Graph::backward`] walks the tape in reverse
//! and returns gradients for every registered parameter.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormSaved, Mode, RunningStats};
use crate::tensor::{ConvSpec, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<T> {
    Input,
    Param(usize),
    Conv3d(ConvSpec),
    Deconv3d(ConvSpec),
    BatchNormTrain(BatchNormSaved<T>),
    BatchNormInfer { stats: RunningStats<T>, eps: T },
    Relu,
    Add,
    Scale(T),
    Sum,
    SumSquares,
    DotConst(Tensor<T>),
    SoftmaxCrossEntropy { labels: Arc<[u8]>, probs: Tensor<T> },
    Crop { start: [usize; 3] },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradStore<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> GradStore<T> {
    pub fn get(&self, param: usize) -> Option<&Tensor<T>> {
        self.grads.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<usize, Tensor<T>> {
        self.grads
    }
}

/// Record of differentiable operations and the parameters they read.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<usize, NodeId>,
    /// When set, ReLUs apply these gates (in tape order) instead of `x > 0`.
    frozen_gates: Option<(Arc<[bool]>, usize)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen_gates: None,
        }
    }

    /// A graph whose ReLUs reuse the gate pattern of another evaluation
    /// (see [`Graph::relu_pattern`]). The frozen function agrees with the
    /// real one wherever no ReLU input changes sign, and has the same
    /// derivative at the point the pattern was taken from.
    pub fn with_frozen_gates(gates: Arc<[bool]>) -> Self {
        Self {
            frozen_gates: Some((gates, 0)),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Shapes of every recorded value, in tape order.
    pub fn node_shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    /// Which side of zero every ReLU input sits on, in tape order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu))
            .flat_map(|n| self.nodes[n.inputs[0].0].value.data().iter().map(|&v| v > T::zero()))
            .collect()
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    /// A trainable leaf identified by `id`.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Result<NodeId> {
        if self.params.contains_key(&id) {
            return Err(Error::invalid(format!("parameter {id} registered twice")));
        }
        let node = self.push(Op::Param(id), vec![], value);
        self.params.insert(id, node);
        Ok(node)
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: &ConvSpec) -> Result<NodeId> {
        let value = kernels::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv3d(*spec), inputs, value))
    }

    pub fn deconv3d(&mut self, x: NodeId, w: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let value = kernels::deconv3d(self.value(x), self.value(w), spec)?;
        Ok(self.push(Op::Deconv3d(*spec), vec![x, w], value))
    }

    /// Batch normalization; in train mode also returns the batch `(mean, var)`.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: Mode,
        stats: &RunningStats<T>,
        eps: T,
    ) -> Result<(NodeId, Option<(Vec<T>, Vec<T>)>)> {
        match mode {
            Mode::Train => {
                let (y, saved) = kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
                let batch = (saved.batch_mean.clone(), saved.batch_var.clone());
                Ok((self.push(Op::BatchNormTrain(saved), vec![x, gamma, beta], y), Some(batch)))
            }
            Mode::Infer => {
                let y = kernels::batchnorm_infer(self.value(x), self.value(gamma), self.value(beta), stats, eps)?;
                let op = Op::BatchNormInfer {
                    stats: stats.clone(),
                    eps,
                };
                Ok((self.push(op, vec![x, gamma, beta], y), None))
            }
        }
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = match &mut self.frozen_gates {
            None => kernels::relu(self.value(x)),
            Some((gates, at)) => {
                let input = &self.nodes[x.0].value;
                let open = gates.get(*at..*at + input.len()).expect("frozen gates match the tape");
                *at += input.len();
                let mut v = input.clone();
                v.data_mut().iter_mut().zip(open).filter(|(_, &o)| !o).for_each(|(a, _)| *a = T::zero());
                v
            }
        };
        self.push(Op::Relu, vec![x], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).scale(factor);
        self.push(Op::Scale(factor), vec![x], value)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value)
    }

    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum_squares());
        self.push(Op::SumSquares, vec![x], value)
    }

    /// `⟨x, c⟩` for a constant tensor `c`.
    pub fn dot_const(&mut self, x: NodeId, c: Tensor<T>) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).dot(&c)?);
        Ok(self.push(Op::DotConst(c), vec![x], value))
    }

    /// Mean voxel cross-entropy of channel logits against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: Arc<[u8]>) -> Result<NodeId> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), &labels)?;
        Ok(self.push(Op::SoftmaxCrossEntropy { labels, probs }, vec![logits], Tensor::scalar(loss)))
    }

    pub fn crop(&mut self, x: NodeId, start: [usize; 3], extent: [usize; 3]) -> Result<NodeId> {
        let value = self.value(x).crop_spatial(start, extent)?;
        Ok(self.push(Op::Crop { start }, vec![x], value))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every registered parameter receives a gradient; parameters the loss
    /// does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
            let mut push = |i: usize, t: Tensor<T>| accumulate(&mut grads, node.inputs[i], t);
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.insert(*id, g);
                }
                Op::Conv3d(spec) => {
                    let x = self.value(node.inputs[0]);
                    let w = self.value(node.inputs[1]);
                    if wants(0) {
                        let ext = [x.shape()[2], x.shape()[3], x.shape()[4]];
                        push(0, kernels::conv3d_backward_input(&g, w, spec, ext)?);
                    }
                    if wants(1) {
                        push(1, kernels::conv3d_backward_weight(x, &g, spec)?);
                    }
                    if node.inputs.len() > 2 && wants(2) {
                        push(2, kernels::conv3d_backward_bias(&g)?);
                    }
                }
                Op::Deconv3d(spec) => {
                    let x = self.value(node.inputs[0]);
                    let w = self.value(node.inputs[1]);
                    if wants(0) {
                        push(0, kernels::deconv3d_backward_input(&g, w, spec)?);
                    }
                    if wants(1) {
                        push(1, kernels::deconv3d_backward_weight(x, &g, spec)?);
                    }
                }
                Op::BatchNormTrain(saved) => {
                    let gamma = self.value(node.inputs[1]);
                    let (dx, dgamma, dbeta) = kernels::batchnorm_train_backward(&g, gamma, saved)?;
                    push(0, dx);
                    push(1, dgamma);
                    push(2, dbeta);
                }
                Op::BatchNormInfer { stats, eps } => {
                    let x = self.value(node.inputs[0]);
                    let gamma = self.value(node.inputs[1]);
                    let (dx, dgamma, dbeta) = kernels::batchnorm_infer_backward(&g, x, gamma, stats, *eps)?;
                    push(0, dx);
                    push(1, dgamma);
                    push(2, dbeta);
                }
                Op::Relu => {
                    push(0, kernels::relu_backward(&g, self.value(node.inputs[0]))?);
                }
                Op::Add => {
                    push(0, g.clone());
                    push(1, g);
                }
                Op::Scale(factor) => {
                    push(0, g.scale(*factor));
                }
                Op::Sum => {
                    let x = self.value(node.inputs[0]);
                    push(0, Tensor::full(x.shape(), g.item()));
                }
                Op::SumSquares => {
                    let two_g = g.item() + g.item();
                    push(0, self.value(node.inputs[0]).scale(two_g));
                }
                Op::DotConst(c) => {
                    push(0, c.scale(g.item()));
                }
                Op::SoftmaxCrossEntropy { labels, probs } => {
                    push(0, kernels::softmax_cross_entropy_backward(probs, labels, g.item()));
                }
                Op::Crop { start } => {
                    let x = self.value(node.inputs[0]);
                    push(0, uncrop(&g, x.shape(), *start)?);
                }
            }
        }

        for (&id, &node) in &self.params {
            out.entry(id)
                .or_insert_with(|| Tensor::zeros(self.nodes[node.0].value.shape()));
        }
        Ok(GradStore { grads: out })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, t: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(a, &b)| *a += b),
        slot => *slot = Some(t),
    }
}

/// Scatters a cropped gradient back into a zero tensor of the full shape.
fn uncrop<T: Real>(g: &Tensor<T>, full: &[usize], start: [usize; 3]) -> Result<Tensor<T>> {
    let [n, c, ed, eh, ew] = g.dims5()?;
    let (d, h, w) = (full[2], full[3], full[4]);
    let mut out = Tensor::zeros(full);
    let dst = out.data_mut();
    let src = g.data();
    for plane in 0..n * c {
        for z in 0..ed {
            for y in 0..eh {
                let s = ((plane * ed + z) * eh + y) * ew;
                let t = ((plane * d + start[0] + z) * h + start[1] + y) * w + start[2];
                dst[t..t + ew].copy_from_slice(&src[s..s + ew]);
            }
        }
    }
    Ok(out)
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter (always including
    /// the one with the largest analytic gradient). `None` checks all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: usize,
    pub coords_checked: usize,
    /// Coordinates whose `±step` probe moved some ReLU input across zero.
    /// Every probe runs with the ReLU gates frozen at the unperturbed
    /// point, so these still give a valid difference quotient.
    pub coords_gated: usize,
    pub max_rel_error: f64,
    /// Coordinate with the worst relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords_checked).sum()
    }

    pub fn coords_gated(&self) -> usize {
        self.params.iter().map(|p| p.coords_gated).sum()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(params: &[Tensor<f64>], build: &F, gates: Option<&Arc<[bool]>>) -> Result<(Graph<f64>, NodeId)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = match gates {
        Some(g) => Graph::with_frozen_gates(g.clone()),
        None => Graph::new(),
    };
    let nodes = params
        .iter()
        .enumerate()
        .map(|(i, p)| graph.param(i, p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut graph, &nodes)?;
    Ok((graph, loss))
}

/// Compares reverse-mode gradients with central finite differences in `f64`.
///
/// `build` receives the graph and one node per entry of `params` (parameter
/// id = position) and must return a scalar loss node.
///
/// The `±step` probes keep every ReLU gate where it was at the unperturbed
/// parameters. Without that, a probe that pushes one of thousands of
/// pre-activations across zero measures the kink instead of the derivative.
/// The report counts how many coordinates needed this.
pub fn grad_check<F>(params: &[Tensor<f64>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (graph, loss) = evaluate(params, &build, None)?;
    let analytic = graph.backward(loss)?;
    let pattern: Arc<[bool]> = graph.relu_pattern().into();
    drop(graph);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<f64>> = params.to_vec();

    for (pid, param) in params.iter().enumerate() {
        let grad = analytic.get(pid).expect("every parameter has a gradient");
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < param.len() => {
                let largest = (0..grad.len())
                    .max_by(|&a, &b| grad.data()[a].abs().total_cmp(&grad.data()[b].abs()))
                    .unwrap_or(0);
                let mut picked: Vec<usize> = sample(&mut rng, param.len(), k.max(1)).into_vec();
                if !picked.contains(&largest) {
                    picked[0] = largest;
                }
                picked.sort_unstable();
                picked
            }
            _ => (0..param.len()).collect(),
        };
        let mut check = ParamCheck {
            param: pid,
            coords_checked: coords.len(),
            coords_gated: 0,
            max_rel_error: 0.0,
            worst_index: coords.first().copied().unwrap_or(0),
        };
        for &i in &coords {
            let original = param.data()[i];
            let mut probe = |value: f64| -> Result<(f64, bool)> {
                work[pid].data_mut()[i] = value;
                let (g, l) = evaluate(&work, &build, Some(&pattern))?;
                let crossed = g.relu_pattern().as_slice() != &pattern[..];
                Ok((g.value(l).item(), crossed))
            };
            let (plus, crossed_plus) = probe(original + opts.step)?;
            let (minus, crossed_minus) = probe(original - opts.step)?;
            work[pid].data_mut()[i] = original;
            if crossed_plus || crossed_minus {
                check.coords_gated += 1;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(grad.data()[i], numeric);
            if err > check.max_rel_error || !err.is_finite() {
                check.max_rel_error = err;
                check.worst_index = i;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: opts.tolerance,
    })
}
