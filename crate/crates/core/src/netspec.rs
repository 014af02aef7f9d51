//! The VoxResNet architecture: a declarative layer schedule, its parameter
//! layout, and the forward pass producing four auxiliary classifiers plus the
//! fused final classifier.
//!
//! Backbone (channel counts at `width_scale = 1`):
//!
//! ```text
//! conv(32) → BN,ReLU → conv(32) → BN,ReLU ─────────────────────────────── C1
//!   → conv(64,/2) → VoxRes(64) ×2 → BN,ReLU ──────────────────────────── C2 (deconv ×2)
//!   → conv(64,/2) → VoxRes(64) ×2 → BN,ReLU ──────────────────────────── C3 (deconv ×4)
//!   → conv(64,/2) → VoxRes(64) ×2 → BN,ReLU ──────────────────────────── C4 (deconv ×4, ×2)
//! ```
//!
//! Each head ends in `conv 3³ → ReLU → conv 1³` to `num_classes` logits at
//! full resolution. That is 17 backbone convs plus 8 head convs (25) and 4
//! deconvs. The final logits are the elementwise sum of the four head logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{softmax_channels, Mode, RunningStats, BN_EPSILON};
use crate::tensor::{ConvSpec, Real, Tensor};

/// Spatial extents must be multiples of this (three stride-2 stages).
pub const DOWNSAMPLE: usize = 8;
pub const NUM_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    DeconvWeight,
    Bias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    /// Whether the L2 regularizer covers this parameter.
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::DeconvWeight)
    }

    fn tag(self) -> &'static str {
        match self {
            ParamKind::ConvWeight => "conv_weight",
            ParamKind::DeconvWeight => "deconv_weight",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Fan-in used by the He-normal initializer (weights only).
    pub fan_in: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnInfo {
    pub name: String,
    pub channels: usize,
}

/// Allocates parameter and batch-norm slots in build order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    pub params: Vec<ParamInfo>,
    pub bn: Vec<BnInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub spec: ConvSpec,
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeconvLayer {
    pub name: String,
    pub in_channels: usize,
    pub spec: ConvSpec,
    pub weight: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub name: String,
    pub channels: usize,
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> usize {
        self.params.push(ParamInfo {
            name,
            kind,
            shape,
            fan_in,
        });
        self.params.len() - 1
    }

    pub fn add_conv(&mut self, name: &str, in_channels: usize, spec: ConvSpec) -> ConvLayer {
        let [kd, kh, kw] = spec.kernel;
        let fan_in = in_channels * spec.kernel_volume();
        let weight = self.push(
            format!("{name}.weight"),
            ParamKind::ConvWeight,
            vec![spec.out_channels, in_channels, kd, kh, kw],
            fan_in,
        );
        let bias = spec
            .has_bias
            .then(|| self.push(format!("{name}.bias"), ParamKind::Bias, vec![spec.out_channels], 0));
        ConvLayer {
            name: name.to_string(),
            in_channels,
            spec,
            weight,
            bias,
        }
    }

    pub fn add_deconv(&mut self, name: &str, in_channels: usize, spec: ConvSpec) -> DeconvLayer {
        let [kd, kh, kw] = spec.kernel;
        // Each output voxel sees kernel_volume / stride³ input taps per channel.
        let stride_vol: usize = spec.stride.iter().product();
        let fan_in = (in_channels * spec.kernel_volume() / stride_vol).max(1);
        let weight = self.push(
            format!("{name}.weight"),
            ParamKind::DeconvWeight,
            vec![in_channels, spec.out_channels, kd, kh, kw],
            fan_in,
        );
        DeconvLayer {
            name: name.to_string(),
            in_channels,
            spec,
            weight,
        }
    }

    pub fn add_bn(&mut self, name: &str, channels: usize) -> BnLayer {
        let gamma = self.push(format!("{name}.gamma"), ParamKind::BnGamma, vec![channels], 0);
        let beta = self.push(format!("{name}.beta"), ParamKind::BnBeta, vec![channels], 0);
        self.bn.push(BnInfo {
            name: name.to_string(),
            channels,
        });
        BnLayer {
            name: name.to_string(),
            channels,
            gamma,
            beta,
            stats: self.bn.len() - 1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

/// Pre-activation residual unit: `x + conv(relu(bn(conv(relu(bn(x))))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxResModuleSpec {
    pub name: String,
    pub channels: usize,
    pub bn1: BnLayer,
    pub conv1: ConvLayer,
    pub bn2: BnLayer,
    pub conv2: ConvLayer,
}

impl VoxResModuleSpec {
    pub fn new(name: &str, channels: usize, layout: &mut ParamLayout) -> Self {
        let spec = ConvSpec::cubic(channels, 3, 1, 1);
        Self {
            name: name.to_string(),
            channels,
            bn1: layout.add_bn(&format!("{name}.bn1"), channels),
            conv1: layout.add_conv(&format!("{name}.conv1"), channels, spec),
            bn2: layout.add_bn(&format!("{name}.bn2"), channels),
            conv2: layout.add_conv(&format!("{name}.conv2"), channels, spec),
        }
    }

    /// Records the unit on `g`; returns `(output, residual_branch)`.
    pub fn forward_graph<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: NodeId) -> Result<(NodeId, NodeId)> {
        let channels = ctx.graph.value(x).shape().get(1).copied().unwrap_or(0);
        if channels != self.channels {
            return Err(Error::shape(format!("{} input channels", self.name), self.channels, channels));
        }
        let h = ctx.bn_relu(&self.bn1, x)?;
        let h = ctx.conv(&self.conv1, h)?;
        let h = ctx.bn_relu(&self.bn2, h)?;
        let branch = ctx.conv(&self.conv2, h)?;
        let out = ctx.graph.add(x, branch)?;
        Ok((out, branch))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneEntry {
    Conv(ConvLayer),
    BnRelu(BnLayer),
    VoxRes(VoxResModuleSpec),
    /// The current feature map feeds head `index`.
    Tap(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub name: String,
    /// Downsampling factor of the tapped feature map.
    pub scale: usize,
    pub deconvs: Vec<DeconvLayer>,
    pub conv: ConvLayer,
    pub classifier: ConvLayer,
}

/// The complete layer schedule of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub num_modalities: usize,
    pub num_classes: usize,
    pub width_scale: f64,
    pub backbone: Vec<BackboneEntry>,
    pub heads: Vec<HeadSpec>,
    pub layout: ParamLayout,
}

fn scaled_channels(base: usize, width_scale: f64) -> usize {
    ((base as f64 * width_scale).round() as usize).max(2)
}

/// Builds the canonical VoxResNet schedule.
///
/// `num_modalities` is the input channel count of the first convolution.
pub fn build_voxresnet(num_modalities: usize, num_classes: usize, width_scale: f64) -> Result<NetworkSpec> {
    if num_modalities == 0 {
        return Err(Error::invalid("num_modalities must be >= 1"));
    }
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be >= 2"));
    }
    if !(width_scale.is_finite() && width_scale > 0.0) || (32.0 * width_scale).round() < 1.0 {
        return Err(Error::invalid(format!(
            "width_scale {width_scale} yields zero channels"
        )));
    }
    let narrow = scaled_channels(32, width_scale);
    let wide = scaled_channels(64, width_scale);
    let head_width = scaled_channels(32, width_scale);
    let same = |c| ConvSpec::cubic(c, 3, 1, 1);
    let down = |c| ConvSpec::cubic(c, 3, 2, 1);

    let mut layout = ParamLayout::new();
    let mut backbone = vec![
        BackboneEntry::Conv(layout.add_conv("conv1a", num_modalities, same(narrow))),
        BackboneEntry::BnRelu(layout.add_bn("bn1a", narrow)),
        BackboneEntry::Conv(layout.add_conv("conv1b", narrow, same(narrow))),
        BackboneEntry::BnRelu(layout.add_bn("bn1b", narrow)),
        BackboneEntry::Tap(0),
    ];

    let mut in_ch = narrow;
    for (stage, conv_name) in [(2, "conv1c"), (3, "conv4"), (4, "conv7")] {
        backbone.push(BackboneEntry::Conv(layout.add_conv(conv_name, in_ch, down(wide))));
        for unit in 0..2 {
            let name = format!("voxres{}", 3 * (stage - 2) + 2 + unit);
            backbone.push(BackboneEntry::VoxRes(VoxResModuleSpec::new(&name, wide, &mut layout)));
        }
        backbone.push(BackboneEntry::BnRelu(layout.add_bn(&format!("bn{stage}"), wide)));
        backbone.push(BackboneEntry::Tap(stage - 1));
        in_ch = wide;
    }

    // (head, tapped scale, deconv upsampling factors)
    let plan: [(usize, usize, &[usize]); NUM_HEADS] = [(1, 1, &[]), (2, 2, &[2]), (3, 4, &[4]), (4, 8, &[4, 2])];
    let mut heads = Vec::with_capacity(NUM_HEADS);
    for (index, scale, ups) in plan {
        let name = format!("c{index}");
        let mut ch = if scale == 1 { narrow } else { wide };
        let mut deconvs = Vec::new();
        for (j, &factor) in ups.iter().enumerate() {
            let spec = ConvSpec::cubic(head_width, 2 * factor, factor, factor / 2);
            deconvs.push(layout.add_deconv(&format!("{name}.deconv{}", j + 1), ch, spec));
            ch = head_width;
        }
        let conv = layout.add_conv(&format!("{name}.conv"), ch, same(head_width).with_bias(true));
        let classifier = layout.add_conv(
            &format!("{name}.classifier"),
            head_width,
            ConvSpec::cubic(num_classes, 1, 1, 0).with_bias(true),
        );
        heads.push(HeadSpec {
            name,
            scale,
            deconvs,
            conv,
            classifier,
        });
    }

    Ok(NetworkSpec {
        num_modalities,
        num_classes,
        width_scale,
        backbone,
        heads,
        layout,
    })
}

impl NetworkSpec {
    fn backbone_convs(&self) -> impl Iterator<Item = &ConvLayer> {
        self.backbone.iter().flat_map(|e| match e {
            BackboneEntry::Conv(c) => vec![c],
            BackboneEntry::VoxRes(m) => vec![&m.conv1, &m.conv2],
            _ => vec![],
        })
    }

    /// Every conv3d layer, backbone first.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut out: Vec<&ConvLayer> = self.backbone_convs().collect();
        for h in &self.heads {
            out.push(&h.conv);
            out.push(&h.classifier);
        }
        out
    }

    pub fn conv_count(&self) -> usize {
        self.conv_layers().len()
    }

    pub fn deconv_count(&self) -> usize {
        self.heads.iter().map(|h| h.deconvs.len()).sum()
    }

    /// Backbone convolutions with stride 2 on every axis.
    pub fn strided_conv_count(&self) -> usize {
        self.backbone_convs().filter(|c| c.spec.stride == [2, 2, 2]).count()
    }

    pub fn voxres_modules(&self) -> impl Iterator<Item = &VoxResModuleSpec> {
        self.backbone.iter().filter_map(|e| match e {
            BackboneEntry::VoxRes(m) => Some(m),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    /// Input channel count of the first convolution.
    pub fn input_channels(&self) -> usize {
        self.num_modalities
    }

    /// Radius (in voxels) of the input window that determines one voxel of head C1.
    pub fn c1_receptive_radius(&self) -> usize {
        let mut radius = 0;
        for entry in &self.backbone {
            match entry {
                BackboneEntry::Conv(c) => radius += (c.spec.kernel[0] - 1) / 2,
                BackboneEntry::VoxRes(m) => {
                    radius += (m.conv1.spec.kernel[0] - 1) / 2 + (m.conv2.spec.kernel[0] - 1) / 2;
                }
                BackboneEntry::Tap(0) => break,
                _ => {}
            }
        }
        let head = &self.heads[0];
        radius + (head.conv.spec.kernel[0] - 1) / 2 + (head.classifier.spec.kernel[0] - 1) / 2
    }

    /// Canonical text description; identical specs describe identically.
    pub fn describe(&self) -> String {
        let mut out = format!(
            "voxresnet modalities={} classes={} width_scale={}\n",
            self.num_modalities, self.num_classes, self.width_scale
        );
        for p in &self.layout.params {
            out.push_str(&format!("param {} {} {:?}\n", p.name, p.kind.tag(), p.shape));
        }
        for b in &self.layout.bn {
            out.push_str(&format!("bn {} {}\n", b.name, b.channels));
        }
        for c in self.conv_layers() {
            out.push_str(&format!(
                "conv {} k={:?} s={:?} p={:?}\n",
                c.name, c.spec.kernel, c.spec.stride, c.spec.padding
            ));
        }
        for h in &self.heads {
            for d in &h.deconvs {
                out.push_str(&format!(
                    "deconv {} k={:?} s={:?} p={:?}\n",
                    d.name, d.spec.kernel, d.spec.stride, d.spec.padding
                ));
            }
        }
        out
    }

    /// SHA-256 of [`NetworkSpec::describe`], hex encoded.
    pub fn schedule_hash(&self) -> String {
        hex::encode(Sha256::digest(self.describe().as_bytes()))
    }

    /// Records the forward pass on `graph` using already-registered parameter nodes.
    pub fn forward_graph<T: Real>(
        &self,
        graph: &mut Graph<T>,
        params: &[NodeId],
        stats: &[RunningStats<T>],
        input: NodeId,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        if params.len() != self.layout.params.len() {
            return Err(Error::shape("parameter count", self.layout.params.len(), params.len()));
        }
        if stats.len() != self.layout.bn.len() {
            return Err(Error::shape("batchnorm layers", self.layout.bn.len(), stats.len()));
        }
        let [_, c, d, h, w] = graph.value(input).dims5()?;
        if c != self.num_modalities {
            return Err(Error::shape("input channels", self.num_modalities, c));
        }
        let extents = [d, h, w];
        if let Some(axis) = extents.iter().position(|&e| e < DOWNSAMPLE) {
            return Err(Error::invalid(format!(
                "spatial extent {} on axis {axis} is below the minimum of {DOWNSAMPLE}",
                extents[axis]
            )));
        }
        let padded = extents.map(|e| e.div_ceil(DOWNSAMPLE) * DOWNSAMPLE);
        let input = if padded != extents {
            let x = graph.value(input).pad_spatial_reflect(padded)?;
            graph.input(x)
        } else {
            input
        };

        let mut ctx = ForwardCtx {
            graph,
            params,
            stats,
            mode,
            batch_stats: vec![None; self.layout.bn.len()],
        };
        let mut cur = input;
        let mut taps = [None; NUM_HEADS];
        for entry in &self.backbone {
            cur = match entry {
                BackboneEntry::Conv(layer) => ctx.conv(layer, cur)?,
                BackboneEntry::BnRelu(bn) => ctx.bn_relu(bn, cur)?,
                BackboneEntry::VoxRes(m) => m.forward_graph(&mut ctx, cur)?.0,
                BackboneEntry::Tap(i) => {
                    taps[*i] = Some(cur);
                    cur
                }
            };
        }

        let mut aux = Vec::with_capacity(NUM_HEADS);
        for (head, tap) in self.heads.iter().zip(taps) {
            let mut h = tap.expect("every head is tapped");
            for d in &head.deconvs {
                h = ctx.graph.deconv3d(h, params[d.weight], &d.spec)?;
            }
            h = ctx.conv(&head.conv, h)?;
            h = ctx.graph.relu(h);
            h = ctx.conv(&head.classifier, h)?;
            if padded != extents {
                h = ctx.graph.crop(h, [0, 0, 0], extents)?;
            }
            aux.push(h);
        }
        let mut final_logits = aux[0];
        for &a in &aux[1..] {
            final_logits = ctx.graph.add(final_logits, a)?;
        }
        Ok(ForwardPass {
            aux_logits: [aux[0], aux[1], aux[2], aux[3]],
            final_logits,
            batch_stats: ctx.batch_stats,
        })
    }
}

/// State threaded through one forward recording.
pub struct ForwardCtx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a [NodeId],
    pub stats: &'a [RunningStats<T>],
    pub mode: Mode,
    /// Batch `(mean, var)` per batch-norm layer, filled in train mode.
    pub batch_stats: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> ForwardCtx<'_, T> {
    pub fn conv(&mut self, layer: &ConvLayer, x: NodeId) -> Result<NodeId> {
        let bias = layer.bias.map(|b| self.params[b]);
        self.graph.conv3d(x, self.params[layer.weight], bias, &layer.spec)
    }

    pub fn bn_relu(&mut self, bn: &BnLayer, x: NodeId) -> Result<NodeId> {
        let (y, batch) = self.graph.batchnorm(
            x,
            self.params[bn.gamma],
            self.params[bn.beta],
            self.mode,
            &self.stats[bn.stats],
            T::from_f64_lossy(BN_EPSILON),
        )?;
        self.batch_stats[bn.stats] = batch;
        Ok(self.graph.relu(y))
    }
}

/// Node handles of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    pub aux_logits: [NodeId; NUM_HEADS],
    pub final_logits: NodeId,
    pub batch_stats: Vec<Option<(Vec<T>, Vec<T>)>>,
}

/// Network outputs: logits retained for the loss plus softmax probabilities.
#[derive(Clone, Debug)]
pub struct AuxOutputs<T> {
    pub final_logits: NodeId,
    pub aux_logits: [NodeId; NUM_HEADS],
    pub final_probs: Tensor<T>,
    pub aux_probs: Vec<Tensor<T>>,
}

impl<T: Real> ForwardPass<T> {
    pub fn outputs(&self, graph: &Graph<T>) -> Result<AuxOutputs<T>> {
        Ok(AuxOutputs {
            final_logits: self.final_logits,
            aux_logits: self.aux_logits,
            final_probs: softmax_channels(graph.value(self.final_logits))?,
            aux_probs: self
                .aux_logits
                .iter()
                .map(|&a| softmax_channels(graph.value(a)))
                .collect::<Result<_>>()?,
        })
    }
}

/// Learnable tensors θ plus the batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Tensor<T>>,
    pub bn_stats: Vec<RunningStats<T>>,
}

impl<T: Real> Params<T> {
    /// He-normal weights, zero biases, BN γ = 1, β = 0, fresh running stats.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::ConvWeight | ParamKind::DeconvWeight => {
                    let std = (2.0 / p.fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    Tensor::from_fn(&p.shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
                }
                ParamKind::Bias | ParamKind::BnBeta => Tensor::zeros(&p.shape),
                ParamKind::BnGamma => Tensor::full(&p.shape, T::one()),
            })
            .collect();
        Self {
            tensors,
            bn_stats: layout.bn.iter().map(|b| RunningStats::fresh(b.channels)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            bn_stats: self.bn_stats.iter().map(RunningStats::cast).collect(),
        }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, batch: &[Option<(Vec<T>, Vec<T>)>], momentum: T) {
        for (stats, b) in self.bn_stats.iter_mut().zip(batch) {
            if let Some((mean, var)) = b {
                stats.update(mean, var, momentum);
            }
        }
    }

    pub fn check_layout(&self, layout: &ParamLayout) -> Result<()> {
        if self.tensors.len() != layout.params.len() {
            return Err(Error::shape("parameter tensors", layout.params.len(), self.tensors.len()));
        }
        for (t, info) in self.tensors.iter().zip(&layout.params) {
            if t.shape() != info.shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    info.name,
                    t.shape(),
                    info.shape
                )));
            }
        }
        if self.bn_stats.len() != layout.bn.len() {
            return Err(Error::shape("batchnorm statistics", layout.bn.len(), self.bn_stats.len()));
        }
        Ok(())
    }
}

/// Registers every parameter of `params` on `graph` (id = layout index).
pub fn register_params<T: Real>(graph: &mut Graph<T>, params: &Params<T>) -> Result<Vec<NodeId>> {
    params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| graph.param(i, t.clone()))
        .collect()
}

/// One full forward pass on a fresh graph.
pub fn forward<T: Real>(
    net: &NetworkSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Graph<T>, ForwardPass<T>, AuxOutputs<T>)> {
    params.check_layout(&net.layout)?;
    let mut graph = Graph::new();
    let nodes = register_params(&mut graph, params)?;
    let input = graph.input(x.clone());
    let pass = net.forward_graph(&mut graph, &nodes, &params.bn_stats, input, mode)?;
    let outputs = pass.outputs(&graph)?;
    Ok((graph, pass, outputs))
}

/// Runs a standalone VoxRes unit; returns `(x + F(x), F(x))`.
pub fn voxres_forward<T: Real>(
    module: &VoxResModuleSpec,
    params: &Params<T>,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut graph = Graph::new();
    let nodes = register_params(&mut graph, params)?;
    let input = graph.input(x.clone());
    let mut ctx = ForwardCtx {
        graph: &mut graph,
        params: &nodes,
        stats: &params.bn_stats,
        mode,
        batch_stats: vec![None; params.bn_stats.len()],
    };
    let (out, branch) = module.forward_graph(&mut ctx, input)?;
    Ok((graph.value(out).clone(), graph.value(branch).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_counts() {
        let net = build_voxresnet(6, 4, 1.0).unwrap();
        assert_eq!(net.conv_count(), 25);
        assert_eq!(net.deconv_count(), 4);
        assert_eq!(net.strided_conv_count(), 3);
        assert_eq!(net.heads[3].scale, 8);
        assert_eq!(net.voxres_modules().count(), 6);
        assert_eq!(net.c1_receptive_radius(), 3);
    }

    #[test]
    fn rejects_degenerate_arguments() {
        assert!(build_voxresnet(0, 4, 1.0).is_err());
        assert!(build_voxresnet(1, 1, 1.0).is_err());
        assert!(build_voxresnet(1, 2, 0.0).is_err());
        assert!(build_voxresnet(1, 2, 1e-3).is_err());
        let tiny = build_voxresnet(1, 2, 0.05).unwrap();
        assert!(tiny.conv_layers().iter().all(|c| c.spec.out_channels >= 2));
    }

    #[test]
    fn schedule_hash_tracks_structure() {
        let a = build_voxresnet(6, 4, 0.25).unwrap();
        let b = build_voxresnet(6, 4, 0.25).unwrap();
        let c = build_voxresnet(7, 4, 0.25).unwrap();
        assert_eq!(a.schedule_hash(), b.schedule_hash());
        assert_ne!(a.schedule_hash(), c.schedule_hash());
    }

    #[test]
    fn rejects_small_inputs() {
        let net = build_voxresnet(1, 2, 0.0625).unwrap();
        let params = Params::<f32>::init(&net.layout, 0);
        let x = Tensor::zeros(&[1, 1, 8, 8, 6]);
        assert!(forward(&net, &params, &x, Mode::Infer).is_err());
    }

    #[test]
    fn odd_extents_are_padded_and_cropped() {
        let net = build_voxresnet(1, 3, 0.0625).unwrap();
        let params = Params::<f32>::init(&net.layout, 1);
        let x = Tensor::from_fn(&[1, 1, 9, 12, 10], |i| (i % 7) as f32);
        let (_, _, out) = forward(&net, &params, &x, Mode::Infer).unwrap();
        assert_eq!(out.final_probs.shape(), &[1, 3, 9, 12, 10]);
    }
}
