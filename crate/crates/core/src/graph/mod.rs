//! Model representation: an ordered layer list with channel wiring metadata.
//!
//! Graphs are immutable during evaluation; structural edits (pruning, batch
//! norm folding) build new graphs. Channels that meet at a residual add are
//! grouped so that structural edits keep the skip connection aligned.

mod build;
pub mod io;

pub use build::{build_mini_convnet, build_mini_resnet};

use crate::error::{Error, Result};
use crate::tensor::{GradTape, Tensor, ValueId};

/// One output channel of one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FilterId {
    pub layer: usize,
    pub channel: usize,
}

impl FilterId {
    pub fn new(layer: usize, channel: usize) -> Self {
        Self { layer, channel }
    }
}

/// A single layer and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        mean: Tensor,
        var: Tensor,
        eps: f32,
    },
    Relu,
    GlobalAvgPool,
    ResidualBegin,
    ResidualEnd,
    Classifier {
        weight: Tensor,
        bias: Tensor,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "pool",
            LayerSpec::ResidualBegin => "residual_begin",
            LayerSpec::ResidualEnd => "residual_end",
            LayerSpec::Classifier { .. } => "classifier",
        }
    }

    /// Output channels (conv) or rows (dense/classifier) this layer produces.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv { kernel, .. } => Some(kernel.shape()[0]),
            LayerSpec::Dense { weight, .. } | LayerSpec::Classifier { weight, .. } => {
                Some(weight.shape()[0])
            }
            _ => None,
        }
    }

    pub fn in_channels(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv { kernel, .. } => Some(kernel.shape()[1]),
            LayerSpec::Dense { weight, .. } | LayerSpec::Classifier { weight, .. } => {
                Some(weight.shape()[1])
            }
            _ => None,
        }
    }
}

/// Channels (one per member layer) that must be pruned together to keep every
/// residual add they feed shape-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGroup {
    pub members: Vec<FilterId>,
    /// True when the group's channel space includes the raw model input, in
    /// which case it can never be pruned.
    pub anchored_to_input: bool,
}

/// Ordered layer list plus wiring metadata. The universal model value.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// Expected input as (channels, height, width).
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub baseline_accuracy: Option<f32>,
    residual_groups: Vec<ResidualGroup>,
}

/// Where each layer's input activation comes from, and which conv layers are
/// coupled through residual adds.
pub(crate) struct ChannelFlow {
    /// Per layer: indices of the conv/dense layers producing its input
    /// channels. Empty means the raw model input.
    pub input_producers: Vec<Vec<usize>>,
    /// Conv layers coupled by residual adds, one sorted set per class.
    pub coupled_classes: Vec<Vec<usize>>,
    /// Parallel to `coupled_classes`: class touches the raw input.
    pub class_anchored: Vec<bool>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, x: usize) -> usize {
        if self.parent[x] != x {
            let root = self.find(self.parent[x]);
            self.parent[x] = root;
        }
        self.parent[x]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

pub(crate) fn analyze_flow(layers: &[LayerSpec]) -> Result<ChannelFlow> {
    let n = layers.len();
    let mut uf = UnionFind::new(n);
    let mut participants: Vec<bool> = vec![false; n];
    let mut anchored_roots: Vec<bool> = vec![false; n];

    // Current channel space: producer layer indices, plus whether the raw
    // input contributes to it.
    let mut current: (Vec<usize>, bool) = (vec![], true);
    let mut stack: Vec<(Vec<usize>, bool)> = Vec::new();
    let mut input_producers = Vec::with_capacity(n);

    for (i, layer) in layers.iter().enumerate() {
        input_producers.push(current.0.clone());

        match layer {
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } | LayerSpec::Classifier { .. } => {
                current = (vec![i], false);
            }
            LayerSpec::ResidualBegin => stack.push(current.clone()),
            LayerSpec::ResidualEnd => {
                let saved = stack.pop().ok_or_else(|| {
                    Error::ResidualGroupViolation(format!(
                        "residual_end at layer {i} has no matching residual_begin"
                    ))
                })?;
                let anchored = saved.1 || current.1;
                let mut merged: Vec<usize> = saved.0.iter().chain(current.0.iter()).copied().collect();
                merged.sort_unstable();
                merged.dedup();
                for win in merged.windows(2) {
                    uf.union(win[0], win[1]);
                }
                for &p in &merged {
                    participants[p] = true;
                    if anchored {
                        anchored_roots[p] = true;
                    }
                }
                current = (merged, anchored);
            }
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(Error::ResidualGroupViolation(
            "residual_begin without matching residual_end".into(),
        ));
    }

    // Collect coupled classes among participating conv layers.
    let mut by_root: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        if participants[i] {
            let root = uf.find(i);
            by_root.entry(root).or_default().push(i);
        }
    }
    let mut coupled_classes = Vec::new();
    let mut class_anchored = Vec::new();
    for (_, members) in by_root {
        let anchored = members.iter().any(|&m| anchored_roots[m]);
        coupled_classes.push(members);
        class_anchored.push(anchored);
    }
    Ok(ChannelFlow {
        input_producers,

        coupled_classes,
        class_anchored,
    })
}

fn derive_residual_groups(layers: &[LayerSpec]) -> Result<Vec<ResidualGroup>> {
    let flow = analyze_flow(layers)?;
    let mut groups = Vec::new();
    for (class, &anchored) in flow.coupled_classes.iter().zip(&flow.class_anchored) {
        let widths: Vec<usize> = class
            .iter()
            .map(|&l| layers[l].out_channels().unwrap_or(0))
            .collect();
        let width = widths[0];
        if widths.iter().any(|&w| w != width) {
            return Err(Error::ResidualGroupViolation(format!(
                "layers {class:?} meet at a residual add with differing widths {widths:?}"
            )));
        }
        for c in 0..width {
            groups.push(ResidualGroup {
                members: class.iter().map(|&l| FilterId::new(l, c)).collect(),
                anchored_to_input: anchored,
            });
        }
    }
    Ok(groups)
}

/// Activation shape tracked by the shape-check pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActShape {
    Spatial(usize, usize, usize),
    Features(usize),
}

impl ModelGraph {
    /// Builds a graph, validating shapes end to end and deriving residual
    /// groups from the layer wiring.
    pub fn new(
        name: impl Into<String>,
        layers: Vec<LayerSpec>,
        input_shape: (usize, usize, usize),
        num_classes: usize,
    ) -> Result<Self> {
        let residual_groups = derive_residual_groups(&layers)?;
        let model = Self {
            name: name.into(),
            layers,
            input_shape,
            num_classes,
            baseline_accuracy: None,
            residual_groups,
        };
        model.shape_check(model.input_shape)?;
        Ok(model)
    }

    pub fn residual_groups(&self) -> &[ResidualGroup] {
        &self.residual_groups
    }

    pub(crate) fn flow(&self) -> Result<ChannelFlow> {
        analyze_flow(&self.layers)
    }

    /// Walks the graph symbolically and returns the output class count.
    /// Succeeds exactly when `forward` would succeed on a conforming input.
    pub fn shape_check(&self, input: (usize, usize, usize)) -> Result<usize> {
        let mut shape = ActShape::Spatial(input.0, input.1, input.2);
        let mut stack: Vec<ActShape> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape) {
                (LayerSpec::Conv { kernel, stride, padding, .. }, ActShape::Spatial(c, h, w)) => {
                    let (cout, cin, kh, kw) = (
                        kernel.shape()[0],
                        kernel.shape()[1],
                        kernel.shape()[2],
                        kernel.shape()[3],
                    );
                    if cin != c {
                        return Err(Error::ShapeMismatch {
                            op: "shape_check",
                            detail: format!("layer {i}: conv expects {cin} channels, input has {c}"),
                        });
                    }
                    if h + 2 * padding < kh || w + 2 * padding < kw {
                        return Err(Error::ShapeMismatch {
                            op: "shape_check",
                            detail: format!(
                                "layer {i}: kernel {kh}x{kw} exceeds padded input {h}x{w}"
                            ),
                        });
                    }
                    ActShape::Spatial(
                        cout,
                        (h + 2 * padding - kh) / stride + 1,
                        (w + 2 * padding - kw) / stride + 1,
                    )
                }
                (LayerSpec::BatchNorm { gamma, .. }, ActShape::Spatial(c, h, w)) => {
                    if gamma.shape()[0] != c {
                        return Err(Error::ShapeMismatch {
                            op: "shape_check",
                            detail: format!(
                                "layer {i}: batchnorm over {} channels, input has {c}",
                                gamma.shape()[0]
                            ),
                        });
                    }
                    ActShape::Spatial(c, h, w)
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::GlobalAvgPool, ActShape::Spatial(c, _, _)) => ActShape::Features(c),
                (LayerSpec::Dense { weight, .. }, ActShape::Features(f))
                | (LayerSpec::Classifier { weight, .. }, ActShape::Features(f)) => {
                    if weight.shape()[1] != f {
                        return Err(Error::ShapeMismatch {
                            op: "shape_check",
                            detail: format!(
                                "layer {i}: weight expects {} features, input has {f}",
                                weight.shape()[1]
                            ),
                        });
                    }
                    ActShape::Features(weight.shape()[0])
                }
                (LayerSpec::ResidualBegin, s) => {
                    stack.push(s);
                    s
                }
                (LayerSpec::ResidualEnd, s) => {
                    let saved = stack.pop().ok_or_else(|| {
                        Error::ResidualGroupViolation(format!(
                            "layer {i}: residual_end without begin"
                        ))
                    })?;
                    if saved != s {
                        return Err(Error::ShapeMismatch {
                            op: "shape_check",
                            detail: format!("layer {i}: residual join {saved:?} vs {s:?}"),
                        });
                    }
                    s
                }
                (layer, s) => {
                    return Err(Error::ShapeMismatch {
                        op: "shape_check",
                        detail: format!("layer {i} ({}) cannot consume {s:?}", layer.kind_name()),
                    })
                }
            };
        }
        if !stack.is_empty() {
            return Err(Error::ResidualGroupViolation(
                "unterminated residual block".into(),
            ));
        }
        match shape {
            ActShape::Features(f) if f == self.num_classes => Ok(f),
            other => Err(Error::ShapeMismatch {
                op: "shape_check",
                detail: format!("graph output {other:?}, expected {} classes", self.num_classes),
            }),
        }
    }

    /// Plain forward pass to logits `[N, classes]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut act = input.clone();
        let mut stack: Vec<Tensor> = Vec::new();
        for layer in &self.layers {
            act = eval_layer(layer, act, &mut stack)?;
        }
        Ok(act)
    }

    /// Forward pass that keeps the activation after every layer. Marker
    /// layers record their (unchanged) input.
    pub fn forward_trace(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        let mut act = input.clone();
        let mut stack: Vec<Tensor> = Vec::new();
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            act = eval_layer(layer, act, &mut stack)?;
            trace.push(act.clone());
        }
        Ok(trace)
    }

    /// Forward pass through a gradient tape. Parameters become tape leaves so
    /// the caller can read their gradients after `backward`.
    pub fn forward_taped(&self, tape: &mut GradTape, input: Tensor) -> Result<TapedForward> {
        let mut params = Vec::new();
        let mut bn_inputs = Vec::new();
        let mut act = tape.leaf(input);
        let mut stack: Vec<ValueId> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            act = match layer {
                LayerSpec::Conv { kernel, bias, stride, padding } => {
                    let k = tape.leaf(kernel.clone());
                    let b = tape.leaf(bias.clone());
                    params.push(ParamBinding { layer: i, role: ParamRole::Kernel, value: k });
                    params.push(ParamBinding { layer: i, role: ParamRole::Bias, value: b });
                    tape.conv2d(act, k, b, *stride, *padding)?
                }
                LayerSpec::Dense { weight, bias } | LayerSpec::Classifier { weight, bias } => {
                    let w = tape.leaf(weight.clone());
                    let b = tape.leaf(bias.clone());
                    params.push(ParamBinding { layer: i, role: ParamRole::Weight, value: w });
                    params.push(ParamBinding { layer: i, role: ParamRole::Bias, value: b });
                    tape.dense(act, w, b)?
                }
                LayerSpec::BatchNorm { gamma, beta, mean, var, eps } => {
                    let g = tape.leaf(gamma.clone());
                    let b = tape.leaf(beta.clone());
                    params.push(ParamBinding { layer: i, role: ParamRole::Gamma, value: g });
                    params.push(ParamBinding { layer: i, role: ParamRole::Beta, value: b });
                    bn_inputs.push((i, act));
                    tape.batchnorm(act, g, b, mean, var, *eps)?
                }
                LayerSpec::Relu => tape.relu(act),
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(act)?,
                LayerSpec::ResidualBegin => {
                    stack.push(act);
                    act
                }
                LayerSpec::ResidualEnd => {
                    let saved = stack.pop().ok_or_else(|| {
                        Error::ResidualGroupViolation(format!(
                            "layer {i}: residual_end without begin"
                        ))
                    })?;
                    tape.residual_add(saved, act)?
                }
            };
        }
        Ok(TapedForward { logits: act, params, bn_inputs })
    }

    /// Total stored parameter elements, including batch norm statistics.
    pub fn count_params(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                LayerSpec::Conv { kernel, bias, .. } => kernel.numel() + bias.numel(),
                LayerSpec::Dense { weight, bias } | LayerSpec::Classifier { weight, bias } => {
                    weight.numel() + bias.numel()
                }
                LayerSpec::BatchNorm { gamma, beta, mean, var, .. } => {
                    gamma.numel() + beta.numel() + mean.numel() + var.numel()
                }
                _ => 0,
            })
            .sum()
    }

    /// Multiply-accumulate counts times two for conv and dense layers, for a
    /// single sample of the given input shape.
    pub fn count_flops(&self, input: (usize, usize, usize)) -> Result<u64> {
        self.shape_check(input)?;
        let mut shape = ActShape::Spatial(input.0, input.1, input.2);
        let mut stack = Vec::new();
        let mut flops: u64 = 0;
        for layer in &self.layers {
            match (layer, shape) {
                (LayerSpec::Conv { kernel, stride, padding, .. }, ActShape::Spatial(_, h, w)) => {
                    let (cout, cin, kh, kw) = (
                        kernel.shape()[0],
                        kernel.shape()[1],
                        kernel.shape()[2],
                        kernel.shape()[3],
                    );
                    let h_out = (h + 2 * padding - kh) / stride + 1;
                    let w_out = (w + 2 * padding - kw) / stride + 1;
                    flops += 2 * (cout * cin * kh * kw * h_out * w_out) as u64;
                    shape = ActShape::Spatial(cout, h_out, w_out);
                }
                (LayerSpec::Dense { weight, .. }, _) | (LayerSpec::Classifier { weight, .. }, _) => {
                    flops += 2 * weight.numel() as u64;
                    shape = ActShape::Features(weight.shape()[0]);
                }
                (LayerSpec::GlobalAvgPool, ActShape::Spatial(c, _, _)) => {
                    shape = ActShape::Features(c);
                }
                (LayerSpec::ResidualBegin, s) => stack.push(s),
                (LayerSpec::ResidualEnd, _) => {
                    stack.pop();
                }
                _ => {}
            }
        }
        Ok(flops)
    }

    /// Total conv filters (output channels) in the graph.
    pub fn count_filters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { kernel, .. } => kernel.shape()[0],
                _ => 0,
            })
            .sum()
    }

    /// Indices of conv layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerSpec::Conv { .. }).then_some(i))
            .collect()
    }

    /// Index of the first conv layer (the stem), if any.
    pub fn stem_layer(&self) -> Option<usize> {
        self.conv_layers().first().copied()
    }

    /// Absorbs every batch norm into the conv layer that precedes it.
    /// Outputs are preserved up to float rounding.
    pub fn fold_batchnorm(&self) -> Result<ModelGraph> {
        if !self
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
        {
            return Err(Error::NothingToFold);
        }
        let mut layers: Vec<LayerSpec> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::BatchNorm { gamma, beta, mean, var, eps } => {
                    let Some(LayerSpec::Conv { kernel, bias, stride, padding }) = layers.last()
                    else {
                        return Err(Error::OrphanBatchNorm { layer: i });
                    };
                    let cout = kernel.shape()[0];
                    let per_channel = kernel.numel() / cout;
                    let mut folded_kernel = kernel.clone();
                    let mut folded_bias = bias.clone();
                    for c in 0..cout {
                        let scale = gamma[c] / (var[c] + eps).sqrt();
                        for v in
                            &mut folded_kernel.elems_mut()[c * per_channel..(c + 1) * per_channel]
                        {
                            *v *= scale;
                        }
                        folded_bias.elems_mut()[c] = (bias[c] - mean[c]) * scale + beta[c];
                    }
                    let (stride, padding) = (*stride, *padding);
                    *layers.last_mut().unwrap() = LayerSpec::Conv {
                        kernel: folded_kernel,
                        bias: folded_bias,
                        stride,
                        padding,
                    };
                }
                other => layers.push(other.clone()),
            }
        }
        let mut folded = ModelGraph::new(
            self.name.clone(),
            layers,
            self.input_shape,
            self.num_classes,
        )?;
        folded.baseline_accuracy = self.baseline_accuracy;
        Ok(folded)
    }
}

fn eval_layer(layer: &LayerSpec, act: Tensor, stack: &mut Vec<Tensor>) -> Result<Tensor> {
    use crate::tensor as t;
    Ok(match layer {
        LayerSpec::Conv { kernel, bias, stride, padding } => {
            t::conv2d_forward(&act, kernel, bias, *stride, *padding)?
        }
        LayerSpec::Dense { weight, bias } | LayerSpec::Classifier { weight, bias } => {
            t::dense_forward(&act, weight, bias)?
        }
        LayerSpec::BatchNorm { gamma, beta, mean, var, eps } => {
            t::batchnorm_forward(&act, gamma, beta, mean, var, *eps)?
        }
        LayerSpec::Relu => t::relu_forward(&act),
        LayerSpec::GlobalAvgPool => t::global_avg_pool_forward(&act)?,
        LayerSpec::ResidualBegin => {
            stack.push(act.clone());
            act
        }
        LayerSpec::ResidualEnd => {
            let saved = stack.pop().ok_or_else(|| {
                Error::ResidualGroupViolation("residual_end without begin".into())
            })?;
            t::residual_add(&saved, &act)?
        }
    })
}

/// Which parameter tensor of a layer a tape leaf corresponds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Kernel,
    Bias,
    Weight,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy)]
pub struct ParamBinding {
    pub layer: usize,
    pub role: ParamRole,
    pub value: ValueId,
}

/// Result of a taped forward pass.
pub struct TapedForward {
    pub logits: ValueId,
    pub params: Vec<ParamBinding>,
    /// Value ids of each batch norm layer's input, for running-stat updates.
    pub bn_inputs: Vec<(usize, ValueId)>,
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-row argmax of a `[N, K]` logits tensor.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.elems().chunks(k).map(argmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fold_with_unit_statistics_keeps_kernel_nearly_unchanged() {
        let model = build_mini_convnet(0.25, (1, 8, 8), 4, 0).unwrap();
        let folded = model.fold_batchnorm().unwrap();
        let (LayerSpec::Conv { kernel: before, .. }, LayerSpec::Conv { kernel: after, .. }) =
            (&model.layers[0], &folded.layers[0])
        else {
            panic!("first layer should be conv");
        };
        for (a, b) in before.elems().iter().zip(after.elems()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn fold_preserves_outputs_on_a_randomized_model() {
        let mut model = build_mini_resnet(2, 6, (1, 12, 12), 10, 3).unwrap();
        // give the batch norms non-trivial statistics
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for layer in &mut model.layers {
            if let LayerSpec::BatchNorm { gamma, beta, mean, var, .. } = layer {
                for v in gamma.elems_mut() {
                    *v = rng.gen_range(0.5..1.5);
                }
                for v in beta.elems_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
                for v in mean.elems_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
                for v in var.elems_mut() {
                    *v = rng.gen_range(0.5..2.0);
                }
            }
        }
        let folded = model.fold_batchnorm().unwrap();
        assert!(folded.layers.len() < model.layers.len());
        let input = random_input(&[2, 1, 12, 12], 4);
        let a = model.forward(&input).unwrap();
        let b = folded.forward(&input).unwrap();
        for (x, y) in a.elems().iter().zip(b.elems()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn folding_twice_is_an_error() {
        let model = build_mini_convnet(0.25, (1, 8, 8), 4, 0).unwrap();
        let folded = model.fold_batchnorm().unwrap();
        assert!(matches!(folded.fold_batchnorm(), Err(Error::NothingToFold)));
    }

    #[test]
    fn orphan_batchnorm_is_an_error() {
        let layers = vec![
            LayerSpec::BatchNorm {
                gamma: Tensor::filled(&[1], 1.0),
                beta: Tensor::zeros(&[1]),
                mean: Tensor::zeros(&[1]),
                var: Tensor::filled(&[1], 1.0),
                eps: 1e-5,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Classifier {
                weight: Tensor::filled(&[2, 1], 1.0),
                bias: Tensor::zeros(&[2]),
            },
        ];
        let model = ModelGraph::new("orphan", layers, (1, 4, 4), 2).unwrap();
        assert!(matches!(
            model.fold_batchnorm(),
            Err(Error::OrphanBatchNorm { layer: 0 })
        ));
    }

    #[test]
    fn fold_preserves_conv_flops_and_reduces_layer_count() {
        let model = build_mini_convnet(0.5, (1, 16, 16), 10, 1).unwrap();
        let folded = model.fold_batchnorm().unwrap();
        assert_eq!(
            model.count_flops((1, 16, 16)).unwrap(),
            folded.count_flops((1, 16, 16)).unwrap()
        );
        assert!(folded.layers.len() < model.layers.len());
    }

    #[test]
    fn dense_param_count_formula() {
        let layers = vec![
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                weight: Tensor::zeros(&[7, 3]),
                bias: Tensor::zeros(&[7]),
            },
            LayerSpec::Classifier {
                weight: Tensor::zeros(&[4, 7]),
                bias: Tensor::zeros(&[4]),
            },
        ];
        let model = ModelGraph::new("dense", layers, (3, 2, 2), 4).unwrap();
        assert_eq!(model.count_params(), 7 * 3 + 7 + 4 * 7 + 4);
    }

    #[test]
    fn conv_flops_formula() {
        let layers = vec![
            LayerSpec::Conv {
                kernel: Tensor::zeros(&[8, 3, 3, 3]),
                bias: Tensor::zeros(&[8]),
                stride: 1,
                padding: 0,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Classifier {
                weight: Tensor::zeros(&[2, 8]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        let model = ModelGraph::new("flops", layers, (3, 10, 10), 2).unwrap();
        // conv: 2 * 8 * 3 * 9 * 8 * 8, classifier: 2 * 2 * 8
        assert_eq!(
            model.count_flops((3, 10, 10)).unwrap(),
            2 * 8 * 3 * 9 * 64 + 2 * 16
        );
    }

    #[test]
    fn shape_check_agrees_with_forward() {
        let model = build_mini_resnet(1, 4, (1, 16, 16), 10, 0).unwrap();
        assert!(model.shape_check((1, 16, 16)).is_ok());
        assert!(model.forward(&Tensor::zeros(&[1, 1, 16, 16])).is_ok());
        // wrong channel count fails both
        assert!(model.shape_check((2, 16, 16)).is_err());
        assert!(model.forward(&Tensor::zeros(&[1, 2, 16, 16])).is_err());

        // a pad-0 conv that outgrows its input fails both
        let layers = vec![
            LayerSpec::Conv {
                kernel: Tensor::zeros(&[2, 1, 3, 3]),
                bias: Tensor::zeros(&[2]),
                stride: 1,
                padding: 0,
            },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Classifier {
                weight: Tensor::zeros(&[2, 2]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        let tight = ModelGraph::new("tight", layers, (1, 3, 3), 2).unwrap();
        assert!(tight.shape_check((1, 2, 2)).is_err());
        assert!(tight.forward(&Tensor::zeros(&[1, 1, 2, 2])).is_err());
        assert!(tight.shape_check((1, 3, 3)).is_ok());
        assert!(tight.forward(&Tensor::zeros(&[1, 1, 3, 3])).is_ok());
    }

    #[test]
    fn mismatched_residual_markers_are_rejected() {
        let begin_only = vec![
            LayerSpec::ResidualBegin,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Classifier {
                weight: Tensor::zeros(&[2, 1]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        assert!(ModelGraph::new("bad", begin_only, (1, 4, 4), 2).is_err());
        let end_only = vec![
            LayerSpec::ResidualEnd,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Classifier {
                weight: Tensor::zeros(&[2, 1]),
                bias: Tensor::zeros(&[2]),
            },
        ];
        assert!(ModelGraph::new("bad", end_only, (1, 4, 4), 2).is_err());
    }
}
