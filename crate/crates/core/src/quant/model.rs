//! Quantized model construction and integer inference.
//!
//! Weights take per-tensor min-max parameters (their values are fully known);
//! activations take KL-calibrated parameters gathered from calibration
//! forward passes. Biases are stored as 32-bit integers at scale
//! `s_in * s_w`. Conv and dense accumulate 8-bit operands into `i32`;
//! requantization between layers multiplies by `s_in * s_w / s_out` in
//! float and rounds, and residual adds rescale both operands to the output
//! scale before the integer addition.

use rayon::prelude::*;

use crate::cost::CostCounters;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{LayerSpec, ModelGraph};
use crate::tensor::Tensor;

use super::calibrate::{calibrate_kl, ActivationHistogram, KL_HISTOGRAM_BINS};
use super::{calibrate_minmax, quantize_tensor, QuantParams, QuantTensor};

/// One layer of a quantized model. Batch norm is folded away before
/// quantization, so only these kinds remain.
#[derive(Debug, Clone, PartialEq)]
pub enum QuantLayer {
    Conv {
        kernel: QuantTensor,
        kernel_params: QuantParams,
        /// Integer bias at scale `s_in * s_w`.
        bias: Vec<i32>,
        stride: usize,
        padding: usize,
        out_params: QuantParams,
    },
    Relu {
        out_params: QuantParams,
    },
    GlobalAvgPool {
        out_params: QuantParams,
    },
    ResidualBegin,
    ResidualEnd {
        out_params: QuantParams,
    },
    Classifier {
        weight: QuantTensor,
        weight_params: QuantParams,
        bias: Vec<i32>,
    },
}

/// A fully quantized model: integer weights plus activation parameters for
/// every layer boundary integer inference crosses.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub name: String,
    pub layers: Vec<QuantLayer>,
    pub input_params: QuantParams,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
}

/// MAC-based flop count of a quantized graph for one sample, mirroring
/// [`ModelGraph::count_flops`].
pub fn quantized_count_flops(model: &QuantizedModel) -> u64 {
    let (_, mut h, mut w) = model.input_shape;
    let mut flops = 0u64;
    for layer in &model.layers {
        match layer {
            QuantLayer::Conv { kernel, stride, padding, .. } => {
                let (cout, cin, kh, kw) = (
                    kernel.shape[0],
                    kernel.shape[1],
                    kernel.shape[2],
                    kernel.shape[3],
                );
                h = (h + 2 * padding - kh) / stride + 1;
                w = (w + 2 * padding - kw) / stride + 1;
                flops += 2 * (cout * cin * kh * kw * h * w) as u64;
            }
            QuantLayer::Classifier { weight, .. } => {
                flops += 2 * weight.numel() as u64;
            }
            _ => {}
        }
    }
    flops
}

/// Boundary statistics gathered during the first calibration scan.
#[derive(Clone, Copy)]
struct RangeStat {
    min: f32,
    max: f32,
    max_abs: f32,
}

impl RangeStat {
    fn empty() -> Self {
        Self {
            min: f32::INFINITY,
            max: f32::NEG_INFINITY,
            max_abs: 0.0,
        }
    }
    fn observe(&mut self, t: &Tensor) {
        for &v in t.elems() {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
            self.max_abs = self.max_abs.max(v.abs());
        }
    }
    fn merge(&mut self, other: &RangeStat) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.max_abs = self.max_abs.max(other.max_abs);
    }
}

/// True for layers whose output crosses an integer boundary and therefore
/// needs activation params.
fn needs_out_params(layer: &LayerSpec) -> bool {
    matches!(
        layer,
        LayerSpec::Conv { .. }
            | LayerSpec::Relu
            | LayerSpec::GlobalAvgPool
            | LayerSpec::ResidualEnd
    )
}

/// Post-training quantization of a trained float model.
///
/// Folds batch norm (if present), min-max quantizes every weight tensor, runs
/// the calibration set forward to build per-boundary activation histograms,
/// and KL-calibrates each boundary. Counts `|calib|` inference passes.
pub fn quantize_model(
    model: &ModelGraph,
    calib: &[Sample],
    bits: u8,
    counters: &CostCounters,
) -> Result<QuantizedModel> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let folded = if model
        .layers
        .iter()
        .any(|l| matches!(l, LayerSpec::BatchNorm { .. }))
    {
        model.fold_batchnorm()?
    } else {
        model.clone()
    };

    // Scan 1: per-boundary ranges (index 0 = model input, then one per layer).
    let n_bounds = folded.layers.len() + 1;
    let ranges = calib
        .par_iter()
        .map(|sample| -> Result<Vec<RangeStat>> {
            let mut stats = vec![RangeStat::empty(); n_bounds];
            stats[0].observe(&sample.input);
            let trace = folded.forward_trace(&batch_of_one(&sample.input))?;
            for (i, act) in trace.iter().enumerate() {
                stats[i + 1].observe(act);
            }
            Ok(stats)
        })
        .collect::<Vec<_>>();
    let mut range = vec![RangeStat::empty(); n_bounds];
    for per_sample in ranges {
        let per_sample = per_sample?;
        for (acc, s) in range.iter_mut().zip(&per_sample) {
            acc.merge(s);
        }
    }

    // Scan 2: histograms at the ranges found above.
    let mut hists: Vec<ActivationHistogram> = range
        .iter()
        .map(|r| ActivationHistogram::new(r.max_abs, KL_HISTOGRAM_BINS))
        .collect::<Result<_>>()?;
    let partials = calib
        .par_iter()
        .map(|sample| -> Result<Vec<ActivationHistogram>> {
            let mut local: Vec<ActivationHistogram> = range
                .iter()
                .map(|r| ActivationHistogram::new(r.max_abs, KL_HISTOGRAM_BINS))
                .collect::<Result<_>>()?;
            local[0].observe_tensor(&sample.input);
            let trace = folded.forward_trace(&batch_of_one(&sample.input))?;
            for (i, act) in trace.iter().enumerate() {
                local[i + 1].observe_tensor(act);
            }
            Ok(local)
        })
        .collect::<Vec<_>>();
    for per_sample in partials {
        for (acc, local) in hists.iter_mut().zip(&per_sample?) {
            acc.merge(local);
        }
    }
    counters.add_inference_passes(calib.len() as u64);

    let input_params = calibrate_kl(&hists[0], bits)?;
    let mut boundary_params: Vec<Option<QuantParams>> = vec![None; folded.layers.len()];
    for (i, layer) in folded.layers.iter().enumerate() {
        if needs_out_params(layer) {
            boundary_params[i] = Some(calibrate_kl(&hists[i + 1], bits)?);
        }
    }

    // Assemble integer layers, tracking the current input params.
    let mut current = input_params;
    let mut stack: Vec<QuantParams> = Vec::new();
    let mut layers = Vec::with_capacity(folded.layers.len());
    for (i, layer) in folded.layers.iter().enumerate() {
        let out = |i: usize| -> Result<QuantParams> {
            boundary_params[i].ok_or(Error::MissingActivationParams { layer: i })
        };
        match layer {
            LayerSpec::Conv { kernel, bias, stride, padding } => {
                let kernel_params = calibrate_minmax(kernel, bits)?;
                let out_params = out(i)?;
                let bias_q = quantize_bias(bias, &current, &kernel_params);
                layers.push(QuantLayer::Conv {
                    kernel: quantize_tensor(kernel, &kernel_params),
                    kernel_params,
                    bias: bias_q,
                    stride: *stride,
                    padding: *padding,
                    out_params,
                });
                current = out_params;
            }
            LayerSpec::Relu => {
                let out_params = out(i)?;
                layers.push(QuantLayer::Relu { out_params });
                current = out_params;
            }
            LayerSpec::GlobalAvgPool => {
                let out_params = out(i)?;
                layers.push(QuantLayer::GlobalAvgPool { out_params });
                current = out_params;
            }
            LayerSpec::ResidualBegin => {
                stack.push(current);
                layers.push(QuantLayer::ResidualBegin);
            }
            LayerSpec::ResidualEnd => {
                let out_params = out(i)?;
                stack.pop().ok_or_else(|| {
                    Error::ResidualGroupViolation(format!("layer {i}: residual_end without begin"))
                })?;
                layers.push(QuantLayer::ResidualEnd { out_params });
                current = out_params;
            }
            LayerSpec::Dense { weight, bias } | LayerSpec::Classifier { weight, bias } => {
                let weight_params = calibrate_minmax(weight, bits)?;
                let bias_q = quantize_bias(bias, &current, &weight_params);
                layers.push(QuantLayer::Classifier {
                    weight: quantize_tensor(weight, &weight_params),
                    weight_params,
                    bias: bias_q,
                });
            }
            LayerSpec::BatchNorm { .. } => unreachable!("folded above"),
        }
    }

    Ok(QuantizedModel {
        name: format!("{}_int8", folded.name),
        layers,
        input_params,
        input_shape: folded.input_shape,
        num_classes: folded.num_classes,
    })
}

fn quantize_bias(bias: &Tensor, input: &QuantParams, weight: &QuantParams) -> Vec<i32> {
    let scale = input.scale as f64 * weight.scale as f64;
    bias.elems()
        .iter()
        .map(|&b| (b as f64 / scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect()
}

fn batch_of_one(input: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    Tensor::new(shape, input.elems().to_vec()).expect("adding a batch axis preserves the element count")
}

/// Requantize one real value into `params`' code space.
#[inline]
fn requantize(value: f64, params: &QuantParams) -> u8 {
    let q = (value / params.scale as f64).round() + params.zero_point as f64;
    q.clamp(0.0, params.code_max() as f64) as u8
}

struct QAct {
    codes: Vec<u8>,
    shape: Vec<usize>,
    params: QuantParams,
}

/// Integer forward pass: quantizes `input` with the model's input params,
/// runs every layer in the integer domain, and dequantizes the final logits.
pub fn int8_forward(qmodel: &QuantizedModel, input: &Tensor) -> Result<Tensor> {
    let in_t = if input.shape().len() == 3 {
        batch_of_one(input)
    } else {
        input.clone()
    };
    if in_t.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "int8_forward",
            detail: format!("expected [N,C,H,W] input, got {:?}", input.shape()),
        });
    }
    let q_in = quantize_tensor(&in_t, &qmodel.input_params);
    let mut act = QAct {
        codes: q_in.codes,
        shape: q_in.shape,
        params: qmodel.input_params,
    };
    let mut stack: Vec<QAct> = Vec::new();
    let mut logits: Option<Tensor> = None;

    for (i, layer) in qmodel.layers.iter().enumerate() {
        match layer {
            QuantLayer::Conv { kernel, kernel_params, bias, stride, padding, out_params } => {
                act = int_conv(&act, kernel, kernel_params, bias, *stride, *padding, out_params)?;
            }
            QuantLayer::Relu { out_params } => {
                let zin = act.params.zero_point;
                let sin = act.params.scale as f64;
                let codes = act
                    .codes
                    .iter()
                    .map(|&q| {
                        let x = sin * (q as i32 - zin) as f64;
                        requantize(x.max(0.0), out_params)
                    })
                    .collect();
                act = QAct { codes, shape: act.shape, params: *out_params };
            }
            QuantLayer::GlobalAvgPool { out_params } => {
                act = int_pool(&act, out_params)?;
            }
            QuantLayer::ResidualBegin => {
                stack.push(QAct {
                    codes: act.codes.clone(),
                    shape: act.shape.clone(),
                    params: act.params,
                });
            }
            QuantLayer::ResidualEnd { out_params } => {
                let saved = stack.pop().ok_or_else(|| {
                    Error::ResidualGroupViolation(format!("layer {i}: residual_end without begin"))
                })?;
                act = int_residual_add(&saved, &act, out_params)?;
            }
            QuantLayer::Classifier { weight, weight_params, bias } => {
                logits = Some(int_classifier(&act, weight, weight_params, bias)?);
            }
        }
    }
    logits.ok_or_else(|| Error::InvalidArgument("quantized model has no classifier".into()))
}

fn int_conv(
    act: &QAct,
    kernel: &QuantTensor,
    kernel_params: &QuantParams,
    bias: &[i32],
    stride: usize,
    padding: usize,
    out_params: &QuantParams,
) -> Result<QAct> {
    if act.shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "int8_conv",
            detail: format!("expected rank-4 activation, got {:?}", act.shape),
        });
    }
    let (n_batch, cin, h, w) = (act.shape[0], act.shape[1], act.shape[2], act.shape[3]);
    let (cout, kcin, kh, kw) = (kernel.shape[0], kernel.shape[1], kernel.shape[2], kernel.shape[3]);
    if kcin != cin {
        return Err(Error::ShapeMismatch {
            op: "int8_conv",
            detail: format!("activation has {cin} channels, kernel expects {kcin}"),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::ShapeMismatch {
            op: "int8_conv",
            detail: format!("kernel {kh}x{kw} exceeds padded input {h}x{w}"),
        });
    }
    let h_out = (h + 2 * padding - kh) / stride + 1;
    let w_out = (w + 2 * padding - kw) / stride + 1;
    let zx = act.params.zero_point;
    let zw = kernel_params.zero_point;
    // requantization multiplier s_in * s_w / s_out
    let mult = act.params.scale as f64 * kernel_params.scale as f64 / out_params.scale as f64;
    let zo = out_params.zero_point;
    let code_max = out_params.code_max();

    let mut codes = vec![0u8; n_batch * cout * h_out * w_out];
    for n in 0..n_batch {
        for co in 0..cout {
            let o_base = (n * cout + co) * h_out * w_out;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc: i32 = bias[co];
                    for ci in 0..cin {
                        let x_base = (n * cin + ci) * h * w;
                        let k_base = (co * cin + ci) * kh * kw;
                        for dkh in 0..kh {
                            let ih = (oh * stride + dkh) as isize - padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for dkw in 0..kw {
                                let iw = (ow * stride + dkw) as isize - padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xq = act.codes[x_base + ih as usize * w + iw as usize] as i32;
                                let wq = kernel.codes[k_base + dkh * kw + dkw] as i32;
                                acc += (xq - zx) * (wq - zw);
                            }
                        }
                    }
                    let q = (acc as f64 * mult).round() + zo as f64;
                    codes[o_base + oh * w_out + ow] = q.clamp(0.0, code_max as f64) as u8;
                }
            }
        }
    }
    Ok(QAct {
        codes,
        shape: vec![n_batch, cout, h_out, w_out],
        params: *out_params,
    })
}

fn int_pool(act: &QAct, out_params: &QuantParams) -> Result<QAct> {
    if act.shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "int8_pool",
            detail: format!("expected rank-4 activation, got {:?}", act.shape),
        });
    }
    let (n_batch, c, h, w) = (act.shape[0], act.shape[1], act.shape[2], act.shape[3]);
    let hw = (h * w) as i64;
    let sin = act.params.scale as f64;
    let zin = act.params.zero_point as i64;
    let mut codes = vec![0u8; n_batch * c];
    for n in 0..n_batch {
        for ch in 0..c {
            let base = (n * c + ch) * (h * w);
            let sum: i64 = act.codes[base..base + h * w].iter().map(|&q| q as i64).sum();
            let mean = sin * (sum - hw * zin) as f64 / hw as f64;
            codes[n * c + ch] = requantize(mean, out_params);
        }
    }
    Ok(QAct {
        codes,
        shape: vec![n_batch, c],
        params: *out_params,
    })
}

fn int_residual_add(a: &QAct, b: &QAct, out_params: &QuantParams) -> Result<QAct> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op: "int8_residual_add",
            detail: format!("{:?} vs {:?}", a.shape, b.shape),
        });
    }
    let (sa, za) = (a.params.scale as f64, a.params.zero_point);
    let (sb, zb) = (b.params.scale as f64, b.params.zero_point);
    let so = out_params.scale as f64;
    let zo = out_params.zero_point as f64;
    let code_max = out_params.code_max() as f64;
    let codes = a
        .codes
        .iter()
        .zip(&b.codes)
        .map(|(&qa, &qb)| {
            let ra = (sa * (qa as i32 - za) as f64 / so).round();
            let rb = (sb * (qb as i32 - zb) as f64 / so).round();
            (ra + rb + zo).clamp(0.0, code_max) as u8
        })
        .collect();
    Ok(QAct {
        codes,
        shape: a.shape.clone(),
        params: *out_params,
    })
}

fn int_classifier(
    act: &QAct,
    weight: &QuantTensor,
    weight_params: &QuantParams,
    bias: &[i32],
) -> Result<Tensor> {
    if act.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "int8_classifier",
            detail: format!("expected rank-2 activation, got {:?}", act.shape),
        });
    }
    let (n_batch, f) = (act.shape[0], act.shape[1]);
    let (o_dim, wf) = (weight.shape[0], weight.shape[1]);
    if wf != f {
        return Err(Error::ShapeMismatch {
            op: "int8_classifier",
            detail: format!("activation has {f} features, weight expects {wf}"),
        });
    }
    let zx = act.params.zero_point;
    let zw = weight_params.zero_point;
    let scale = act.params.scale as f64 * weight_params.scale as f64;
    let mut logits = Tensor::zeros(&[n_batch, o_dim]);
    let out = logits.elems_mut();
    for n in 0..n_batch {
        for oi in 0..o_dim {
            let mut acc: i32 = bias[oi];
            for fi in 0..f {
                let xq = act.codes[n * f + fi] as i32;
                let wq = weight.codes[oi * f + fi] as i32;
                acc += (xq - zx) * (wq - zw);
            }
            out[n * o_dim + oi] = (acc as f64 * scale) as f32;
        }
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int32_accumulator_bound_holds_for_supported_shapes() {
        // worst case |(xq - zx)*(wq - zw)| = 255 * 255 per MAC would already
        // overflow at 2^15 terms, but operands are bounded by 127 after the
        // zero-point shift only in the symmetric case; the guaranteed bound
        // uses the full asymmetric excursion of 255.
        let per_mac: i64 = 127 * 127;
        let terms: i64 = 1 << 15;
        assert!(per_mac * terms < (1i64 << 31));
    }

    #[test]
    fn exactly_representable_conv_matches_float_path() {
        // weights that are exact multiples of their scale and inputs on the
        // code lattice reproduce the float conv bit for bit
        let input_params = QuantParams::from_clip_range(0.0, 2.55, 8, (0.0, 2.55)).unwrap();
        let weight_params = QuantParams::from_clip_range(-1.28, 1.27, 8, (-1.28, 1.27)).unwrap();
        let out_params = QuantParams::from_clip_range(0.0, 25.5, 8, (0.0, 25.5)).unwrap();

        let xs: Vec<f32> = (0..16).map(|i| input_params.dequantize((i * 16) as u8)).collect();
        let input = Tensor::new(vec![1, 1, 4, 4], xs).unwrap();
        let wv = weight_params.dequantize(200);
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![wv]).unwrap();
        let bias = Tensor::zeros(&[1]);

        let float_out =
            crate::tensor::conv2d_forward(&input, &kernel, &bias, 1, 0).unwrap();

        let act = QAct {
            codes: quantize_tensor(&input, &input_params).codes,
            shape: vec![1, 1, 4, 4],
            params: input_params,
        };
        let qkernel = quantize_tensor(&kernel, &weight_params);
        let qout = int_conv(&act, &qkernel, &weight_params, &[0], 1, 0, &out_params).unwrap();
        for (&code, &fv) in qout.codes.iter().zip(float_out.elems()) {
            let dq = out_params.dequantize(code);
            assert!(
                (dq - fv).abs() <= out_params.scale / 2.0 + 1e-6,
                "int8 {dq} vs float {fv}"
            );
        }
    }
}
