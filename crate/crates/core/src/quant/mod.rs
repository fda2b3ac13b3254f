//! Post-training affine quantization.
//!
//! Codes follow the unsigned convention: `[0, 2^bits - 1]`, with
//! `x ~= scale * (code - zero_point)`. The chosen clip range always contains
//! zero, so the real value 0 is exactly representable and the zero point
//! never clamps. Weights calibrate with observed min/max; activations go
//! through the histogram KL search in [`calibrate_kl`].

mod calibrate;
mod model;

pub use calibrate::{calibrate_kl, kl_sweep, ActivationHistogram, KL_HISTOGRAM_BINS};
pub use model::{
    int8_forward, quantize_model, quantized_count_flops, QuantLayer, QuantizedModel,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine quantization parameters for one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: u8,
    /// Observed data range, before any clipping decision.
    pub min: f32,
    pub max: f32,
}

/// Floor applied to degenerate (all-zero) ranges.
pub const SCALE_FLOOR: f32 = 1e-8;

impl QuantParams {
    /// Largest code value, `2^bits - 1`.
    pub fn code_max(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Parameters for an explicit clip range. The range is extended to
    /// include zero; a collapsed range falls back to [`SCALE_FLOOR`].
    pub fn from_clip_range(
        clip_min: f32,
        clip_max: f32,
        bits: u8,
        observed: (f32, f32),
    ) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!(
                "bit width must be in 1..=8, got {bits}"
            )));
        }
        if !clip_min.is_finite() || !clip_max.is_finite() || clip_min > clip_max {
            return Err(Error::InvalidArgument(format!(
                "bad clip range [{clip_min}, {clip_max}]"
            )));
        }
        let lo = clip_min.min(0.0);
        let hi = clip_max.max(0.0);
        let levels = ((1u32 << bits) - 1) as f64;
        let range = (hi - lo) as f64;
        let scale = if range > 0.0 {
            (range / levels) as f32
        } else {
            SCALE_FLOOR
        };
        let zero_point = (-(lo as f64) / scale as f64).round().clamp(0.0, levels) as i32;
        Ok(Self {
            scale,
            zero_point,
            bits,
            min: observed.0,
            max: observed.1,
        })
    }

    /// Clip range implied by scale and zero point.
    pub fn clip_range(&self) -> (f32, f32) {
        let lo = -(self.zero_point as f64) * self.scale as f64;
        let hi = (self.code_max() as f64 - self.zero_point as f64) * self.scale as f64;
        (lo as f32, hi as f32)
    }

    /// Quantize one value: round-half-away-from-zero, then clamp.
    #[inline]
    pub fn quantize(&self, x: f32) -> u8 {
        let q = (x as f64 / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(0.0, self.code_max() as f64) as u8
    }

    #[inline]
    pub fn dequantize(&self, code: u8) -> f32 {
        ((code as i32 - self.zero_point) as f64 * self.scale as f64) as f32
    }
}

/// Integer codes plus shape; the quantized counterpart of [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub shape: Vec<usize>,
    pub codes: Vec<u8>,
}

impl QuantTensor {
    pub fn numel(&self) -> usize {
        self.codes.len()
    }
}

/// Min/max calibration: the clip range is exactly the observed range
/// (extended through zero).
pub fn calibrate_minmax(values: &Tensor, bits: u8) -> Result<QuantParams> {
    if values.numel() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if !values.is_finite() {
        return Err(Error::NonFinite("minmax calibration input".into()));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in values.elems() {
        min = min.min(v);
        max = max.max(v);
    }
    QuantParams::from_clip_range(min, max, bits, (min, max))
}

pub fn quantize_tensor(values: &Tensor, params: &QuantParams) -> QuantTensor {
    QuantTensor {
        shape: values.shape().to_vec(),
        codes: values.elems().iter().map(|&v| params.quantize(v)).collect(),
    }
}

pub fn dequantize_tensor(codes: &QuantTensor, params: &QuantParams) -> Tensor {
    Tensor::new(
        codes.shape.clone(),
        codes.codes.iter().map(|&c| params.dequantize(c)).collect(),
    )
    .expect("quantized tensor carries a consistent shape")
}

/// Elementwise error statistics of `dequantize(quantize(x))`.
pub fn quant_error_stats(values: &Tensor, params: &QuantParams) -> (f64, f64) {
    let mut sq_sum = 0.0f64;
    let mut max_abs = 0.0f64;
    for &v in values.elems() {
        let d = params.dequantize(params.quantize(v)) as f64 - v as f64;
        sq_sum += d * d;
        max_abs = max_abs.max(d.abs());
    }
    (sq_sum / values.numel() as f64, max_abs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_symmetric_unit_range() {
        let v = Tensor::new(vec![4], vec![-1.0, -0.25, 0.5, 1.0]).unwrap();
        let p = calibrate_minmax(&v, 8).unwrap();
        assert!((p.scale - 2.0 / 255.0).abs() < 1e-9);
        assert_eq!(p.min, -1.0);
        assert_eq!(p.max, 1.0);
        // -min/scale = 127.5 up to f32 scale rounding
        assert!(p.zero_point == 127 || p.zero_point == 128, "zero_point {}", p.zero_point);
    }

    #[test]
    fn minmax_constant_tensor_degenerates_gracefully() {
        let v = Tensor::filled(&[16], 1.0);
        let p = calibrate_minmax(&v, 8).unwrap();
        let q = quantize_tensor(&v, &p);
        assert!(q.codes.iter().all(|&c| c == q.codes[0]), "all codes equal");
        let back = dequantize_tensor(&q, &p);
        for (&b, &x) in back.elems().iter().zip(v.elems()) {
            assert!((b - x).abs() <= 1e-8);
        }
    }

    #[test]
    fn minmax_all_zero_uses_scale_floor() {
        let v = Tensor::zeros(&[8]);
        let p = calibrate_minmax(&v, 8).unwrap();
        assert_eq!(p.scale, SCALE_FLOOR);
        let (mse, max_err) = quant_error_stats(&v, &p);
        assert_eq!(mse, 0.0);
        assert_eq!(max_err, 0.0);
    }

    #[test]
    fn one_bit_two_values() {
        let v = Tensor::new(vec![2], vec![0.0, 3.0]).unwrap();
        let p = calibrate_minmax(&v, 1).unwrap();
        assert_eq!(p.scale, 3.0);
        let q = quantize_tensor(&v, &p);
        assert_eq!(q.codes, vec![0, 1]);
    }

    #[test]
    fn endpoints_map_to_extreme_codes() {
        let v = Tensor::new(vec![3], vec![-2.0, 0.0, 6.0]).unwrap();
        let p = calibrate_minmax(&v, 8).unwrap();
        assert_eq!(p.quantize(-2.0), 0);
        assert_eq!(p.quantize(6.0), 255);
    }

    #[test]
    fn out_of_range_values_clamp_to_endpoint_codes() {
        let v = Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap();
        let p = calibrate_minmax(&v, 8).unwrap();
        assert_eq!(p.quantize(-50.0), 0);
        assert_eq!(p.quantize(50.0), 255);
    }

    #[test]
    fn roundtrip_error_bounded_by_half_scale() {
        let vals: Vec<f32> = (0..1000).map(|i| -1.0 + 2.0 * (i as f32) / 999.0).collect();
        let t = Tensor::new(vec![vals.len()], vals).unwrap();
        let p = calibrate_minmax(&t, 8).unwrap();
        let bound = p.scale as f64 / 2.0 * (1.0 + 1e-9);
        for &x in t.elems() {
            let err = (p.dequantize(p.quantize(x)) as f64 - x as f64).abs();
            assert!(err <= bound, "x={x} err={err} scale={}", p.scale);
        }
    }

    #[test]
    fn planted_outlier_inflates_error_for_the_rest() {
        // uniform mass in [-1, 1] plus one value at 10
        let mut vals: Vec<f32> = (0..512).map(|i| -1.0 + 2.0 * (i as f32) / 511.0).collect();
        vals.push(10.0);
        let with_outlier = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
        let p_with = calibrate_minmax(&with_outlier, 8).unwrap();

        vals.pop();
        let without = Tensor::new(vec![vals.len()], vals).unwrap();
        let p_without = calibrate_minmax(&without, 8).unwrap();

        let (mse_with, _) = quant_error_stats(&without, &p_with);
        let (mse_without, _) = quant_error_stats(&without, &p_without);
        assert!(
            mse_without < mse_with,
            "recalibrating after removing the outlier must strictly reduce MSE \
             ({mse_without} vs {mse_with})"
        );
    }

    #[test]
    fn constant_tensor_has_zero_mse() {
        let v = Tensor::filled(&[32], -0.75);
        let p = calibrate_minmax(&v, 8).unwrap();
        let (mse, _) = quant_error_stats(&v, &p);
        assert!(mse <= 1e-16);
    }
}
