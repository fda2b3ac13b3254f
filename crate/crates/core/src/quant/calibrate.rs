//! KL-divergence calibration for activation tensors.
//!
//! A histogram of absolute activation values is swept over candidate clip
//! thresholds (bin boundaries, starting at 128 bins). For each threshold the
//! clipped reference distribution — with the clipped-off tail folded into its
//! last bin — is compared against the `2^bits`-level requantized expansion of
//! the unfolded clipped histogram. The threshold with the smallest divergence
//! wins; ties go to the smallest threshold. Activations that were ever
//! negative clip symmetrically, non-negative (post-relu) ones one-sided.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::QuantParams;

/// Default histogram resolution.
pub const KL_HISTOGRAM_BINS: usize = 2048;

/// First clip candidate, in bins.
const SEARCH_START_BINS: usize = 128;

/// Additive smoothing applied before taking logs.
const SMOOTH_EPS: f64 = 1e-9;

/// Streaming histogram of absolute activation values.
#[derive(Debug, Clone)]
pub struct ActivationHistogram {
    bins: Vec<u64>,
    max_abs: f32,
    observed_min: f32,
    observed_max: f32,
    count: u64,
}

impl ActivationHistogram {
    /// A histogram over `[0, max_abs]` with `num_bins` bins. `max_abs` comes
    /// from a first scan over the calibration stream.
    pub fn new(max_abs: f32, num_bins: usize) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
        }
        if !max_abs.is_finite() || max_abs < 0.0 {
            return Err(Error::InvalidArgument(format!("bad histogram range {max_abs}")));
        }
        Ok(Self {
            bins: vec![0; num_bins],
            max_abs,
            observed_min: f32::INFINITY,
            observed_max: f32::NEG_INFINITY,
            count: 0,
        })
    }

    pub fn from_values(values: &[f32], num_bins: usize) -> Result<Self> {
        let max_abs = values.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let mut hist = Self::new(max_abs, num_bins)?;
        hist.observe(values);
        Ok(hist)
    }

    pub fn observe(&mut self, values: &[f32]) {
        let n = self.bins.len();
        for &v in values {
            self.observed_min = self.observed_min.min(v);
            self.observed_max = self.observed_max.max(v);
            let idx = if self.max_abs > 0.0 {
                ((v.abs() / self.max_abs) * n as f32) as usize
            } else {
                0
            };
            self.bins[idx.min(n - 1)] += 1;
            self.count += 1;
        }
    }

    pub fn observe_tensor(&mut self, t: &Tensor) {
        self.observe(t.elems());
    }

    /// Order-independent merge: bin counts and ranges combine regardless of
    /// which shard saw which sample (ranges must match).
    pub fn merge(&mut self, other: &ActivationHistogram) {
        debug_assert_eq!(self.bins.len(), other.bins.len());
        debug_assert_eq!(self.max_abs.to_bits(), other.max_abs.to_bits());
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.observed_min = self.observed_min.min(other.observed_min);
        self.observed_max = self.observed_max.max(other.observed_max);
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }

    fn bin_width(&self) -> f64 {
        self.max_abs as f64 / self.bins.len() as f64
    }

    fn has_negative(&self) -> bool {
        self.observed_min < 0.0
    }
}

fn normalize(dist: &mut [f64]) {
    let total: f64 = dist.iter().sum();
    if total > 0.0 {
        for v in dist.iter_mut() {
            *v /= total;
        }
    }
}

/// Additive smoothing of the candidate only; the reference keeps its exact
/// probabilities (its zeros contribute nothing to the divergence).
fn smooth(dist: &mut [f64]) {
    let n = dist.len() as f64;
    for v in dist.iter_mut() {
        *v = (*v + SMOOTH_EPS) / (1.0 + n * SMOOTH_EPS);
    }
}

fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        if pv > 0.0 {
            kl += pv * (pv / qv).ln();
        }
    }
    kl
}

/// Requantize `hist[..clip_bins]` into `levels` values and expand back to
/// `clip_bins` bins. Each level's mass spreads uniformly over every bin of
/// its span, matching what a real `levels`-step quantizer does to the
/// distribution.
fn requantized_expansion(hist: &[u64], levels: usize) -> Vec<f64> {
    let clip_bins = hist.len();
    if clip_bins <= levels {
        return hist.iter().map(|&c| c as f64).collect();
    }
    let mut out = vec![0.0; clip_bins];
    for level in 0..levels {
        let start = level * clip_bins / levels;
        let stop = ((level + 1) * clip_bins / levels).max(start + 1);
        let total: u64 = hist[start..stop].iter().sum();
        let per_bin = total as f64 / (stop - start) as f64;
        for v in &mut out[start..stop] {
            *v = per_bin;
        }
    }
    out
}

/// Divergence at every candidate threshold, as `(threshold, kl)` pairs.
pub fn kl_sweep(hist: &ActivationHistogram, bits: u8) -> Result<Vec<(f64, f64)>> {
    if hist.count == 0 {
        return Err(Error::EmptyCalibration);
    }
    if !(1..=8).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit width must be in 1..=8, got {bits}"
        )));
    }
    let num_bins = hist.num_bins();
    let levels = 1usize << bits;
    let start = SEARCH_START_BINS.min(num_bins);
    let width = hist.bin_width();

    let mut sweep = Vec::with_capacity(num_bins - start + 1);
    for clip_bins in start..=num_bins {
        let tail: u64 = hist.bins[clip_bins..].iter().sum();
        let mut reference: Vec<f64> = hist.bins[..clip_bins].iter().map(|&c| c as f64).collect();
        reference[clip_bins - 1] += tail as f64;
        let mut candidate = requantized_expansion(&hist.bins[..clip_bins], levels);
        normalize(&mut reference);
        normalize(&mut candidate);
        smooth(&mut candidate);
        let kl = kl_divergence(&reference, &candidate);
        sweep.push((clip_bins as f64 * width, kl));
    }
    Ok(sweep)
}

/// Pick the clip threshold minimizing KL divergence and derive quantization
/// parameters from it.
pub fn calibrate_kl(hist: &ActivationHistogram, bits: u8) -> Result<QuantParams> {
    if hist.count == 0 {
        return Err(Error::EmptyCalibration);
    }
    let observed = (
        hist.observed_min.min(0.0),
        hist.observed_max.max(0.0),
    );
    if hist.max_abs <= 0.0 {
        // all-zero activations
        return QuantParams::from_clip_range(0.0, 0.0, bits, observed);
    }
    let sweep = kl_sweep(hist, bits)?;
    let mut best = &sweep[0];
    for entry in &sweep[1..] {
        if entry.1 < best.1 {
            best = entry;
        }
    }
    let threshold = best.0 as f32;
    if hist.has_negative() {
        QuantParams::from_clip_range(-threshold, threshold, bits, observed)
    } else {
        QuantParams::from_clip_range(0.0, threshold, bits, observed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{calibrate_minmax, quant_error_stats};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_samples(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn uniform_distribution_keeps_nearly_full_range() {
        let values = uniform_samples(10_000, 11);
        let hist = ActivationHistogram::from_values(&values, KL_HISTOGRAM_BINS).unwrap();
        let params = calibrate_kl(&hist, 8).unwrap();
        let (_, clip_hi) = params.clip_range();
        let max = values.iter().fold(0.0f32, |m, &v| m.max(v));
        let two_bins = 2.0 * max as f64 / KL_HISTOGRAM_BINS as f64;
        assert!(
            (clip_hi as f64 - max as f64).abs() <= two_bins + 1e-6,
            "clip {clip_hi} should sit within two bin widths of {max}"
        );
    }

    #[test]
    fn outlier_is_clipped_and_beats_minmax_mse() {
        let mut values = uniform_samples(10_000, 13);
        values.push(100.0);
        // finer histogram so the 128-bin search floor sits below 2.0
        let hist = ActivationHistogram::from_values(&values, 8192).unwrap();
        let params = calibrate_kl(&hist, 8).unwrap();
        let (_, clip_hi) = params.clip_range();
        assert!(clip_hi < 2.0, "outlier should be clipped, got threshold {clip_hi}");

        let bulk = Tensor::new(vec![10_000], values[..10_000].to_vec()).unwrap();
        let all = Tensor::new(vec![values.len()], values.clone()).unwrap();
        let minmax = calibrate_minmax(&all, 8).unwrap();
        let (kl_mse, _) = quant_error_stats(&bulk, &params);
        let (mm_mse, _) = quant_error_stats(&bulk, &minmax);
        assert!(
            kl_mse < mm_mse,
            "KL calibration must beat min-max on the non-outlier mass ({kl_mse} vs {mm_mse})"
        );
    }

    #[test]
    fn all_zero_activations_hit_the_scale_floor() {
        let hist = ActivationHistogram::from_values(&[0.0; 64], 2048).unwrap();
        let params = calibrate_kl(&hist, 8).unwrap();
        assert_eq!(params.scale, crate::quant::SCALE_FLOOR);
    }

    #[test]
    fn chosen_threshold_never_has_higher_kl_than_minmax_threshold() {
        let mut values = uniform_samples(5000, 17);
        values.extend_from_slice(&[40.0, -3.0, 2.5]);
        let hist = ActivationHistogram::from_values(&values, 2048).unwrap();
        let sweep = kl_sweep(&hist, 8).unwrap();
        let minmax_kl = sweep.last().unwrap().1;
        let best_kl = sweep.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        assert!(best_kl <= minmax_kl);
    }

    #[test]
    fn negative_activations_clip_symmetrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f32> = (0..4000).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let hist = ActivationHistogram::from_values(&values, 2048).unwrap();
        let params = calibrate_kl(&hist, 8).unwrap();
        let (lo, hi) = params.clip_range();
        assert!(lo < 0.0);
        assert!((lo + hi).abs() < params.scale * 1.5, "roughly symmetric: [{lo}, {hi}]");
    }

    #[test]
    fn empty_histogram_is_an_error() {
        let hist = ActivationHistogram::new(1.0, 2048).unwrap();
        assert!(calibrate_kl(&hist, 8).is_err());
    }

    #[test]
    fn merge_matches_single_shot_observation() {
        let values = uniform_samples(2000, 5);
        let max_abs = values.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let mut whole = ActivationHistogram::new(max_abs, 512).unwrap();
        whole.observe(&values);
        let mut a = ActivationHistogram::new(max_abs, 512).unwrap();
        let mut b = ActivationHistogram::new(max_abs, 512).unwrap();
        a.observe(&values[..777]);
        b.observe(&values[777..]);
        a.merge(&b);
        assert_eq!(a.bins, whole.bins);
        assert_eq!(a.count(), whole.count());
    }
}
