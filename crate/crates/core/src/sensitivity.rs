//! Diagonal-Fisher filter sensitivity.
//!
//! For every prunable unit the sensitivity S is the mean, over calibration
//! samples, of the squared L2 norm of the per-sample loss gradient with
//! respect to that unit's weights. Gradients are taken one sample at a time
//! (unit batches); residual-coupled groups report the sum of their members'
//! values. Accumulation order is fixed, so S is reproducible across thread
//! counts.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;

use crate::cost::CostCounters;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{FilterId, LayerSpec, ModelGraph, ParamRole};
use crate::tensor::{GradTape, Tensor};

/// What gets ranked and pruned: a lone filter or a residual-coupled group.
#[derive(Debug, Clone, PartialEq)]
pub enum PruneUnit {
    Filter(FilterId),
    Group {
        group_index: usize,
        members: Vec<FilterId>,
    },
}

impl PruneUnit {
    pub fn members(&self) -> &[FilterId] {
        match self {
            PruneUnit::Filter(f) => std::slice::from_ref(f),
            PruneUnit::Group { members, .. } => members,
        }
    }

    /// Filters removed when this unit is pruned.
    pub fn size(&self) -> usize {
        self.members().len()
    }

    /// Deterministic tie-break key: the smallest (layer, channel) member.
    pub fn sort_key(&self) -> FilterId {
        *self.members().iter().min().expect("units are non-empty")
    }
}

/// Sensitivity of one prunable unit.
#[derive(Debug, Clone)]
pub struct SensitivityRecord {
    pub unit: PruneUnit,
    pub s_value: f64,
}

/// Records sorted ascending by sensitivity — the pruning priority queue.
#[derive(Debug, Clone)]
pub struct RankedSaliencyList {
    records: Vec<SensitivityRecord>,
}

impl RankedSaliencyList {
    pub fn records(&self) -> &[SensitivityRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One line per record, `layer channel s_value`, in ranked order. Groups
    /// print their tie-break member.
    pub fn dump(&self, w: &mut impl Write) -> std::io::Result<()> {
        for rec in &self.records {
            let key = rec.unit.sort_key();
            writeln!(w, "{} {} {}", key.layer, key.channel, rec.s_value)?;
        }
        Ok(())
    }
}

/// Running mean of squared per-sample gradient norms, one slot per unit.
///
/// This is the estimator itself, independent of any model structure; the
/// Fisher-oracle tests drive it directly.
#[derive(Debug, Clone)]
pub struct FisherAccumulator {
    sums: Vec<f64>,
    count: u64,
}

impl FisherAccumulator {
    pub fn new(slots: usize) -> Self {
        Self {
            sums: vec![0.0; slots],
            count: 0,
        }
    }

    /// Adds one sample's squared gradient norms, slot by slot.
    pub fn add_sample(&mut self, sq_norms: &[f64]) {
        debug_assert_eq!(sq_norms.len(), self.sums.len());
        for (acc, &v) in self.sums.iter_mut().zip(sq_norms) {
            *acc += v;
        }
        self.count += 1;
    }

    /// Mean squared gradient norm per slot.
    pub fn finish(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|&s| s / n).collect()
    }
}

/// Per-filter squared gradient norms for one calibration sample.
fn per_sample_filter_norms(
    model: &ModelGraph,
    sample: &Sample,
    conv_layers: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = GradTape::new();
    let mut shape = vec![1];
    shape.extend_from_slice(sample.input.shape());
    let input = Tensor::new(shape, sample.input.elems().to_vec())
        .expect("adding a batch axis preserves the element count");
    let fw = model.forward_taped(&mut tape, input)?;
    let loss = tape.softmax_cross_entropy(fw.logits, &[sample.label])?;
    let grads = tape.backward(loss)?;

    let mut norms = Vec::new();
    for &layer in conv_layers {
        let binding = fw
            .params
            .iter()
            .find(|b| b.layer == layer && b.role == ParamRole::Kernel)
            .expect("every conv layer binds a kernel");
        let grad = grads
            .get(binding.value)
            .expect("loss depends on every kernel");
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { layer });
        }
        let cout = grad.shape()[0];
        let per_filter = grad.numel() / cout;
        for c in 0..cout {
            norms.push(grad.sq_norm_range_f64(c * per_filter, per_filter));
        }
    }
    Ok(norms)
}

/// Computes S for every conv filter of the model over the calibration set,
/// aggregating residual groups by summing their members. Adds `|calib|`
/// gradient passes to the counters.
pub fn compute_sensitivity(
    model: &ModelGraph,
    calib: &[Sample],
    counters: &CostCounters,
) -> Result<Vec<SensitivityRecord>> {
    if calib.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let conv_layers = model.conv_layers();
    let slots: usize = conv_layers
        .iter()
        .map(|&l| model.layers[l].out_channels().unwrap())
        .sum();

    // Per-sample norms in parallel, then a fixed-order reduction.
    let per_sample: Vec<Result<Vec<f64>>> = calib
        .par_iter()
        .map(|sample| per_sample_filter_norms(model, sample, &conv_layers))
        .collect();
    let mut acc = FisherAccumulator::new(slots);
    for norms in per_sample {
        acc.add_sample(&norms?);
    }
    counters.add_grad_passes(calib.len() as u64);
    let means = acc.finish();

    // Map flat slots back to (layer, channel).
    let mut slot_of = std::collections::HashMap::new();
    let mut slot = 0;
    for &layer in &conv_layers {
        let cout = model.layers[layer].out_channels().unwrap();
        for c in 0..cout {
            slot_of.insert(FilterId::new(layer, c), slot);
            slot += 1;
        }
    }

    let mut grouped: HashSet<FilterId> = HashSet::new();
    let mut records = Vec::new();
    for (gi, group) in model.residual_groups().iter().enumerate() {
        for m in &group.members {
            grouped.insert(*m);
        }
        if group.anchored_to_input {
            // coupled to the raw input; never a pruning candidate
            continue;
        }
        let s: f64 = group.members.iter().map(|m| means[slot_of[m]]).sum();
        records.push(SensitivityRecord {
            unit: PruneUnit::Group {
                group_index: gi,
                members: group.members.clone(),
            },
            s_value: s,
        });
    }
    for &layer in &conv_layers {
        let cout = model.layers[layer].out_channels().unwrap();
        for c in 0..cout {
            let id = FilterId::new(layer, c);
            if grouped.contains(&id) {
                continue;
            }
            records.push(SensitivityRecord {
                unit: PruneUnit::Filter(id),
                s_value: means[slot_of[&id]],
            });
        }
    }
    Ok(records)
}

/// Stable ascending sort by (S, layer, channel). Rejects duplicate filters.
pub fn rank_filters(records: Vec<SensitivityRecord>) -> Result<RankedSaliencyList> {
    let mut seen = HashSet::new();
    for rec in &records {
        if !rec.s_value.is_finite() || rec.s_value < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sensitivity must be finite and non-negative, got {}",
                rec.s_value
            )));
        }
        for m in rec.unit.members() {
            if !seen.insert(*m) {
                return Err(Error::DuplicateFilter(*m));
            }
        }
    }
    let mut records = records;
    records.sort_by(|a, b| {
        a.s_value
            .total_cmp(&b.s_value)
            .then_with(|| a.unit.sort_key().cmp(&b.unit.sort_key()))
    });
    Ok(RankedSaliencyList { records })
}

/// L1-magnitude ranking over the same units — the heuristic baseline.
pub fn rank_by_magnitude(model: &ModelGraph) -> Result<RankedSaliencyList> {
    let mut l1_of = std::collections::HashMap::new();
    for &layer in &model.conv_layers() {
        let LayerSpec::Conv { kernel, .. } = &model.layers[layer] else {
            unreachable!()
        };
        let cout = kernel.shape()[0];
        let per_filter = kernel.numel() / cout;
        for c in 0..cout {
            let l1: f64 = kernel.elems()[c * per_filter..(c + 1) * per_filter]
                .iter()
                .map(|v| v.abs() as f64)
                .sum();
            l1_of.insert(FilterId::new(layer, c), l1);
        }
    }
    let mut grouped: HashSet<FilterId> = HashSet::new();
    let mut records = Vec::new();
    for (gi, group) in model.residual_groups().iter().enumerate() {
        for m in &group.members {
            grouped.insert(*m);
        }
        if group.anchored_to_input {
            continue;
        }
        records.push(SensitivityRecord {
            unit: PruneUnit::Group {
                group_index: gi,
                members: group.members.clone(),
            },
            s_value: group.members.iter().map(|m| l1_of[m]).sum(),
        });
    }
    for (id, l1) in &l1_of {
        if !grouped.contains(id) {
            records.push(SensitivityRecord {
                unit: PruneUnit::Filter(*id),
                s_value: *l1,
            });
        }
    }
    rank_filters(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_mini_convnet;

    fn record(layer: usize, channel: usize, s: f64) -> SensitivityRecord {
        SensitivityRecord {
            unit: PruneUnit::Filter(FilterId::new(layer, channel)),
            s_value: s,
        }
    }

    #[test]
    fn ranking_sorts_ascending() {
        let records = vec![record(0, 0, 3.0), record(0, 1, 1.0), record(0, 2, 2.0)];
        let ranked = rank_filters(records).unwrap();
        let channels: Vec<usize> = ranked
            .records()
            .iter()
            .map(|r| r.unit.sort_key().channel)
            .collect();
        assert_eq!(channels, vec![1, 2, 0]);
    }

    #[test]
    fn equal_sensitivities_preserve_layer_channel_order() {
        let records = vec![
            record(1, 2, 0.5),
            record(0, 1, 0.5),
            record(1, 0, 0.5),
            record(0, 0, 0.5),
        ];
        let ranked = rank_filters(records).unwrap();
        let keys: Vec<(usize, usize)> = ranked
            .records()
            .iter()
            .map(|r| {
                let k = r.unit.sort_key();
                (k.layer, k.channel)
            })
            .collect();
        assert_eq!(keys, vec![(0, 0), (0, 1), (1, 0), (1, 2)]);
    }

    #[test]
    fn group_outranks_lone_filter_iff_summed_s_is_smaller() {
        let group = |s| SensitivityRecord {
            unit: PruneUnit::Group {
                group_index: 0,
                members: vec![FilterId::new(0, 0), FilterId::new(2, 0)],
            },
            s_value: s,
        };
        // group sum 0.4 < lone 0.5: group first
        let ranked = rank_filters(vec![record(1, 0, 0.5), group(0.4)]).unwrap();
        assert!(matches!(ranked.records()[0].unit, PruneUnit::Group { .. }));
        // group sum 0.9 > lone 0.5: lone first
        let ranked = rank_filters(vec![record(1, 0, 0.5), group(0.9)]).unwrap();
        assert!(matches!(ranked.records()[0].unit, PruneUnit::Filter(_)));
    }

    #[test]
    fn duplicate_filters_are_rejected() {
        let records = vec![record(0, 0, 1.0), record(0, 0, 2.0)];
        assert!(matches!(
            rank_filters(records),
            Err(Error::DuplicateFilter(_))
        ));
    }

    #[test]
    fn sensitivity_counts_one_grad_pass_per_sample() {
        let model = build_mini_convnet(0.125, (1, 8, 8), 4, 9).unwrap();
        let calib: Vec<Sample> = (0..100)
            .map(|i| Sample {
                input: Tensor::filled(&[1, 8, 8], (i % 7) as f32 * 0.1),
                label: i % 4,
            })
            .collect();
        let counters = CostCounters::new();
        compute_sensitivity(&model, &calib, &counters).unwrap();
        assert_eq!(counters.grad_passes(), 100);
        compute_sensitivity(&model, &calib, &counters).unwrap();
        assert_eq!(counters.grad_passes(), 200, "a second run doubles the counter");
    }

    #[test]
    fn sensitivity_is_invariant_to_sample_order() {
        let model = build_mini_convnet(0.125, (1, 8, 8), 4, 3).unwrap();
        let calib: Vec<Sample> = (0..32)
            .map(|i| Sample {
                input: Tensor::filled(&[1, 8, 8], ((i * 13) % 11) as f32 * 0.07 - 0.3),
                label: i % 4,
            })
            .collect();
        let counters = CostCounters::new();
        let fwd = compute_sensitivity(&model, &calib, &counters).unwrap();
        let mut reversed = calib.clone();
        reversed.reverse();
        let rev = compute_sensitivity(&model, &reversed, &counters).unwrap();
        for (a, b) in fwd.iter().zip(&rev) {
            let denom = a.s_value.abs().max(1e-12);
            assert!(
                ((a.s_value - b.s_value) / denom).abs() < 1e-6,
                "{} vs {}",
                a.s_value,
                b.s_value
            );
        }
    }

    #[test]
    fn empty_calibration_set_is_an_error() {
        let model = build_mini_convnet(0.125, (1, 8, 8), 4, 3).unwrap();
        let counters = CostCounters::new();
        assert!(matches!(
            compute_sensitivity(&model, &[], &counters),
            Err(Error::EmptyCalibration)
        ));
    }
}
