//! Conditional, sensitivity-ordered structural filter removal.
//!
//! The loop walks the ranked list in ascending-sensitivity order, removing
//! one step's worth of filters at a time, and accepts a candidate only while
//! the validation accuracy stays within the configured drop tolerance. The
//! first rejection terminates the loop. Residual groups leave the ranked
//! list together or not at all, and every conv layer keeps at least one
//! channel: the highest-sensitivity unit touching each layer is withheld as
//! its survivor, so exhausting the list is always structurally legal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rayon::prelude::*;

use crate::cost::CostCounters;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{predictions, FilterId, LayerSpec, ModelGraph};
use crate::sensitivity::{
    compute_sensitivity, rank_filters, PruneUnit, RankedSaliencyList, SensitivityRecord,
};
use crate::tensor::Tensor;

/// Pruning-step configuration.
#[derive(Debug, Clone)]
pub struct PruneConfig {
    /// Step size as a fraction of the prunable filter count.
    pub delta_fraction: f64,
    /// Maximum permissible absolute top-1 accuracy drop.
    pub delta_max: f64,
    /// Layers whose filters are never pruned.
    pub excluded_layers: Vec<usize>,
    /// Recompute sensitivities after every accepted step instead of ranking
    /// once up front. Off by default.
    pub refresh_sensitivity: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            delta_fraction: 0.01,
            delta_max: 0.015,
            excluded_layers: Vec::new(),
            refresh_sensitivity: false,
        }
    }
}

impl PruneConfig {
    /// Default config with the stem conv excluded (the classifier holds no
    /// conv filters, so it is never a candidate to begin with).
    pub fn with_default_exclusions(model: &ModelGraph) -> Self {
        Self {
            excluded_layers: model.stem_layer().into_iter().collect(),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta_fraction > 0.0 && self.delta_fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "delta_fraction must be in (0, 1], got {}",
                self.delta_fraction
            )));
        }
        if !(self.delta_max >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "delta_max must be non-negative, got {}",
                self.delta_max
            )));
        }
        Ok(())
    }
}

/// One loop iteration: the sparsity it proposed, the accuracy it measured,
/// and whether the constraint admitted it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneStep {
    pub step: usize,
    pub theta: f64,
    pub accuracy: f64,
    pub accepted: bool,
}

/// Prunable-vs-removed accounting for one conv layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSparsity {
    pub layer: usize,
    pub prunable: usize,
    pub removed: usize,
}

/// Outcome of a pruning run.
#[derive(Debug, Clone)]
pub struct PruneState {
    /// The last accepted model.
    pub model: ModelGraph,
    /// Removed filters over original prunable filters.
    pub theta: f64,
    /// Validation accuracy of the accepted model.
    pub accuracy: f64,
    pub history: Vec<PruneStep>,
    pub victims: Vec<FilterId>,
    /// Filters per loop step, `ceil(delta_fraction * prunable)`.
    pub delta_filters: usize,
    pub prunable_filters: usize,
    pub per_layer: Vec<LayerSparsity>,
}

impl PruneState {
    /// History lines in the form `step theta accuracy accepted`.
    pub fn history_lines(&self) -> String {
        let mut out = String::new();
        for h in &self.history {
            out.push_str(&format!(
                "{} {:.6} {:.6} {}\n",
                h.step, h.theta, h.accuracy, h.accepted
            ));
        }
        out
    }
}

/// Top-1 accuracy over a dataset. Adds `|dataset|` inference passes.
pub fn validate_accuracy(
    model: &ModelGraph,
    dataset: &[Sample],
    counters: &CostCounters,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    counters.add_inference_passes(dataset.len() as u64);
    const BATCH: usize = 32;
    let per_chunk: Vec<Result<usize>> = dataset
        .par_chunks(BATCH)
        .map(|chunk| {
            let input = stack_inputs(chunk)?;
            let logits = model.forward(&input)?;
            let preds = predictions(&logits);
            Ok(preds
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.label)
                .count())
        })
        .collect();
    let mut correct = 0usize;
    for c in per_chunk {
        correct += c?;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

pub(crate) fn stack_inputs(samples: &[Sample]) -> Result<Tensor> {
    let first = samples[0].input.shape();
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first);
    let mut elems = Vec::with_capacity(shape.iter().product());
    for s in samples {
        if s.input.shape() != first {
            return Err(Error::ShapeMismatch {
                op: "stack_inputs",
                detail: format!("{:?} vs {:?}", s.input.shape(), first),
            });
        }
        elems.extend_from_slice(s.input.elems());
    }
    Tensor::new(shape, elems)
}

fn keep_indices(n: usize, del: Option<&BTreeSet<usize>>) -> Vec<usize> {
    match del {
        Some(set) => (0..n).filter(|i| !set.contains(i)).collect(),
        None => (0..n).collect(),
    }
}

fn slice_1d(t: &Tensor, keep: &[usize]) -> Tensor {
    let elems: Vec<f32> = keep.iter().map(|&i| t.elems()[i]).collect();
    Tensor::new(vec![keep.len()], elems).expect("1-d slice")
}

fn slice_kernel(kernel: &Tensor, keep_out: &[usize], keep_in: &[usize]) -> Tensor {
    let (_, cin, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let plane = kh * kw;
    let mut elems = Vec::with_capacity(keep_out.len() * keep_in.len() * plane);
    for &co in keep_out {
        for &ci in keep_in {
            let base = (co * cin + ci) * plane;
            elems.extend_from_slice(&kernel.elems()[base..base + plane]);
        }
    }
    Tensor::new(vec![keep_out.len(), keep_in.len(), kh, kw], elems).expect("kernel slice")
}

fn slice_cols(weight: &Tensor, keep_in: &[usize]) -> Tensor {
    let (o_dim, f) = (weight.shape()[0], weight.shape()[1]);
    let mut elems = Vec::with_capacity(o_dim * keep_in.len());
    for o in 0..o_dim {
        for &fi in keep_in {
            elems.push(weight.elems()[o * f + fi]);
        }
    }
    Tensor::new(vec![o_dim, keep_in.len()], elems).expect("column slice")
}

/// Removes the given conv output channels and every input-channel slice that
/// consumed them. Residual groups must be removed whole; no layer may lose
/// all of its channels.
pub fn remove_filters(model: &ModelGraph, victims: &[FilterId]) -> Result<ModelGraph> {
    let mut del: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for v in victims {
        let Some(LayerSpec::Conv { kernel, .. }) = model.layers.get(v.layer) else {
            return Err(Error::InvalidArgument(format!(
                "filter ({}, {}) does not address a conv layer",
                v.layer, v.channel
            )));
        };
        if v.channel >= kernel.shape()[0] {
            return Err(Error::InvalidArgument(format!(
                "channel {} out of range for layer {} with {} filters",
                v.channel,
                v.layer,
                kernel.shape()[0]
            )));
        }
        if !del.entry(v.layer).or_default().insert(v.channel) {
            return Err(Error::DuplicateFilter(*v));
        }
    }

    let victim_set: HashSet<FilterId> = victims.iter().copied().collect();
    for group in model.residual_groups() {
        let hit = group
            .members
            .iter()
            .filter(|m| victim_set.contains(m))
            .count();
        if hit == 0 {
            continue;
        }
        if group.anchored_to_input {
            return Err(Error::ResidualGroupViolation(format!(
                "group {:?} is aligned with the model input and cannot be pruned",
                group.members
            )));
        }
        if hit != group.members.len() {
            return Err(Error::ResidualGroupViolation(format!(
                "group {:?} must be pruned whole, got {hit} of {} members",
                group.members,
                group.members.len()
            )));
        }
    }

    for (&layer, set) in &del {
        let cout = model.layers[layer].out_channels().unwrap();
        if set.len() == cout {
            return Err(Error::LayerWouldBeEmpty { layer });
        }
    }

    let flow = model.flow()?;
    let in_del_of = |i: usize| -> Result<Option<&BTreeSet<usize>>> {
        let producers = &flow.input_producers[i];
        if producers.is_empty() {
            return Ok(None);
        }
        let mut sets = producers.iter().map(|p| del.get(p));
        let first = sets.next().unwrap();
        for s in sets {
            if s != first {
                return Err(Error::ResidualGroupViolation(format!(
                    "layer {i} consumes unevenly pruned producers {producers:?}"
                )));
            }
        }
        Ok(first)
    };

    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let new_layer = match layer {
            LayerSpec::Conv { kernel, bias, stride, padding } => {
                let keep_out = keep_indices(kernel.shape()[0], del.get(&i));
                let keep_in = keep_indices(kernel.shape()[1], in_del_of(i)?);
                LayerSpec::Conv {
                    kernel: slice_kernel(kernel, &keep_out, &keep_in),
                    bias: slice_1d(bias, &keep_out),
                    stride: *stride,
                    padding: *padding,
                }
            }
            LayerSpec::BatchNorm { gamma, beta, mean, var, eps } => {
                let keep = keep_indices(gamma.shape()[0], in_del_of(i)?);
                LayerSpec::BatchNorm {
                    gamma: slice_1d(gamma, &keep),
                    beta: slice_1d(beta, &keep),
                    mean: slice_1d(mean, &keep),
                    var: slice_1d(var, &keep),
                    eps: *eps,
                }
            }
            LayerSpec::Dense { weight, bias } => {
                let keep_in = keep_indices(weight.shape()[1], in_del_of(i)?);
                LayerSpec::Dense {
                    weight: slice_cols(weight, &keep_in),
                    bias: bias.clone(),
                }
            }
            LayerSpec::Classifier { weight, bias } => {
                let keep_in = keep_indices(weight.shape()[1], in_del_of(i)?);
                LayerSpec::Classifier {
                    weight: slice_cols(weight, &keep_in),
                    bias: bias.clone(),
                }
            }
            passthrough => passthrough.clone(),
        };
        layers.push(new_layer);
    }
    ModelGraph::new(
        model.name.clone(),
        layers,
        model.input_shape,
        model.num_classes,
    )
}

/// The ranked records that are actually available to the pruning loop:
/// excluded layers drop out, and the highest-sensitivity unit touching each
/// remaining layer is withheld as that layer's survivor.
pub fn prunable_units<'a>(
    ranked: &'a RankedSaliencyList,
    excluded_layers: &[usize],
) -> Vec<&'a SensitivityRecord> {
    let excluded: HashSet<usize> = excluded_layers.iter().copied().collect();
    let is_excluded = |rec: &SensitivityRecord| {
        rec.unit.members().iter().any(|m| excluded.contains(&m.layer))
    };
    let mut needs_survivor: HashSet<usize> = ranked
        .records()
        .iter()
        .filter(|r| !is_excluded(r))
        .flat_map(|r| r.unit.members().iter().map(|m| m.layer))
        .collect();
    let mut reserved: HashSet<usize> = HashSet::new();
    for (idx, rec) in ranked.records().iter().enumerate().rev() {
        if needs_survivor.is_empty() {
            break;
        }
        if is_excluded(rec) {
            continue;
        }
        let touches: Vec<usize> = rec.unit.members().iter().map(|m| m.layer).collect();
        if touches.iter().any(|l| needs_survivor.contains(l)) {
            reserved.insert(idx);
            for l in touches {
                needs_survivor.remove(&l);
            }
        }
    }
    ranked
        .records()
        .iter()
        .enumerate()
        .filter(|(i, rec)| !is_excluded(rec) && !reserved.contains(i))
        .map(|(_, rec)| rec)
        .collect()
}

/// The ranked list must cover exactly this model's filters, with group units
/// mirroring the model's residual groups.
fn check_ranked_matches_model(model: &ModelGraph, ranked: &RankedSaliencyList) -> Result<()> {
    let mut expected: HashSet<FilterId> = HashSet::new();
    for &layer in &model.conv_layers() {
        for c in 0..model.layers[layer].out_channels().unwrap() {
            expected.insert(FilterId::new(layer, c));
        }
    }
    let mut expected_groups: HashMap<usize, &[FilterId]> = HashMap::new();
    for (gi, group) in model.residual_groups().iter().enumerate() {
        if group.anchored_to_input {
            for m in &group.members {
                expected.remove(m);
            }
        } else {
            expected_groups.insert(gi, &group.members);
        }
    }

    let mut actual: HashSet<FilterId> = HashSet::new();
    let mut seen_groups: HashSet<usize> = HashSet::new();
    for rec in ranked.records() {
        match &rec.unit {
            PruneUnit::Filter(f) => {
                actual.insert(*f);
            }
            PruneUnit::Group { group_index, members } => {
                match expected_groups.get(group_index) {
                    Some(expected_members) if *expected_members == members.as_slice() => {}
                    _ => {
                        return Err(Error::RankedListMismatch(format!(
                            "group {group_index} does not match the model's residual groups"
                        )))
                    }
                }
                seen_groups.insert(*group_index);
                actual.extend(members.iter().copied());
            }
        }
    }
    if seen_groups.len() != expected_groups.len() {
        return Err(Error::RankedListMismatch(format!(
            "ranked list has {} residual groups, model has {}",
            seen_groups.len(),
            expected_groups.len()
        )));
    }
    if actual != expected {
        return Err(Error::RankedListMismatch(format!(
            "ranked list covers {} filters, model has {} prunable",
            actual.len(),
            expected.len()
        )));
    }
    Ok(())
}

fn per_layer_table(
    units: &[&SensitivityRecord],
    victims: &[FilterId],
) -> Vec<LayerSparsity> {
    let mut table: BTreeMap<usize, LayerSparsity> = BTreeMap::new();
    for rec in units {
        for m in rec.unit.members() {
            table
                .entry(m.layer)
                .or_insert(LayerSparsity { layer: m.layer, prunable: 0, removed: 0 })
                .prunable += 1;
        }
    }
    for v in victims {
        if let Some(row) = table.get_mut(&v.layer) {
            row.removed += 1;
        }
    }
    table.into_values().collect()
}

/// Iterative conditional pruning under the accuracy constraint.
///
/// `a_baseline` must have been measured on `val` with [`validate_accuracy`].
/// Each iteration consumes the next step's worth of units from the ranked
/// list (whole residual groups, which may overshoot the step size), builds
/// the cumulative candidate, and accepts it only if the accuracy drop stays
/// within `delta_max`. The first rejection ends the loop; the rejected step
/// stays in the history.
pub fn conditional_prune(
    model: &ModelGraph,
    a_baseline: f64,
    ranked: &RankedSaliencyList,
    cfg: &PruneConfig,
    val: &[Sample],
    counters: &CostCounters,
) -> Result<PruneState> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_ranked_matches_model(model, ranked)?;
    let units = prunable_units(ranked, &cfg.excluded_layers);
    let prunable: usize = units.iter().map(|r| r.unit.size()).sum();
    if prunable == 0 {
        return Ok(PruneState {
            model: model.clone(),
            theta: 0.0,
            accuracy: a_baseline,
            history: Vec::new(),
            victims: Vec::new(),
            delta_filters: 0,
            prunable_filters: 0,
            per_layer: Vec::new(),
        });
    }
    let delta = ((cfg.delta_fraction * prunable as f64).ceil() as usize).max(1);

    let mut accepted: Vec<FilterId> = Vec::new();
    let mut accepted_model = model.clone();
    let mut accuracy = a_baseline;
    let mut history = Vec::new();
    let mut cursor = 0usize;
    let mut step = 0usize;
    while cursor < units.len() {
        let mut fresh: Vec<FilterId> = Vec::new();
        while cursor < units.len() && fresh.len() < delta {
            fresh.extend_from_slice(units[cursor].unit.members());
            cursor += 1;
        }
        let mut candidate_victims = accepted.clone();
        candidate_victims.extend_from_slice(&fresh);
        let candidate = remove_filters(model, &candidate_victims)?;
        counters.add_prune_step();
        step += 1;
        let a_candidate = validate_accuracy(&candidate, val, counters)?;
        let theta = candidate_victims.len() as f64 / prunable as f64;
        let ok = a_baseline - a_candidate <= cfg.delta_max;
        history.push(PruneStep {
            step,
            theta,
            accuracy: a_candidate,
            accepted: ok,
        });
        if ok {
            accepted = candidate_victims;
            accepted_model = candidate;
            accuracy = a_candidate;
        } else {
            break;
        }
    }

    let per_layer = per_layer_table(&units, &accepted);
    Ok(PruneState {
        theta: accepted.len() as f64 / prunable as f64,
        model: accepted_model,
        accuracy,
        victims: accepted,
        history,
        delta_filters: delta,
        prunable_filters: prunable,
        per_layer,
    })
}

/// Variant that recomputes sensitivity on the surviving model after every
/// accepted step. Costs one extra sensitivity pass per acceptance.
pub fn conditional_prune_refreshing(
    model: &ModelGraph,
    a_baseline: f64,
    cfg: &PruneConfig,
    calib: &[Sample],
    val: &[Sample],
    counters: &CostCounters,
) -> Result<PruneState> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut current = model.clone();
    let mut accuracy = a_baseline;
    let mut history = Vec::new();
    let mut removed_per_layer: BTreeMap<usize, usize> = BTreeMap::new();
    let mut removed_total = 0usize;
    let mut prunable = 0usize;
    let mut delta = 0usize;
    let mut first_units_table: Vec<LayerSparsity> = Vec::new();
    let mut step = 0usize;
    loop {
        let records = compute_sensitivity(&current, calib, counters)?;
        let ranked = rank_filters(records)?;
        let units = prunable_units(&ranked, &cfg.excluded_layers);
        if step == 0 {
            prunable = units.iter().map(|r| r.unit.size()).sum();
            if prunable == 0 {
                break;
            }
            delta = ((cfg.delta_fraction * prunable as f64).ceil() as usize).max(1);
            first_units_table = per_layer_table(&units, &[]);
        }
        let mut fresh: Vec<FilterId> = Vec::new();
        let mut cursor = 0usize;
        while cursor < units.len() && fresh.len() < delta && removed_total + fresh.len() < prunable
        {
            fresh.extend_from_slice(units[cursor].unit.members());
            cursor += 1;
        }
        if fresh.is_empty() {
            break;
        }
        let candidate = remove_filters(&current, &fresh)?;
        counters.add_prune_step();
        step += 1;
        let a_candidate = validate_accuracy(&candidate, val, counters)?;
        let theta = (removed_total + fresh.len()) as f64 / prunable as f64;
        let ok = a_baseline - a_candidate <= cfg.delta_max;
        history.push(PruneStep {
            step,
            theta,
            accuracy: a_candidate,
            accepted: ok,
        });
        if !ok {
            break;
        }
        for v in &fresh {
            *removed_per_layer.entry(v.layer).or_default() += 1;
        }
        removed_total += fresh.len();
        current = candidate;
        accuracy = a_candidate;
    }
    for row in &mut first_units_table {
        row.removed = removed_per_layer.get(&row.layer).copied().unwrap_or(0);
    }
    Ok(PruneState {
        model: current,
        theta: if prunable == 0 { 0.0 } else { removed_total as f64 / prunable as f64 },
        accuracy,
        history,
        victims: Vec::new(),
        delta_filters: delta,
        prunable_filters: prunable,
        per_layer: first_units_table,
    })
}

/// Unconditional structural pruning to a fixed sparsity target, used by the
/// magnitude-only baseline. No accuracy constraint is checked.
#[derive(Debug, Clone)]
pub struct FixedPruneOutcome {
    pub model: ModelGraph,
    pub victims: Vec<FilterId>,
    pub theta: f64,
    pub prunable_filters: usize,
    pub per_layer: Vec<LayerSparsity>,
}

pub fn prune_to_sparsity(
    model: &ModelGraph,
    ranked: &RankedSaliencyList,
    theta_target: f64,
    excluded_layers: &[usize],
) -> Result<FixedPruneOutcome> {
    if !(0.0..=1.0).contains(&theta_target) {
        return Err(Error::InvalidArgument(format!(
            "sparsity target must be in [0, 1], got {theta_target}"
        )));
    }
    check_ranked_matches_model(model, ranked)?;
    let units = prunable_units(ranked, excluded_layers);
    let prunable: usize = units.iter().map(|r| r.unit.size()).sum();
    let target = (theta_target * prunable as f64).round() as usize;
    let mut victims: Vec<FilterId> = Vec::new();
    let mut cursor = 0;
    while cursor < units.len() && victims.len() < target {
        victims.extend_from_slice(units[cursor].unit.members());
        cursor += 1;
    }
    let pruned = remove_filters(model, &victims)?;
    let per_layer = per_layer_table(&units, &victims);
    Ok(FixedPruneOutcome {
        model: pruned,
        theta: if prunable == 0 { 0.0 } else { victims.len() as f64 / prunable as f64 },
        victims,
        prunable_filters: prunable,
        per_layer,
    })
}
