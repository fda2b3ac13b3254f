//! End-to-end orchestration: sensitivity, conditional pruning, quantization,
//! baseline variants, and report assembly.
//!
//! The pass counters returned by [`run_hqp`] cover exactly the compression
//! work (one gradient pass per calibration sample, the pruning loop's
//! validation passes, and the quantization calibration passes). Baseline and
//! holdout evaluations are bookkeeping around the method, so they accumulate
//! in a separate evaluation bucket.

use rayon::prelude::*;

use crate::bench::{benchmark_model, benchmark_quantized};
use crate::config::Config;
use crate::cost::CostCounters;
use crate::data::{load_dataset, DatasetBundle, Sample};
use crate::error::{Error, Result};
use crate::graph::{predictions, ModelGraph};
use crate::pruning::{
    conditional_prune, conditional_prune_refreshing, prune_to_sparsity, validate_accuracy,
    FixedPruneOutcome, PruneConfig, PruneState,
};
use crate::quant::{int8_forward, quantize_model, QuantizedModel};
use crate::report::{MethodRow, RunReport};
use crate::sensitivity::{compute_sensitivity, rank_by_magnitude, rank_filters};
use crate::train::train_baseline;

/// Inference/gradient pass attribution for one HQP run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhasePasses {
    /// Gradient passes of the sensitivity stage (method counters).
    pub sensitivity_grad: u64,
    /// Validation passes inside the pruning loop (method counters).
    pub loop_inference: u64,
    /// Calibration passes of the quantization stage (method counters).
    pub calib_inference: u64,
    /// Baseline accuracy measurements (evaluation bucket).
    pub baseline_eval: u64,
    /// Holdout measurements of the sparse and quantized models (evaluation
    /// bucket).
    pub holdout_inference: u64,
}

#[derive(Debug)]
pub struct HqpOutcome {
    pub quantized: QuantizedModel,
    pub prune: PruneState,
    /// Method cost counters; see module docs for what they include.
    pub counters: CostCounters,
    pub phases: PhasePasses,
    pub baseline_val_accuracy: f64,
    pub baseline_holdout_accuracy: f64,
    pub sparse_holdout_accuracy: f64,
    pub quant_holdout_accuracy: f64,
    /// Fraction of holdout samples where int8 and float-sparse argmax agree.
    pub int8_agreement: f64,
    /// True when the post-quantization holdout drop exceeds `delta_max`.
    /// Reported, never acted on: the constraint binds the pruning stage.
    pub post_quant_breach: bool,
}

/// Accuracy of the integer model and its argmax agreement with a float
/// reference model, over one dataset.
pub fn int8_accuracy_and_agreement(
    qmodel: &QuantizedModel,
    reference: &ModelGraph,
    dataset: &[Sample],
    counters: &CostCounters,
) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    counters.add_inference_passes(dataset.len() as u64);
    const BATCH: usize = 32;
    let per_chunk: Vec<Result<(usize, usize)>> = dataset
        .par_chunks(BATCH)
        .map(|chunk| {
            let input = crate::pruning::stack_inputs(chunk)?;
            let q_logits = int8_forward(qmodel, &input)?;
            let f_logits = reference.forward(&input)?;
            let q_preds = predictions(&q_logits);
            let f_preds = predictions(&f_logits);
            let correct = q_preds
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.label)
                .count();
            let agree = q_preds.iter().zip(&f_preds).filter(|(a, b)| a == b).count();
            Ok((correct, agree))
        })
        .collect();
    let mut correct = 0usize;
    let mut agree = 0usize;
    for c in per_chunk {
        let (c, a) = c?;
        correct += c;
        agree += a;
    }
    let n = dataset.len() as f64;
    Ok((correct as f64 / n, agree as f64 / n))
}

/// The full pipeline on a trained model: sensitivity ranking, conditional
/// pruning under `cfg.delta_max`, then INT8 post-training quantization of
/// the accepted sparse model.
pub fn run_hqp(
    model: &ModelGraph,
    bundle: &DatasetBundle,
    cfg: &PruneConfig,
    bits: u8,
) -> Result<HqpOutcome> {
    let counters = CostCounters::new();
    let eval = CostCounters::new();

    let baseline_val_accuracy = validate_accuracy(model, &bundle.val, &eval)?;
    let baseline_holdout_accuracy = validate_accuracy(model, &bundle.holdout, &eval)?;
    let baseline_eval = eval.inference_passes();

    let prune = if cfg.refresh_sensitivity {
        conditional_prune_refreshing(
            model,
            baseline_val_accuracy,
            cfg,
            &bundle.calib,
            &bundle.val,
            &counters,
        )?
    } else {
        let records = compute_sensitivity(model, &bundle.calib, &counters)?;
        let ranked = rank_filters(records)?;
        conditional_prune(model, baseline_val_accuracy, &ranked, cfg, &bundle.val, &counters)?
    };
    let sensitivity_grad = counters.grad_passes();
    let loop_inference = counters.inference_passes();

    let quantized = quantize_model(&prune.model, &bundle.calib, bits, &counters)?;
    let calib_inference = counters.inference_passes() - loop_inference;

    let before_holdout = eval.inference_passes();
    let sparse_holdout_accuracy = validate_accuracy(&prune.model, &bundle.holdout, &eval)?;
    let (quant_holdout_accuracy, int8_agreement) =
        int8_accuracy_and_agreement(&quantized, &prune.model, &bundle.holdout, &eval)?;
    let holdout_inference = eval.inference_passes() - before_holdout;

    let post_quant_breach = baseline_holdout_accuracy - quant_holdout_accuracy > cfg.delta_max;
    Ok(HqpOutcome {
        quantized,
        prune,
        counters,
        phases: PhasePasses {
            sensitivity_grad,
            loop_inference,
            calib_inference,
            baseline_eval,
            holdout_inference,
        },
        baseline_val_accuracy,
        baseline_holdout_accuracy,
        sparse_holdout_accuracy,
        quant_holdout_accuracy,
        int8_agreement,
        post_quant_breach,
    })
}

/// The two single-objective baselines next to the untouched float model:
/// quantization without pruning, and unconditional L1-magnitude pruning to a
/// fixed sparsity.
#[derive(Debug)]
pub struct VariantOutcomes {
    pub baseline_holdout_accuracy: f64,
    pub q8: QuantizedModel,
    pub q8_holdout_accuracy: f64,
    pub p_only: FixedPruneOutcome,
    pub p_only_holdout_accuracy: f64,
}

pub fn run_baseline_variants(
    model: &ModelGraph,
    bundle: &DatasetBundle,
    p_only_theta: f64,
    bits: u8,
    excluded_layers: &[usize],
) -> Result<VariantOutcomes> {
    let scratch = CostCounters::new();
    let baseline_holdout_accuracy = validate_accuracy(model, &bundle.holdout, &scratch)?;

    let q8 = quantize_model(model, &bundle.calib, bits, &scratch)?;
    let (q8_holdout_accuracy, _) =
        int8_accuracy_and_agreement(&q8, model, &bundle.holdout, &scratch)?;

    let ranked = rank_by_magnitude(model)?;
    let p_only = prune_to_sparsity(model, &ranked, p_only_theta, excluded_layers)?;
    let p_only_holdout_accuracy = validate_accuracy(&p_only.model, &bundle.holdout, &scratch)?;

    Ok(VariantOutcomes {
        baseline_holdout_accuracy,
        q8,
        q8_holdout_accuracy,
        p_only,
        p_only_holdout_accuracy,
    })
}

/// Trains a baseline from the config, runs every method, benchmarks, and
/// assembles the comparison table.
pub fn run_full_report(config: &Config) -> Result<(RunReport, HqpOutcome)> {
    let bundle = load_dataset(&config.data_source()?, &config.split_sizes(), config.seed)?;
    let model = config.build_model()?;
    let trained = train_baseline(&model, &bundle.train, &bundle.holdout, &config.train_config())?;
    report_for_model(config, &trained.model, &bundle)
}

/// Same as [`run_full_report`] but starting from an already trained model.
pub fn report_for_model(
    config: &Config,
    model: &ModelGraph,
    bundle: &DatasetBundle,
) -> Result<(RunReport, HqpOutcome)> {
    let prune_cfg = config.prune_config(model);
    let outcome = run_hqp(model, bundle, &prune_cfg, config.bits)?;
    let variants = run_baseline_variants(
        model,
        bundle,
        config.p_only_theta,
        config.bits,
        &prune_cfg.excluded_layers,
    )?;
    let report = build_report(config, model, &variants, &outcome)?;
    Ok((report, outcome))
}

pub fn build_report(
    config: &Config,
    model: &ModelGraph,
    variants: &VariantOutcomes,
    outcome: &HqpOutcome,
) -> Result<RunReport> {
    let (warmup, reps) = (config.bench_warmup, config.bench_reps);
    let base = benchmark_model(model, warmup, reps)?;
    let q8 = benchmark_quantized(&variants.q8, warmup, reps)?;
    let p_only = benchmark_model(&variants.p_only.model, warmup, reps)?;
    let hqp = benchmark_quantized(&outcome.quantized, warmup, reps)?;

    let base_acc = variants.baseline_holdout_accuracy;
    let base_bytes = base.weight_payload_bytes as f64;
    let size_red = |bytes: u64| 100.0 * (1.0 - bytes as f64 / base_bytes);
    let drop = |acc: f64| 100.0 * (base_acc - acc);

    let rows = vec![
        MethodRow::new(
            "baseline_fp32",
            base.latency.mean_ms,
            base.latency.p50_ms,
            base.latency.p95_ms,
            base.latency.mean_ms / base.latency.mean_ms,
            0.0,
            0.0,
            0.0,
            base.flops,
            base.weight_payload_bytes,
        ),
        MethodRow::new(
            "quant_only_q8",
            q8.latency.mean_ms,
            q8.latency.p50_ms,
            q8.latency.p95_ms,
            base.latency.mean_ms / q8.latency.mean_ms,
            size_red(q8.weight_payload_bytes),
            drop(variants.q8_holdout_accuracy),
            0.0,
            q8.flops,
            q8.weight_payload_bytes,
        ),
        MethodRow::new(
            format!("prune_only_p{:.0}", 100.0 * variants.p_only.theta),
            p_only.latency.mean_ms,
            p_only.latency.p50_ms,
            p_only.latency.p95_ms,
            base.latency.mean_ms / p_only.latency.mean_ms,
            size_red(p_only.weight_payload_bytes),
            drop(variants.p_only_holdout_accuracy),
            100.0 * variants.p_only.theta,
            p_only.flops,
            p_only.weight_payload_bytes,
        ),
        MethodRow::new(
            "hqp",
            hqp.latency.mean_ms,
            hqp.latency.p50_ms,
            hqp.latency.p95_ms,
            base.latency.mean_ms / hqp.latency.mean_ms,
            size_red(hqp.weight_payload_bytes),
            drop(outcome.quant_holdout_accuracy),
            100.0 * outcome.prune.theta,
            hqp.flops,
            hqp.weight_payload_bytes,
        ),
    ];

    let mut notes = vec![format!(
        "hqp pre-quantization drop: {:.2} points on val, {:.2} on holdout",
        100.0 * (outcome.baseline_val_accuracy - outcome.prune.accuracy),
        100.0 * (variants.baseline_holdout_accuracy - outcome.sparse_holdout_accuracy),
    )];
    if outcome.post_quant_breach {
        notes.push(format!(
            "post-quantization holdout drop {:.2} points exceeds delta_max {:.2} points",
            100.0 * (outcome.baseline_holdout_accuracy - outcome.quant_holdout_accuracy),
            100.0 * config.delta_max,
        ));
    }

    Ok(RunReport {
        rows,
        per_layer: outcome.prune.per_layer.clone(),
        counters: outcome.counters.snapshot(),
        config_echo: config.echo(),
        notes,
    })
}
