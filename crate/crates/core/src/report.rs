//! Metric table assembly and emission.
//!
//! A report holds one row per compression method plus a per-layer sparsity
//! appendix, the pass counters, and an echo of the configuration. The energy
//! ratio of a row is the speedup, copied bit for bit: under constant power
//! draw, per-inference energy scales with latency.

use std::fmt::Write as _;
use std::path::Path;

use crate::cost::CostSnapshot;
use crate::error::Result;
use crate::pruning::LayerSparsity;

#[derive(Debug, Clone)]
pub struct MethodRow {
    pub method: String,
    pub latency_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub speedup: f64,
    pub size_reduction_pct: f64,
    pub accuracy_drop_pct: f64,
    pub sparsity_pct: f64,
    pub energy_ratio: f64,
    pub flops: u64,
    pub weight_payload_bytes: u64,
}

impl MethodRow {
    /// The single way to build a row: the energy ratio is the speedup.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: impl Into<String>,
        latency_ms: f64,
        p50_ms: f64,
        p95_ms: f64,
        speedup: f64,
        size_reduction_pct: f64,
        accuracy_drop_pct: f64,
        sparsity_pct: f64,
        flops: u64,
        weight_payload_bytes: u64,
    ) -> Self {
        Self {
            method: method.into(),
            latency_ms,
            p50_ms,
            p95_ms,
            speedup,
            size_reduction_pct,
            accuracy_drop_pct,
            sparsity_pct,
            energy_ratio: speedup,
            flops,
            weight_payload_bytes,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub rows: Vec<MethodRow>,
    pub per_layer: Vec<LayerSparsity>,
    pub counters: CostSnapshot,
    pub config_echo: Vec<(String, String)>,
    pub notes: Vec<String>,
}

pub fn render_text(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>12} {:>10} {:>10} {:>9} {:>11} {:>10} {:>9} {:>8}",
        "Method",
        "Latency(ms)",
        "p50(ms)",
        "p95(ms)",
        "Speedup",
        "SizeRed(%)",
        "Drop(%)",
        "Theta(%)",
        "Energy"
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{:<16} {:>12.4} {:>10.4} {:>10.4} {:>8.2}x {:>11.1} {:>10.2} {:>9.1} {:>7.2}x",
            r.method,
            r.latency_ms,
            r.p50_ms,
            r.p95_ms,
            r.speedup,
            r.size_reduction_pct,
            r.accuracy_drop_pct,
            r.sparsity_pct,
            r.energy_ratio
        );
    }
    if !report.per_layer.is_empty() {
        let _ = writeln!(out, "\nPer-layer sparsity:");
        let _ = writeln!(out, "{:<8} {:>9} {:>8} {:>9}", "layer", "prunable", "removed", "theta(%)");
        for row in &report.per_layer {
            let theta = if row.prunable == 0 {
                0.0
            } else {
                100.0 * row.removed as f64 / row.prunable as f64
            };
            let _ = writeln!(
                out,
                "{:<8} {:>9} {:>8} {:>9.1}",
                row.layer, row.prunable, row.removed, theta
            );
        }
    }
    let c = &report.counters;
    let _ = writeln!(
        out,
        "\nCost counters: grad_passes={} inference_passes={} prune_steps={}",
        c.grad_passes, c.inference_passes, c.prune_steps
    );
    if !report.config_echo.is_empty() {
        let _ = writeln!(out, "\nConfig:");
        for (k, v) in &report.config_echo {
            let _ = writeln!(out, "  {k} = {v}");
        }
    }
    for note in &report.notes {
        let _ = writeln!(out, "note: {note}");
    }
    out
}

pub fn render_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "method,latency_ms,p50_ms,p95_ms,speedup,size_reduction_pct,accuracy_drop_pct,\
         sparsity_pct,energy_ratio,flops,weight_payload_bytes\n",
    );
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.latency_ms,
            r.p50_ms,
            r.p95_ms,
            r.speedup,
            r.size_reduction_pct,
            r.accuracy_drop_pct,
            r.sparsity_pct,
            r.energy_ratio,
            r.flops,
            r.weight_payload_bytes
        );
    }
    out
}

/// Writes the aligned text table to `path` and the same rows as CSV next to
/// it (same stem, `.csv` extension).
pub fn emit_report(report: &RunReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_text(report))?;
    std::fs::write(path.with_extension("csv"), render_csv(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, speedup: f64) -> MethodRow {
        MethodRow::new(method, 1.0, 1.0, 1.2, speedup, 0.0, 0.0, 0.0, 100, 400)
    }

    #[test]
    fn energy_ratio_equals_speedup_bit_for_bit() {
        let r = row("hqp", 3.119999999_f64);
        assert_eq!(r.energy_ratio.to_bits(), r.speedup.to_bits());
    }

    #[test]
    fn baseline_row_renders_unit_speedup_and_zero_drop() {
        let report = RunReport {
            rows: vec![row("baseline_fp32", 1.0)],
            ..RunReport::default()
        };
        let text = render_text(&report);
        assert!(text.contains("baseline_fp32"));
        assert!(text.contains("1.00x"));
        let csv = render_csv(&report);
        assert!(csv.lines().count() == 2);
        assert!(csv.contains("baseline_fp32,1,1,1.2,1,0,0,0,1,100,400"));
    }
}
