//! Cost accounting: gradient passes, inference passes, pruning steps, and
//! the analytic comparison against quantization-aware training.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crate::error::Result;
use crate::graph::ModelGraph;
use crate::tensor::{GradTape, Tensor};

/// Monotone pass counters shared across a run. Increments are atomic so
/// sample-parallel stages can share one instance.
#[derive(Debug, Default)]
pub struct CostCounters {
    grad_passes: AtomicU64,
    inference_passes: AtomicU64,
    prune_steps: AtomicU64,
}

impl CostCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_grad_passes(&self, n: u64) {
        self.grad_passes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_inference_passes(&self, n: u64) {
        self.inference_passes.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_prune_step(&self) {
        self.prune_steps.fetch_add(1, Ordering::Relaxed);
    }

    pub fn grad_passes(&self) -> u64 {
        self.grad_passes.load(Ordering::Relaxed)
    }

    pub fn inference_passes(&self) -> u64 {
        self.inference_passes.load(Ordering::Relaxed)
    }

    pub fn prune_steps(&self) -> u64 {
        self.prune_steps.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> CostSnapshot {
        CostSnapshot {
            grad_passes: self.grad_passes(),
            inference_passes: self.inference_passes(),
            prune_steps: self.prune_steps(),
        }
    }
}

/// Point-in-time counter values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostSnapshot {
    pub grad_passes: u64,
    pub inference_passes: u64,
    pub prune_steps: u64,
}

/// Hypothetical quantization-aware training run to compare against.
#[derive(Debug, Clone, Copy)]
pub struct QatScenario {
    pub epochs: u64,
    pub train_size: u64,
}

/// Ratio of QAT cost over the pruning-stage cost, in inference-pass units:
/// `epochs * train_size * r / (grad_passes * r + loop_inference_passes)`
/// where `r` is the measured cost of a gradient pass relative to an
/// inference pass.
pub fn compare_cost_models(
    grad_passes: u64,
    loop_inference_passes: u64,
    qat: &QatScenario,
    grad_inf_ratio: f64,
) -> f64 {
    let hqp = grad_passes as f64 * grad_inf_ratio + loop_inference_passes as f64;
    let qat_cost = qat.epochs as f64 * qat.train_size as f64 * grad_inf_ratio;
    qat_cost / hqp
}

/// Times forward-only against forward-plus-backward passes on one input and
/// returns their cost ratio (at least 1).
pub fn measure_grad_inf_ratio(
    model: &ModelGraph,
    input: &Tensor,
    label: usize,
    reps: usize,
) -> Result<f64> {
    let reps = reps.max(1);
    let mut batched_shape = vec![1];
    batched_shape.extend_from_slice(input.shape());
    let batched = Tensor::new(batched_shape, input.elems().to_vec())?;

    let start = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(model.forward(&batched)?);
    }
    let inf = start.elapsed().as_secs_f64() / reps as f64;

    let start = Instant::now();
    for _ in 0..reps {
        let mut tape = GradTape::new();
        let fw = model.forward_taped(&mut tape, batched.clone())?;
        let loss = tape.softmax_cross_entropy(fw.logits, &[label])?;
        std::hint::black_box(tape.backward(loss)?);
    }
    let grad = start.elapsed().as_secs_f64() / reps as f64;
    Ok((grad / inf.max(1e-12)).max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qat_dwarfs_the_loop_for_paper_scale_constants() {
        // N_train = 100 * N_calib, 5 epochs, gradients 3x an inference
        let n_calib = 1000u64;
        let ratio = compare_cost_models(
            n_calib,
            30 * 1000, // 30 steps of a 1000-sample validation set
            &QatScenario { epochs: 5, train_size: 100 * n_calib },
            3.0,
        );
        let expected = (5.0 * 100_000.0 * 3.0) / (1000.0 * 3.0 + 30_000.0);
        assert!((ratio - expected).abs() < 1e-12);
        assert!(ratio > 10.0);
    }

    #[test]
    fn zero_prune_steps_leaves_only_the_gradient_term() {
        let ratio = compare_cost_models(500, 0, &QatScenario { epochs: 1, train_size: 500 }, 2.0);
        // C_HQP = 500 * 2, C_QAT = 500 * 2
        assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_epochs_doubles_the_ratio() {
        let base = compare_cost_models(100, 1000, &QatScenario { epochs: 5, train_size: 10_000 }, 3.0);
        let doubled =
            compare_cost_models(100, 1000, &QatScenario { epochs: 10, train_size: 10_000 }, 3.0);
        assert!((doubled / base - 2.0).abs() < 1e-12);
    }

    #[test]
    fn counters_accumulate_monotonically() {
        let c = CostCounters::new();
        c.add_grad_passes(10);
        c.add_inference_passes(5);
        c.add_prune_step();
        c.add_prune_step();
        let snap = c.snapshot();
        assert_eq!(snap.grad_passes, 10);
        assert_eq!(snap.inference_passes, 5);
        assert_eq!(snap.prune_steps, 2);
    }
}
