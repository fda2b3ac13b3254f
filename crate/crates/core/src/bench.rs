//! Wall-clock latency measurement over single-sample forward passes.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{io, ModelGraph};
use crate::quant::{int8_forward, quantized_count_flops, QuantizedModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub reps: usize,
}

/// Latency plus the static quantities a speedup decomposes into.
#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub latency: LatencyStats,
    pub flops: u64,
    pub weight_payload_bytes: u64,
}

fn summarize(mut times_ms: Vec<f64>) -> LatencyStats {
    let reps = times_ms.len();
    let mean_ms = times_ms.iter().sum::<f64>() / reps as f64;
    times_ms.sort_by(f64::total_cmp);
    let idx = |q: f64| ((q * reps as f64).ceil() as usize).clamp(1, reps) - 1;
    LatencyStats {
        mean_ms,
        p50_ms: times_ms[idx(0.50)],
        p95_ms: times_ms[idx(0.95)],
        reps,
    }
}

fn bench_input(shape: (usize, usize, usize)) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbe9c);
    let n = shape.0 * shape.1 * shape.2;
    let elems: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![1, shape.0, shape.1, shape.2], elems).expect("bench input shape")
}

pub fn benchmark_model(model: &ModelGraph, warmup: usize, reps: usize) -> Result<BenchResult> {
    let input = bench_input(model.input_shape);
    for _ in 0..warmup {
        std::hint::black_box(model.forward(&input)?);
    }
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(model.forward(&input)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchResult {
        latency: summarize(times),
        flops: model.count_flops(model.input_shape)?,
        weight_payload_bytes: io::weight_payload_bytes(model),
    })
}

pub fn benchmark_quantized(
    model: &QuantizedModel,
    warmup: usize,
    reps: usize,
) -> Result<BenchResult> {
    let input = bench_input(model.input_shape);
    for _ in 0..warmup {
        std::hint::black_box(int8_forward(model, &input)?);
    }
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(int8_forward(model, &input)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchResult {
        latency: summarize(times),
        flops: quantized_count_flops(model),
        weight_payload_bytes: io::quantized_weight_payload_bytes(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_mini_convnet;

    #[test]
    fn bench_reports_positive_latency_and_static_counts() {
        let model = build_mini_convnet(0.25, (1, 8, 8), 10, 0).unwrap();
        let res = benchmark_model(&model, 1, 5).unwrap();
        assert!(res.latency.mean_ms > 0.0);
        assert!(res.latency.p95_ms >= res.latency.p50_ms);
        assert!(res.flops > 0);
        assert!(res.weight_payload_bytes > 0);
    }
}
