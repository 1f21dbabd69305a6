//! Shared fixtures for the benchmarks.

use depthadapt::harness::{Frame, RunConfig, RunData};
use depthadapt::tensor::Tensor;

/// Default configuration shrunk to a small split so setup stays cheap.
pub fn bench_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.split.train = 8;
    cfg.split.val = 4;
    cfg.split.test = 4;
    cfg
}

pub fn bench_data(cfg: &RunConfig) -> RunData {
    RunData::synthetic(cfg).expect("synthetic data")
}

/// Deterministic pseudo-random matrix with entries in `[-1, 1)`.
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Tensor<f32> {
    let mut s = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..rows * cols)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s >> 40) as f32 / (1u64 << 23) as f32) - 1.0
        })
        .collect();
    Tensor::new([rows, cols], data).expect("positive extents")
}

pub fn first_batch(data: &RunData, n: usize) -> (Tensor<f32>, Tensor<f32>) {
    let frames: Vec<&Frame> = data.train.iter().take(n).collect();
    depthadapt::harness::eval::stack(frames).expect("uniform frames")
}
