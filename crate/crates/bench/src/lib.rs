//! Deterministic fixtures shared by the benchmarks.

use chanest::training::stream_rng;
use chanest::Tensor;
use rand::Rng;

/// Tensor with entries uniform on `range`, reproducible from `stream`.
pub fn uniform_tensor(shape: &[usize], range: std::ops::Range<f64>, stream: u64) -> Tensor {
    let mut rng = stream_rng(0xbe4c, stream);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(range.clone())).collect()).expect("shape matches data")
}
