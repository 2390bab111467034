//! Shared inputs for the benchmarks.

use nightrack_core::init::seeded_rng;
use nightrack_core::ssm::SsmParams;
use nightrack_core::Tensor;

/// A random selective-scan problem of length `l`, `d` channels and `n` states.
pub fn scan_problem(seed: u64, l: usize, d: usize, n: usize) -> (Tensor, SsmParams) {
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    let mut r =
        |shape: &[usize], lo: f32, hi: f32| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
    let u = r(&[l, d], -1.0, 1.0);
    let p = SsmParams::new(
        r(&[d, n], -2.0, -0.01),
        r(&[l, n], -1.0, 1.0),
        r(&[l, n], -1.0, 1.0),
        r(&[d], -1.0, 1.0),
        r(&[l, d], 1e-3, 0.5),
    )
    .expect("valid parameters");
    (u, p)
}

/// Uniform noise in `[0, 1)` of the given shape.
pub fn noise(seed: u64, shape: &[usize]) -> Tensor {
    use rand::Rng;
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}
