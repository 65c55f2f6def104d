//! Fixtures shared by the benchmarks in `benches/`.

use std::sync::Arc;

use pdcnn_core::data::{synthetic_image, SyntheticConfig};
use pdcnn_core::{Rng, Sample, Tensor};

/// Tensor of standard normal draws.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).expect("shape and data agree")
}

/// `n` synthetic images per class at `size` x `size`, label 1 first.
pub fn samples(n: usize, size: usize) -> Vec<Sample> {
    let cfg = SyntheticConfig::balanced(n, size, 0.3, 1);
    (0..2 * n)
        .map(|i| {
            let label = usize::from(i < n);
            let image = synthetic_image(&cfg, i, label).expect("valid synthetic config");
            Sample {
                image: Arc::new(image),
                label,
                category: "synthetic".into(),
            }
        })
        .collect()
}
