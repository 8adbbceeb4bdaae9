//! Shared inputs for the benchmarks.

use transgcnn_core::rng::SplitMix64;
use transgcnn_core::scenes::{gen_pair, SceneSpec};
use transgcnn_core::{Image, Scalar, Tensor};

pub fn random_tensor<T: Scalar>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform(-1.0, 1.0)))
}

/// Desk-size synthetic pair `(ground, aerial)`.
pub fn desk_images() -> (Image, Image) {
    let p = gen_pair(&SceneSpec::default(), 0).expect("scene");
    (p.ground, p.aerial)
}
