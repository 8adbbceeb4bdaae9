#![allow(dead_code)]

use transgcnn_core::rng::SplitMix64;
use transgcnn_core::{Scalar, Tensor};

pub fn random<T: Scalar>(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform(-1.0, 1.0)))
}

pub fn random_away_from_zero(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform(0.1, 1.0);
        if rng.next_f64() < 0.5 {
            -v
        } else {
            v
        }
    })
}

/// Naive triple loop `a[m,k] * b[k,n]`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// Naive six-loop cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kern: &[f64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x[(ci * h + iy as usize) * w + ix as usize]
                                    * kern[((co * c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (out, ho, wo)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use transgcnn_core::backbone::BackboneConfig;
use transgcnn_core::dataset::TrainPair;
use transgcnn_core::head::HeadConfig;
use transgcnn_core::ModelConfig;

/// Smallest full model: 16x32 input, 2x4 grid, d=8, one block per branch,
/// two partitions, two attention maps.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            in_channels: 3,
            widths: vec![2, 3, 4],
            convs_per_stage: 1,
            pool_after: vec![true, true, true],
            proj_dim: 8,
        },
        head: HeadConfig {
            depth: 1,
            parts: 2,
            mlp_ratio: 4,
            se_reduction: 4,
        },
        attn_k: 2,
        gamma: 10.0,
        input_h: 16,
        input_w: 32,
    }
}

/// Random preprocessed pairs for `cfg`'s input size.
pub fn random_pairs<T: Scalar>(seed: u64, n: usize, cfg: &ModelConfig) -> Vec<TrainPair<T>> {
    let mut rng = SplitMix64::new(seed);
    let shape = [cfg.backbone.in_channels, cfg.input_h, cfg.input_w];
    (0..n)
        .map(|i| TrainPair {
            id: format!("p{i}"),
            ground: random(&mut rng, &shape),
            aerial: random(&mut rng, &shape),
        })
        .collect()
}
