mod common;

use common::*;
use transgcnn_core::gradcheck::{self, check};
use transgcnn_core::rng::SplitMix64;
use transgcnn_core::{Error, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct coefficient to the scalar under test.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> transgcnn_core::Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = SplitMix64::new(seed);
    let w = t.constant(random(&mut rng, &shape));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn gradcheck_instances<F>(name: &str, make: impl Fn(&mut SplitMix64) -> Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> transgcnn_core::Result<Var> + Copy,
{
    for i in 0..INSTANCES {
        let mut rng = SplitMix64::derive(99, &[i]);
        let inputs = make(&mut rng);
        let r = check(&inputs, H, |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, 1000 + i)
        })
        .unwrap();
        assert!(r.max_rel_err <= TOL, "{name} instance {i}: rel err {}", r.max_rel_err);
    }
}

#[test]
fn matmul_identity_and_small_product() {
    let mut t = Tape::<f64>::new();
    let i2 = t.constant(Tensor::eye(2));
    let a = t.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::from_f64(&[2, 1], &[5.0, 6.0]).unwrap());
    let ia = t.matmul(i2, a).unwrap();
    assert_eq!(t.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
    let ab = t.matmul(a, b).unwrap();
    assert_eq!(t.value(ab).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_matches_naive_oracle() {
    let mut rng = SplitMix64::new(5);
    for _ in 0..INSTANCES {
        let a = random::<f32>(&mut rng, &[3, 4]);
        let b = random::<f32>(&mut rng, &[4, 2]);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        let want = naive_matmul(&a.to_f64_vec(), &b.to_f64_vec(), 3, 4, 2);
        assert!(max_abs(&t.value(c).to_f64_vec(), &want) <= 1e-6);
    }
}

#[test]
fn matmul_rejects_mismatch() {
    let mut t = Tape::<f32>::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn softmax_examples() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::zeros(&[2]));
    let y = t.softmax_last(z).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    let x = t.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let y = t.softmax_last(x).unwrap();
    // High-precision oracle: e^k / (e + e^2 + e^3).
    let denom: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
    let want: Vec<f64> = (1..=3).map(|k| (k as f64).exp() / denom).collect();
    assert!(max_abs(t.value(y).data(), &want) <= 1e-12);
    assert!(max_abs(t.value(y).data(), &[0.09003, 0.24473, 0.66524]) <= 5e-6);
    let big = t.constant(Tensor::from_f64(&[2], &[1000.0, 1000.0]).unwrap());
    let y = t.softmax_last(big).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    let bad = t.constant(Tensor::from_f64(&[2], &[f64::NAN, 0.0]).unwrap());
    assert!(matches!(t.softmax_last(bad), Err(Error::Numeric(_))));
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut rng = SplitMix64::new(11);
    for _ in 0..INSTANCES {
        let x = random::<f32>(&mut rng, &[4, 7]).map(|v| v * 20.0);
        let shifted = x.map(|v| v + 3.25);
        let mut t = Tape::new();
        let (a, b) = (t.constant(x), t.constant(shifted));
        let ya = t.softmax_last(a).unwrap();
        let yb = t.softmax_last(b).unwrap();
        for row in t.value(ya).data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert!(t.value(ya).max_abs_diff(t.value(yb)) <= 1e-6);
    }
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::<f64>::new();
    let ones = t.constant(Tensor::ones(&[3]));
    let zeros = t.constant(Tensor::zeros(&[3]));
    let x = t.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
    let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
    // Oracle: (x - 2) / sqrt(2/3 + 1e-5).
    let s = (2.0f64 / 3.0 + 1e-5).sqrt();
    let want = [-1.0 / s, 0.0, 1.0 / s];
    assert!(max_abs(t.value(y).data(), &want) <= 1e-12);
    assert!((want[2] - 1.2247).abs() < 1e-4);

    let bias = t.constant(Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap());
    let c = t.constant(Tensor::full(&[3], 7.0));
    let y = t.layer_norm(c, ones, bias, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.1, -0.2, 0.3]);
    let y = t.layer_norm(x, zeros, bias, 1e-5).unwrap();
    assert_eq!(t.value(y).data(), &[0.1, -0.2, 0.3]);
}

#[test]
fn conv2d_examples() {
    let mut rng = SplitMix64::new(2);
    let x = random::<f64>(&mut rng, &[3, 4, 5]);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let mut eye = vec![0.0; 9];
    for c in 0..3 {
        eye[c * 3 + c] = 1.0;
    }
    let k = t.constant(Tensor::from_f64(&[3, 3, 1, 1], &eye).unwrap());
    let y = t.conv2d(xv, k, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);

    let five = t.constant(Tensor::full(&[1, 5, 5], 5.0));
    let ones = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = t.conv2d(five, ones, None, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 3, 3]);
    assert!(t.value(y).data().iter().all(|&v| v == 45.0));

    let odd = t.constant(Tensor::zeros(&[1, 4, 4]));
    assert!(matches!(t.conv2d(odd, ones, None, 2, 0), Err(Error::Config(_))));
}

#[test]
fn conv2d_matches_naive_oracle() {
    let mut rng = SplitMix64::new(3);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (1, 2)] {
        let x = random::<f32>(&mut rng, &[2, 7, 7]);
        let k = random::<f32>(&mut rng, &[3, 2, 3, 3]);
        let b = random::<f32>(&mut rng, &[3]);
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let (mut want, ho, wo) =
            naive_conv(&x.to_f64_vec(), 2, 7, 7, &k.to_f64_vec(), 3, 3, stride, pad);
        for (i, v) in want.iter_mut().enumerate() {
            *v += b.data()[i / (ho * wo)] as f64;
        }
        assert_eq!(t.shape(y), &[3, ho, wo]);
        assert!(max_abs(&t.value(y).to_f64_vec(), &want) <= 1e-6);
    }
}

#[test]
fn backward_of_half_square_norm_is_identity() {
    let x = Tensor::from_f64(&[4], &[1.5, -2.0, 0.25, 3.0]).unwrap();
    let mut t = Tape::<f64>::new();
    let v = t.input(x.clone());
    let sq = t.mul(v, v).unwrap();
    let s = t.sum(sq);
    let loss = t.scale(s, 0.5);
    let g = t.backward(loss).unwrap();
    assert_eq!(g.get(v).unwrap(), &x);
}

#[test]
fn backward_requires_scalar_and_skips_disconnected_leaves() {
    let mut t = Tape::<f64>::new();
    let a = t.input(Tensor::ones(&[3]));
    let lonely = t.input(Tensor::ones(&[2]));
    let y = t.scale(a, 2.0);
    let loss = t.sum(y);
    let g = t.backward(loss).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(lonely).is_none());

    let mut t = Tape::<f64>::new();
    let a = t.input(Tensor::ones(&[3]));
    let y = t.scale(a, 2.0);
    assert!(matches!(t.backward(y), Err(Error::Usage(_))));
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    let mut rng = SplitMix64::new(17);
    let logits = random::<f64>(&mut rng, &[3, 5]);
    let mut onehot = vec![0.0; 15];
    for (r, c) in [(0, 1), (1, 4), (2, 0)] {
        onehot[r * 5 + c] = 1.0;
    }
    let targets = Tensor::from_f64(&[3, 5], &onehot).unwrap();
    let r = check(&[logits], H, |t, v| {
        let p = t.softmax_last(v[0])?;
        let lp = t.ln(p)?;
        let y = t.constant(targets.clone());
        let picked = t.mul(lp, y)?;
        let s = t.sum(picked);
        Ok(t.scale(s, -1.0))
    })
    .unwrap();
    assert!(r.max_rel_err <= TOL, "{}", r.max_rel_err);
}

#[test]
fn gradients_match_finite_differences() {
    gradcheck_instances(
        "matmul",
        |r| vec![random(r, &[3, 4]), random(r, &[4, 2])],
        |t, v| t.matmul(v[0], v[1]),
    );
    gradcheck_instances(
        "matmul_nt",
        |r| vec![random(r, &[3, 4]), random(r, &[5, 4])],
        |t, v| t.matmul_nt(v[0], v[1]),
    );
    gradcheck_instances(
        "softmax",
        |r| vec![random(r, &[3, 6])],
        |t, v| t.softmax_last(v[0]),
    );
    gradcheck_instances(
        "masked softmax",
        |r| vec![random(r, &[2, 4])],
        |t, v| {
            let m = t.masked(v[0], vec![true, false, true, true, false, true, false, true])?;
            t.softmax_last(m)
        },
    );
    gradcheck_instances(
        "layer_norm",
        |r| vec![random(r, &[4, 6]), random(r, &[6]), random(r, &[6])],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
    gradcheck_instances(
        "conv2d",
        |r| vec![random(r, &[2, 5, 6]), random(r, &[3, 2, 3, 3]), random(r, &[3])],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    gradcheck_instances(
        "conv2d strided",
        |r| vec![random(r, &[2, 7, 7]), random(r, &[2, 2, 3, 3])],
        |t, v| t.conv2d(v[0], v[1], None, 2, 0),
    );
    gradcheck_instances(
        "conv2d pointwise",
        |r| vec![random(r, &[3, 4, 5]), random(r, &[2, 3, 1, 1]), random(r, &[2])],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
    );
    gradcheck_instances(
        "maxpool2d",
        |r| vec![random(r, &[2, 4, 6])],
        |t, v| t.maxpool2d(v[0], 2, 2),
    );
    gradcheck_instances("relu", |r| vec![random_away_from_zero(r, &[12])], |t, v| Ok(t.relu(v[0])));
    gradcheck_instances("gelu", |r| vec![random(r, &[12])], |t, v| Ok(t.gelu(v[0])));
    gradcheck_instances("sigmoid", |r| vec![random(r, &[12])], |t, v| Ok(t.sigmoid(v[0])));
    gradcheck_instances("softplus", |r| vec![random(r, &[12])], |t, v| Ok(t.softplus(v[0])));
    gradcheck_instances(
        "ln",
        |r| vec![random::<f64>(r, &[12]).map(|v| v.abs() + 0.2)],
        |t, v| t.ln(v[0]),
    );
    gradcheck_instances(
        "add/sub/mul",
        |r| vec![random(r, &[3, 4]), random(r, &[3, 4])],
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(v[0], v[1])?;
            t.mul(a, b)
        },
    );
    gradcheck_instances(
        "row affine",
        |r| vec![random(r, &[5, 3]), random(r, &[3]), random(r, &[3])],
        |t, v| {
            let a = t.mul_row(v[0], v[1])?;
            t.add_row(a, v[2])
        },
    );
    gradcheck_instances(
        "pooling means",
        |r| vec![random(r, &[3, 2, 4])],
        |t, v| {
            let g = t.global_avg_pool(v[0])?;
            let m = t.reshape(v[0], &[6, 4])?;
            let mr = t.mean_rows(m)?;
            let g2 = t.reshape(g, &[3])?;
            let s = t.sum(g2);
            let s2 = t.sum(mr);
            let both = t.concat(&[s, s2])?;
            Ok(both)
        },
    );
    gradcheck_instances(
        "concat/select/gather",
        |r| vec![random(r, &[3, 4]), random(r, &[2, 4])],
        |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let s = t.select_rows(c, &[4, 0, 0, 2])?;
            t.gather(s, &[1, 5, 5, 15, 8])
        },
    );
    gradcheck_instances(
        "reshape/transpose",
        |r| vec![random(r, &[2, 6])],
        |t, v| {
            let a = t.reshape(v[0], &[3, 4])?;
            t.transpose(a)
        },
    );
    gradcheck_instances(
        "mean/scale",
        |r| vec![random(r, &[7])],
        |t, v| {
            let m = t.mean(v[0]);
            let s = t.scale(v[0], 3.0);
            let ss = t.sum(s);
            t.concat(&[m, ss])
        },
    );
    gradcheck_instances(
        "pairwise_l2",
        |r| vec![random(r, &[3, 4]), random(r, &[4, 4])],
        |t, v| t.pairwise_l2(v[0], v[1]),
    );
    gradcheck_instances(
        "normalize_rows",
        |r| vec![random_away_from_zero(r, &[3, 5])],
        |t, v| t.normalize_rows(v[0]),
    );
}

#[test]
fn relative_error_floor() {
    assert_eq!(gradcheck::rel_err(2.0, 2.0), 0.0);
    assert!((gradcheck::rel_err(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
}

#[test]
fn reshape_transpose_round_trip_bit_exact() {
    let mut rng = SplitMix64::new(21);
    let x = random::<f32>(&mut rng, &[6, 10]);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let a = t.transpose(v).unwrap();
    let b = t.reshape(a, &[4, 15]).unwrap();
    let c = t.reshape(b, &[10, 6]).unwrap();
    let d = t.transpose(c).unwrap();
    assert_eq!(t.value(d), &x);
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let run = || {
        let mut rng = SplitMix64::new(8);
        let x = random::<f32>(&mut rng, &[3, 16, 16]);
        let k = random::<f32>(&mut rng, &[8, 3, 3, 3]);
        let mut t = Tape::new();
        let (xv, kv) = (t.constant(x), t.constant(k));
        let y = t.conv2d(xv, kv, None, 1, 1).unwrap();
        let y = t.maxpool2d(y, 2, 2).unwrap();
        let y = t.reshape(y, &[8, 64]).unwrap();
        let y = t.softmax_last(y).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}
