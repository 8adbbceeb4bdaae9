mod common;

use common::{max_abs, random};
use proptest::prelude::*;
use transgcnn_core::coupling::{attention_project, couple, normalize, normalized};
use transgcnn_core::gradcheck::check;
use transgcnn_core::rng::SplitMix64;
use transgcnn_core::{Error, Tape, Tensor};

fn couple_values(f: &Tensor<f64>, a: &Tensor<f64>) -> Vec<f64> {
    let mut t = Tape::new();
    let (fv, av) = (t.constant(f.clone()), t.constant(a.clone()));
    let out = couple(&mut t, fv, av).unwrap();
    t.value(out).data().to_vec()
}

#[test]
fn attention_projection_examples() {
    let mut rng = SplitMix64::new(1);
    let m = random::<f64>(&mut rng, &[4, 2, 3]);
    let mut t = Tape::new();
    let mv = t.constant(m.clone());
    let zero = t.constant(Tensor::zeros(&[3, 4, 1, 1]));
    let a = attention_project(&mut t, mv, zero).unwrap();
    assert_eq!(t.shape(a), &[3, 2, 3]);
    assert!(t.value(a).data().iter().all(|&v| v == 0.0));

    let eye = t.constant(Tensor::eye(4).reshape(&[4, 4, 1, 1]).unwrap());
    let a = attention_project(&mut t, mv, eye).unwrap();
    assert_eq!(t.value(a), &m);

    let k = random::<f64>(&mut rng, &[3, 4, 1, 1]);
    let kv = t.constant(k.clone());
    let a = attention_project(&mut t, mv, kv).unwrap();
    let mut expect = vec![0.0; 18];
    for o in 0..3 {
        for p in 0..6 {
            expect[o * 6 + p] = (0..4).map(|c| k.data()[o * 4 + c] * m.data()[c * 6 + p]).sum();
        }
    }
    assert!(max_abs(t.value(a).data(), &expect) <= 1e-6);

    let bad = t.constant(Tensor::zeros(&[3, 5, 1, 1]));
    assert!(matches!(attention_project(&mut t, mv, bad), Err(Error::Shape { .. })));
}

#[test]
fn couple_examples() {
    let mut rng = SplitMix64::new(2);
    let f = random::<f64>(&mut rng, &[3, 2, 4]);
    let ones = Tensor::ones(&[2, 2, 4]);
    let out = couple_values(&f, &ones);
    assert_eq!(out.len(), 6);
    for i in 0..2 {
        for c in 0..3 {
            let s: f64 = f.data()[c * 8..(c + 1) * 8].iter().sum();
            assert_eq!(out[i * 3 + c], s);
        }
    }
    assert!(couple_values(&Tensor::zeros(&[3, 2, 4]), &random(&mut rng, &[2, 2, 4])).iter().all(|&v| v == 0.0));

    // C=2, K=2, 2x2 grid by hand
    let f = Tensor::from_f64(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
    let a = Tensor::from_f64(&[2, 2, 2], &[1., 0., 0., 1., -1., 2., 0.5, 0.]).unwrap();
    let expect = [
        1. * 1. + 2. * 0. + 3. * 0. + 4. * 1.,
        5. * 1. + 6. * 0. + 7. * 0. + 8. * 1.,
        -1. + 2. * 2. + 3. * 0.5 + 4. * 0.,
        -5. + 6. * 2. + 7. * 0.5 + 8. * 0.,
    ];
    assert_eq!(couple_values(&f, &a), expect);

    let mut t = Tape::<f64>::new();
    let fv = t.constant(Tensor::zeros(&[2, 2, 2]));
    let av = t.constant(Tensor::zeros(&[2, 2, 3]));
    assert!(matches!(couple(&mut t, fv, av), Err(Error::Shape { .. })));
}

#[test]
fn descriptor_length_is_channels_times_maps() {
    for (c, k) in [(1, 1), (64, 4), (16, 8), (512, 8)] {
        let mut t = Tape::new();
        let f = t.constant(Tensor::<f32>::ones(&[c, 1, 2]));
        let a = t.constant(Tensor::ones(&[k, 1, 2]));
        let out = couple(&mut t, f, a).unwrap();
        assert_eq!(t.value(out).len(), c * k);
    }
}

#[test]
fn normalize_examples() {
    assert_eq!(normalized(&[3.0f64, 4.0]).unwrap(), vec![0.6, 0.8]);
    let unit = normalized(&[0.6f64, 0.8]).unwrap();
    assert!(max_abs(&unit, &[0.6, 0.8]) <= 1e-7);
    assert!(matches!(normalized(&[0.0f64, 0.0]), Err(Error::DegenerateDescriptor)));

    let mut t = Tape::new();
    let z = t.constant(Tensor::<f64>::zeros(&[4]));
    assert!(matches!(normalize(&mut t, z), Err(Error::DegenerateDescriptor)));
    let v = random::<f64>(&mut SplitMix64::new(3), &[6]);
    let a = normalized(v.data()).unwrap();
    let b = normalized(&v.map(|x| 7.5 * x).into_data()).unwrap();
    assert!(max_abs(&a, &b) <= 1e-12);
}

#[test]
fn couple_gradients_match_finite_differences() {
    let mut rng = SplitMix64::new(4);
    for _ in 0..20 {
        let inputs = vec![
            random::<f64>(&mut rng, &[3, 2, 3]),
            random::<f64>(&mut rng, &[4, 2, 3]),
            random::<f64>(&mut rng, &[2, 4, 1, 1]),
        ];
        let weights = random::<f64>(&mut rng, &[6]);
        let res = check(&inputs, 1e-5, |t, v| {
            let a = attention_project(t, v[1], v[2])?;
            let c = couple(t, v[0], a)?;
            let n = normalize(t, c)?;
            let w = t.constant(weights.clone());
            let p = t.mul(n, w)?;
            Ok(t.sum(p))
        })
        .unwrap();
        assert!(res.max_rel_err <= 1e-4, "{res:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn couple_is_bilinear(seed in any::<u64>(), alpha in -3.0f64..3.0, c in 1usize..5, k in 1usize..4) {
        let mut rng = SplitMix64::new(seed);
        let f = random::<f64>(&mut rng, &[c, 3, 4]);
        let a = random::<f64>(&mut rng, &[k, 3, 4]);
        let a2 = random::<f64>(&mut rng, &[k, 3, 4]);
        let base = couple_values(&f, &a);
        let scaled = couple_values(&f.map(|v| alpha * v), &a);
        let expect: Vec<f64> = base.iter().map(|v| alpha * v).collect();
        prop_assert!(max_abs(&scaled, &expect) <= 1e-6);
        let sum_a = Tensor::from_fn(a.shape(), |i| a.data()[i] + a2.data()[i]);
        let lhs = couple_values(&f, &sum_a);
        let rhs: Vec<f64> = base.iter().zip(couple_values(&f, &a2)).map(|(x, y)| x + y).collect();
        prop_assert!(max_abs(&lhs, &rhs) <= 1e-6);
    }

    #[test]
    fn normalized_descriptors_have_unit_norm(seed in any::<u64>(), n in 1usize..64) {
        let v = random::<f32>(&mut SplitMix64::new(seed), &[n]);
        prop_assume!(v.data().iter().any(|&x| x != 0.0));
        let u = normalized(v.data()).unwrap();
        let norm = u.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-6);
    }
}
