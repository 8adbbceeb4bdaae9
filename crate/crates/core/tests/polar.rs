use proptest::prelude::*;
use transgcnn_core::polar::{bilinear_sample, polar_coords, polar_transform, PolarConfig};
use transgcnn_core::rng::SplitMix64;
use transgcnn_core::Image;

fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
    let mut rng = SplitMix64::new(seed);
    Image::from_fn(h, w, c, |_, _, _| rng.next_f64() as f32).unwrap()
}

fn rotate(img: &Image, quarter_turns: usize) -> Image {
    (0..quarter_turns).fold(img.clone(), |acc, _| acc.rotate90_cw())
}

#[test]
fn anchor_points_are_exact() {
    let cfg = PolarConfig::new(512, 128, 256, 256).unwrap();
    let cases = [((0.0, 0.0), (128.0, 128.0)), ((0.0, 128.0), (128.0, 0.0)), ((128.0, 128.0), (256.0, 128.0))];
    for ((xs, ys), (xt, yt)) in cases {
        let (x, y) = polar_coords(xs, ys, &cfg).unwrap();
        assert!((x - xt).abs() <= 1e-9 && (y - yt).abs() <= 1e-9, "({xs},{ys}) -> ({x},{y})");
    }
}

#[test]
fn rotation_is_a_column_shift() {
    let cfg = PolarConfig::new(128, 32, 64, 64).unwrap();
    let aerial = random_image(5, 64, 64, 3);
    let base = polar_transform(&aerial, &cfg).unwrap();
    for q in 1..4 {
        let rotated = polar_transform(&rotate(&aerial, q), &cfg).unwrap();
        let shifted = base.shift_columns(q * cfg.ground_w / 4);
        assert!(rotated.max_abs_diff(&shifted) <= 1e-5, "{q} quarter turns");
    }
}

#[test]
fn centre_row_is_constant() {
    let cfg = PolarConfig::new(64, 16, 32, 32).unwrap();
    let out = polar_transform(&random_image(9, 32, 32, 3), &cfg).unwrap();
    for x in 1..64 {
        assert_eq!(out.pixel(0, x), out.pixel(0, 0));
    }
}

#[test]
fn radial_gradient_becomes_identical_ramps() {
    // value = distance from the tile centre / 32, sampled at pixel centres
    let n = 64;
    let c = n as f64 / 2.0;
    let aerial = Image::from_fn(n, n, 1, |y, x, _| {
        let (dx, dy) = (x as f64 + 0.5 - c, y as f64 + 0.5 - c);
        ((dx * dx + dy * dy).sqrt() / c).min(1.0) as f32
    })
    .unwrap();
    let cfg = PolarConfig::new(96, 24, n, n).unwrap();
    let out = polar_transform(&aerial, &cfg).unwrap();
    for x in 0..96 {
        for y in 0..24 {
            let expect = y as f64 / 24.0;
            let got = out.get(y, x, 0) as f64;
            // bilinear error on a cone peaks at the apex: half a pixel diagonal / 32
            assert!((got - expect).abs() < 0.025, "({y},{x}) {got} vs {expect}");
            assert!((got - out.get(y, 0, 0) as f64).abs() < 0.02);
            if y > 0 {
                assert!(got >= out.get(y - 1, x, 0) as f64 - 1e-6, "column {x} not monotone");
            }
        }
    }
}

#[test]
fn bilinear_recovers_planes() {
    let (a, b, c) = (0.01, 0.005, 0.1);
    let img = Image::from_fn(40, 50, 1, |y, x, _| (a * x as f64 + b * y as f64 + c) as f32).unwrap();
    let mut rng = SplitMix64::new(3);
    for _ in 0..200 {
        let (x, y) = (rng.uniform(0.0, 49.0), rng.uniform(0.0, 39.0));
        let got = bilinear_sample(&img, x, y)[0] as f64;
        assert!((got - (a * x + b * y + c)).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rotation_equivariance_holds_for_random_tiles(seed in any::<u64>(), half in 4usize..12, quarter in 1usize..4) {
        let n = 2 * half;
        let cfg = PolarConfig::new(8 * half, half, n, n).unwrap();
        let aerial = random_image(seed, n, n, 1);
        let base = polar_transform(&aerial, &cfg).unwrap();
        let rotated = polar_transform(&rotate(&aerial, quarter), &cfg).unwrap();
        prop_assert!(rotated.max_abs_diff(&base.shift_columns(quarter * 2 * half)) <= 1e-5);
    }

    #[test]
    fn output_stays_in_unit_range(seed in any::<u64>(), span in 1.0f64..24.0) {
        let cfg = PolarConfig::new(40, 10, 24, 24).unwrap().with_span(span).unwrap();
        let out = polar_transform(&random_image(seed, 24, 24, 3), &cfg).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
