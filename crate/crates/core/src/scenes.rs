//! Procedural matched ground/aerial pairs. The aerial tile is a flat map of
//! roads and landmarks; the ground view is its polar warp with photometric
//! jitter and pixel noise.

use std::fs;
use std::path::Path;

use crate::dataset::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::polar::{polar_transform, PolarConfig};
use crate::raster::Image;
use crate::rng::SplitMix64;

const AERIAL_STREAM: u64 = 0xAE41;
const GROUND_STREAM: u64 = 0x6400;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub aerial_size: usize,
    pub ground_w: usize,
    pub ground_h: usize,
    /// Std of additive Gaussian pixel noise on the ground view.
    pub noise: f64,
    /// Half-width of the uniform brightness offset.
    pub brightness: f64,
    /// Half-width of the uniform relative contrast change.
    pub contrast: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::with_noise(0, 0.05)
    }
}

impl SceneSpec {
    /// Desk sizes with brightness and contrast jitter of the same strength as the noise.
    pub fn with_noise(seed: u64, noise: f64) -> Self {
        Self {
            seed,
            aerial_size: 128,
            ground_w: 320,
            ground_h: 64,
            noise,
            brightness: noise,
            contrast: noise,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.polar()?;
        for (name, v) in [("noise", self.noise), ("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative value, got {v}")));
            }
        }
        Ok(())
    }

    pub fn polar(&self) -> Result<PolarConfig> {
        PolarConfig::new(self.ground_w, self.ground_h, self.aerial_size, self.aerial_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub id: String,
    pub aerial: Image,
    pub ground: Image,
}

pub fn pair_id(index: u64) -> String {
    format!("pair{index:06}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
        }
    }
}

/// Straight strip through the tile centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Road {
    /// Direction of the strip's normal, radians.
    pub angle: f64,
    pub half_width: f64,
    pub shade: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

/// Everything drawn on one aerial tile.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub base: [f64; 3],
    pub slope_dir: f64,
    pub slope: f64,
    pub roads: Vec<Road>,
    pub landmarks: Vec<Landmark>,
}

fn color(rng: &mut SplitMix64, lo: f64, hi: f64) -> [f64; 3] {
    [rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)]
}

/// Random layout for `index`: a shaded background, 1-2 roads through the
/// centre and 2-6 landmarks of random colour.
pub fn layout(spec: &SceneSpec, index: u64) -> SceneLayout {
    let n = spec.aerial_size as f64;
    let c = n / 2.0;
    let mut rng = SplitMix64::derive(spec.seed, &[AERIAL_STREAM, index]);
    let base = color(&mut rng, 0.25, 0.6);
    let slope_dir = rng.uniform(0.0, std::f64::consts::TAU);
    let slope = rng.uniform(0.0, 0.2) / n;
    let roads = (0..1 + rng.below(2))
        .map(|_| Road {
            angle: rng.uniform(0.0, std::f64::consts::PI),
            half_width: rng.uniform(1.5, 4.0),
            shade: rng.uniform(0.05, 0.95),
        })
        .collect();
    let landmarks = (0..2 + rng.below(5))
        .map(|_| {
            // keep landmarks inside the disc the polar warp sees
            let rad = rng.uniform(6.0, 0.85 * c);
            let ang = rng.uniform(0.0, std::f64::consts::TAU);
            let (cx, cy) = (c + rad * ang.sin(), c - rad * ang.cos());
            let shape = if rng.below(2) == 0 {
                Shape::Disc {
                    cx,
                    cy,
                    r: rng.uniform(3.0, 10.0),
                }
            } else {
                Shape::Rect {
                    cx,
                    cy,
                    hw: rng.uniform(2.5, 9.0),
                    hh: rng.uniform(2.5, 9.0),
                }
            };
            Landmark {
                shape,
                albedo: color(&mut rng, 0.0, 1.0),
            }
        })
        .collect();
    SceneLayout {
        base,
        slope_dir,
        slope,
        roads,
        landmarks,
    }
}

pub fn gen_aerial(spec: &SceneSpec, index: u64) -> Result<Image> {
    let n = spec.aerial_size;
    let c = n as f64 / 2.0;
    let l = layout(spec, index);
    Image::from_fn(n, n, 3, |y, x, ch| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = l.base[ch] + l.slope * ((px - c) * l.slope_dir.cos() + (py - c) * l.slope_dir.sin());
        for r in &l.roads {
            if ((px - c) * r.angle.cos() + (py - c) * r.angle.sin()).abs() <= r.half_width {
                v = r.shade;
            }
        }
        for m in &l.landmarks {
            if m.shape.contains(px, py) {
                v = m.albedo[ch];
            }
        }
        v as f32
    })
}

/// Ground view of `aerial`: polar warp, then brightness/contrast jitter and
/// Gaussian noise drawn from the stream of `index`.
pub fn render_ground(aerial: &Image, spec: &SceneSpec, index: u64) -> Result<Image> {
    let warped = polar_transform(aerial, &spec.polar()?)?;
    if spec.noise == 0.0 && spec.brightness == 0.0 && spec.contrast == 0.0 {
        return Ok(warped);
    }
    let mut rng = SplitMix64::derive(spec.seed, &[GROUND_STREAM, index]);
    let offset = rng.uniform(-spec.brightness, spec.brightness);
    let gain = 1.0 + rng.uniform(-spec.contrast, spec.contrast);
    let data = warped
        .data()
        .iter()
        .map(|&v| {
            let j = (v as f64 - 0.5) * gain + 0.5 + offset + spec.noise * rng.normal();
            j as f32
        })
        .collect();
    Image::new(warped.height(), warped.width(), warped.channels(), data)
}

pub fn gen_pair(spec: &SceneSpec, index: u64) -> Result<PairSample> {
    let aerial = gen_aerial(spec, index)?;
    let ground = render_ground(&aerial, spec, index)?;
    Ok(PairSample {
        id: pair_id(index),
        aerial,
        ground,
    })
}

/// Write pairs `start..start + count` as PNGs under `dir` plus `dir/manifest.csv`.
pub fn gen_dataset(spec: &SceneSpec, dir: &Path, start: u64, count: u64) -> Result<Manifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Usage("dataset size must be at least 1".into()));
    }
    for sub in ["ground", "aerial"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(count as usize);
    for index in start..start + count {
        let pair = gen_pair(spec, index)?;
        let ground_path = format!("ground/{}.png", pair.id);
        let aerial_path = format!("aerial/{}.png", pair.id);
        pair.ground.save(dir.join(&ground_path))?;
        pair.aerial.save(dir.join(&aerial_path))?;
        entries.push(ManifestEntry {
            id: pair.id,
            ground_path: ground_path.into(),
            aerial_path: aerial_path.into(),
        });
    }
    let manifest = Manifest::new(dir, entries)?;
    manifest.write(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
