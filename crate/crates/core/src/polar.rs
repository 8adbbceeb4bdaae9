//! Polar resampling of north-aligned aerial tiles into panorama geometry.
//!
//! Output column `x` covers azimuth `2 pi x / W_g` measured clockwise from
//! north; output row `y` covers radius `(A / 2) (y / H_g)` from the tile
//! centre. Sample points are continuous coordinates in which pixel `(i, j)`
//! spans `[j, j + 1) x [i, i + 1)`, so the tile centre is `(W_a / 2, H_a / 2)`
//! and a quarter-turn of the tile is an exact quarter-turn of the sample grid.

use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarConfig {
    pub ground_w: usize,
    pub ground_h: usize,
    pub aerial_w: usize,
    pub aerial_h: usize,
    /// Sampled radial diameter in aerial pixels.
    pub span: f64,
}

impl PolarConfig {
    /// Span defaults to the aerial height.
    pub fn new(ground_w: usize, ground_h: usize, aerial_w: usize, aerial_h: usize) -> Result<Self> {
        let cfg = Self {
            ground_w,
            ground_h,
            aerial_w,
            aerial_h,
            span: aerial_h as f64,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_span(mut self, span: f64) -> Result<Self> {
        self.span = span;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ground_w == 0 || self.ground_h == 0 || self.aerial_w == 0 || self.aerial_h == 0 {
            return Err(Error::Config("polar sizes must be positive".into()));
        }
        if self.aerial_w != self.aerial_h {
            return Err(Error::Config(format!(
                "aerial tiles must be square, got {}x{}",
                self.aerial_w, self.aerial_h
            )));
        }
        if !(self.span > 0.0) || self.span > self.aerial_w.min(self.aerial_h) as f64 {
            return Err(Error::Config(format!(
                "polar span {} must lie in (0, {}]",
                self.span,
                self.aerial_w.min(self.aerial_h)
            )));
        }
        Ok(())
    }
}

/// Aerial sample point for output pixel `(x_s, y_s)`.
pub fn polar_coords(x_s: f64, y_s: f64, cfg: &PolarConfig) -> Result<(f64, f64)> {
    let (wg, hg) = (cfg.ground_w as f64, cfg.ground_h as f64);
    if !(0.0..wg).contains(&x_s) || !(0.0..=hg).contains(&y_s) {
        return Err(Error::Usage(format!(
            "polar target ({x_s}, {y_s}) outside [0, {wg}) x [0, {hg}]"
        )));
    }
    let r = cfg.span / 2.0 * (y_s / hg);
    let theta = TAU / wg * x_s;
    let x_t = cfg.aerial_w as f64 / 2.0 + r * theta.sin();
    let y_t = cfg.aerial_h as f64 / 2.0 - r * theta.cos();
    Ok((x_t, y_t))
}

/// Bilinear interpolation at pixel-index coordinates `(x, y)` (pixel `(i, j)`
/// sits at `x = j, y = i`), clamped to the image rectangle.
pub fn bilinear_sample(img: &Image, x: f64, y: f64) -> Vec<f32> {
    let mut out = vec![0.0; img.channels()];
    bilinear_into(img, x, y, &mut out);
    out
}

fn bilinear_into(img: &Image, x: f64, y: f64, out: &mut [f32]) {
    let xm = (img.width() - 1) as f64;
    let ym = (img.height() - 1) as f64;
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, xm) };
    let y = if y.is_nan() { 0.0 } else { y.clamp(0.0, ym) };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    for (c, o) in out.iter_mut().enumerate() {
        let p00 = img.get(y0, x0, c) as f64;
        let p01 = img.get(y0, x1, c) as f64;
        let p10 = img.get(y1, x0, c) as f64;
        let p11 = img.get(y1, x1, c) as f64;
        let top = p00 * (1.0 - fx) + p01 * fx;
        let bottom = p10 * (1.0 - fx) + p11 * fx;
        *o = (top * (1.0 - fy) + bottom * fy) as f32;
    }
}

/// Warp an aerial tile into an `H_g x W_g` panorama-aligned image.
pub fn polar_transform(aerial: &Image, cfg: &PolarConfig) -> Result<Image> {
    cfg.validate()?;
    if aerial.width() != cfg.aerial_w || aerial.height() != cfg.aerial_h {
        return Err(Error::Config(format!(
            "aerial image is {}x{}, polar config expects {}x{}",
            aerial.width(),
            aerial.height(),
            cfg.aerial_w,
            cfg.aerial_h
        )));
    }
    let ch = aerial.channels();
    let mut data = vec![0.0f32; cfg.ground_h * cfg.ground_w * ch];
    for y in 0..cfg.ground_h {
        for x in 0..cfg.ground_w {
            let (xt, yt) = polar_coords(x as f64, y as f64, cfg)?;
            let i = (y * cfg.ground_w + x) * ch;
            bilinear_into(aerial, xt - 0.5, yt - 0.5, &mut data[i..i + ch]);
        }
    }
    Image::new(cfg.ground_h, cfg.ground_w, ch, data)
}
