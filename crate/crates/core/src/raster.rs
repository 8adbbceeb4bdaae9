//! Raster images in `[0, 1]` and their PNG / PNM encodings.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Interleaved `height x width x channels` raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Values are clamped into `[0, 1]`; channels must be 1 or 3.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(Error::shape("image", &[height, width, channels], &[data.len()]));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Rotate a square image by 90 degrees clockwise (exact pixel permutation).
    pub fn rotate90_cw(&self) -> Self {
        let (h, w) = (self.height, self.width);
        Self::from_fn(w, h, self.channels, |y, x, c| self.get(h - 1 - x, y, c))
            .expect("same pixel count")
    }

    /// Circularly shift columns right by `k`.
    pub fn shift_columns(&self, k: usize) -> Self {
        let w = self.width;
        Self::from_fn(self.height, w, self.channels, |y, x, c| {
            self.get(y, (x + w - k % w) % w, c)
        })
        .expect("same pixel count")
    }

    /// Channel-major `[channels, height, width]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w, ch) = (self.height, self.width, self.channels);
        Tensor::from_fn(&[ch, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            T::from_f64(self.data[p * ch + c] as f64)
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!(
            (self.height, self.width, self.channels),
            (other.height, other.width, other.channels)
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// 8-bit quantization: `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Load a PNG, PGM or PPM file. Gray inputs stay single-channel; anything
    /// else is converted to RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            DynamicImage::ImageLuma8(g) => Self::from_bytes(h, w, 1, g.as_raw()),
            other => Self::from_bytes(h, w, 3, other.to_rgb8().as_raw()),
        }
    }

    /// Save as 8-bit PNG, PGM or PPM depending on the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let bytes = self.to_bytes();
        let res = if self.channels == 1 {
            let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("size");
            buf.save(path)
        } else {
            let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("size");
            buf.save(path)
        };
        res.map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
    }
}

/// Write a single-channel map as a binary PGM, min-max scaled to `0..=255`.
/// A constant map is written as all zeros.
pub fn write_heatmap_pgm(path: impl AsRef<Path>, height: usize, width: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let scaled: Vec<f32> = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect();
    let path = path.as_ref();
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(scaled.iter().map(|&v| (v * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
