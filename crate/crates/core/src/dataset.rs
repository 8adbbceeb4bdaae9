//! Pair manifests and loading of network-ready inputs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::preprocess;
use crate::polar::{polar_transform, PolarConfig};
use crate::raster::Image;
use crate::tensor::{Scalar, Tensor};

pub const HEADER: [&str; 3] = ["id", "ground_path", "aerial_path"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub ground_path: PathBuf,
    pub aerial_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub base: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(base: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate pair id {}", e.id)));
            }
        }
        Ok(Self {
            base: base.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = rdr.headers().map_err(|e| csv_error(path, e))?;
        if header.iter().collect::<Vec<_>>() != HEADER {
            return Err(Error::format(path, format!("manifest header must be {}", HEADER.join(","))));
        }
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            entries.push(ManifestEntry {
                id: rec[0].to_string(),
                ground_path: rec[1].into(),
                aerial_path: rec[2].into(),
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(base, entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(HEADER).map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            let g = e.ground_path.to_string_lossy();
            let a = e.aerial_path.to_string_lossy();
            w.write_record([e.id.as_str(), &g, &a]).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Ground image and polar-warped aerial image of entry `i`.
    pub fn load_pair(&self, i: usize, polar: &PolarConfig) -> Result<(Image, Image)> {
        let e = &self.entries[i];
        let ground = Image::load(self.resolve(&e.ground_path))?;
        let aerial = Image::load(self.resolve(&e.aerial_path))?;
        Ok((ground, polar_transform(&aerial, polar)?))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => Error::format(path, msg),
    }
}

/// One matched pair, preprocessed for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair<T> {
    pub id: String,
    pub ground: Tensor<T>,
    pub aerial: Tensor<T>,
}

impl<T: Scalar> TrainPair<T> {
    /// `aerial` must already be polar-warped.
    pub fn from_images(id: impl Into<String>, ground: &Image, aerial: &Image, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            ground: preprocess(ground, h, w)?,
            aerial: preprocess(aerial, h, w)?,
        })
    }
}

pub fn load_pairs<T: Scalar>(manifest: &Manifest, polar: &PolarConfig, h: usize, w: usize) -> Result<Vec<TrainPair<T>>> {
    (0..manifest.len())
        .map(|i| {
            let (g, a) = manifest.load_pair(i, polar)?;
            TrainPair::from_images(manifest.entries[i].id.clone(), &g, &a, h, w)
        })
        .collect()
}
