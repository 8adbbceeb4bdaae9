//! `key = value` run configuration shared by every subcommand.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are ignored, as
//! is anything after a `#` on a value line. Unset keys keep their desk-scale
//! defaults, except `polar_span`, which defaults to the aerial height.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use transgcnn_core::polar::PolarConfig;
use transgcnn_core::scenes::SceneSpec;
use transgcnn_core::train::TrainConfig;
use transgcnn_core::{Error, ModelConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(format!("precision must be f32 or f64, got {other:?}")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
    pub polar: PolarConfig,
}

pub const KEYS: &[&str] = &[
    "grid_h",
    "grid_w",
    "widths",
    "convs_per_stage",
    "proj_dim",
    "depth",
    "parts",
    "mlp_ratio",
    "se_reduction",
    "attn_k",
    "gamma",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "checkpoint_every",
    "precision",
    "polar_span",
    "ground_w",
    "ground_h",
    "aerial_w",
    "aerial_h",
];

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let (grid_h, grid_w) = model.grid().expect("default grid");
        Self {
            grid_h,
            grid_w,
            polar: PolarConfig::new(model.input_w, model.input_h, 128, 128).expect("default polar"),
            model,
            train: TrainConfig::default(),
            precision: Precision::F32,
        }
    }
}

fn value<V: FromStr>(line: usize, key: &str, raw: &str) -> Result<V>
where
    V::Err: fmt::Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("line {line}: bad value {raw:?} for {key}: {e}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected key = value, got {raw:?}")))?;
            let (key, val) = (key.trim(), val.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {n}: unknown key {key:?}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {n}: duplicate key {key:?}")));
            }
            cfg.set(n, key, val)?;
        }
        if !seen.contains("polar_span") {
            cfg.polar.span = cfg.polar.aerial_h as f64;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    fn set(&mut self, n: usize, key: &str, val: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "grid_h" => self.grid_h = value(n, key, val)?,
            "grid_w" => self.grid_w = value(n, key, val)?,
            "widths" => {
                m.backbone.widths = val
                    .split(',')
                    .map(|w| value(n, key, w.trim()))
                    .collect::<Result<_>>()?;
                m.backbone.pool_after = vec![true; m.backbone.widths.len()];
            }
            "convs_per_stage" => m.backbone.convs_per_stage = value(n, key, val)?,
            "proj_dim" => m.backbone.proj_dim = value(n, key, val)?,
            "depth" => m.head.depth = value(n, key, val)?,
            "parts" => m.head.parts = value(n, key, val)?,
            "mlp_ratio" => m.head.mlp_ratio = value(n, key, val)?,
            "se_reduction" => m.head.se_reduction = value(n, key, val)?,
            "attn_k" => m.attn_k = value(n, key, val)?,
            "gamma" => m.gamma = value(n, key, val)?,
            "lr" => self.train.optim.lr = value(n, key, val)?,
            "weight_decay" => self.train.optim.weight_decay = value(n, key, val)?,
            "batch_size" => self.train.batch_size = value(n, key, val)?,
            "epochs" => self.train.epochs = value(n, key, val)?,
            "seed" => self.train.seed = value(n, key, val)?,
            "checkpoint_every" => self.train.checkpoint_every = value(n, key, val)?,
            "precision" => self.precision = value(n, key, val)?,
            "polar_span" => self.polar.span = value(n, key, val)?,
            "ground_w" => self.polar.ground_w = value(n, key, val)?,
            "ground_h" => self.polar.ground_h = value(n, key, val)?,
            "aerial_w" => self.polar.aerial_w = value(n, key, val)?,
            "aerial_h" => self.polar.aerial_h = value(n, key, val)?,
            _ => unreachable!("key list checked by the caller"),
        }
        Ok(())
    }

    /// The network input is the panorama size.
    fn sync(&mut self) {
        self.model.input_h = self.polar.ground_h;
        self.model.input_w = self.polar.ground_w;
    }

    pub fn validate(&self) -> Result<()> {
        self.polar.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.input_h != self.polar.ground_h || self.model.input_w != self.polar.ground_w {
            return Err(Error::Config("model input must match the panorama size".into()));
        }
        let grid = self.model.grid()?;
        if grid != (self.grid_h, self.grid_w) {
            return Err(Error::Config(format!(
                "a {}x{} panorama gives a {}x{} feature grid, config says {}x{}",
                self.polar.ground_h, self.polar.ground_w, grid.0, grid.1, self.grid_h, self.grid_w
            )));
        }
        if !(self.train.optim.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.train.optim.lr)));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Scene generator sizes matching the polar settings.
    pub fn scene_spec(&self, seed: u64, noise: f64) -> SceneSpec {
        SceneSpec {
            aerial_size: self.polar.aerial_w,
            ground_w: self.polar.ground_w,
            ground_h: self.polar.ground_h,
            ..SceneSpec::with_noise(seed, noise)
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.model;
        let widths: Vec<String> = m.backbone.widths.iter().map(|w| w.to_string()).collect();
        writeln!(f, "grid_h = {}", self.grid_h)?;
        writeln!(f, "grid_w = {}", self.grid_w)?;
        writeln!(f, "widths = {}", widths.join(","))?;
        writeln!(f, "convs_per_stage = {}", m.backbone.convs_per_stage)?;
        writeln!(f, "proj_dim = {}", m.backbone.proj_dim)?;
        writeln!(f, "depth = {}", m.head.depth)?;
        writeln!(f, "parts = {}", m.head.parts)?;
        writeln!(f, "mlp_ratio = {}", m.head.mlp_ratio)?;
        writeln!(f, "se_reduction = {}", m.head.se_reduction)?;
        writeln!(f, "attn_k = {}", m.attn_k)?;
        writeln!(f, "gamma = {}", m.gamma)?;
        writeln!(f, "lr = {}", self.train.optim.lr)?;
        writeln!(f, "weight_decay = {}", self.train.optim.weight_decay)?;
        writeln!(f, "batch_size = {}", self.train.batch_size)?;
        writeln!(f, "epochs = {}", self.train.epochs)?;
        writeln!(f, "seed = {}", self.train.seed)?;
        writeln!(f, "checkpoint_every = {}", self.train.checkpoint_every)?;
        writeln!(f, "precision = {}", self.precision)?;
        writeln!(f, "polar_span = {}", self.polar.span)?;
        writeln!(f, "ground_w = {}", self.polar.ground_w)?;
        writeln!(f, "ground_h = {}", self.polar.ground_h)?;
        writeln!(f, "aerial_w = {}", self.polar.aerial_w)?;
        writeln!(f, "aerial_h = {}", self.polar.aerial_h)
    }
}
