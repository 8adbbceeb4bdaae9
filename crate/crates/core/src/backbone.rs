//! Convolutional feature extractor producing the local feature map `F` and
//! its channel-projected copy `F_a` consumed by the transformer head.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output width of every stage.
    pub widths: Vec<usize>,
    /// 3x3 convolutions (padding 1, ReLU) per stage.
    pub convs_per_stage: usize,
    /// Whether each stage ends in a 2x2 max pool.
    pub pool_after: Vec<bool>,
    /// Channel width `d` of the projected map `F_a`.
    pub proj_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
            convs_per_stage: 2,
            pool_after: vec![true, true, true],
            proj_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("backbone needs at least one stage of positive width".into()));
        }
        if self.pool_after.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{} pool flags for {} stages",
                self.pool_after.len(),
                self.widths.len()
            )));
        }
        if self.convs_per_stage == 0 || self.in_channels == 0 || self.proj_dim == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        Ok(())
    }

    /// Channel count `C` of `F`.
    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Total spatial downsampling factor.
    pub fn stride(&self) -> usize {
        1 << self.pool_after.iter().filter(|&&p| p).count()
    }

    /// Feature-grid size for an input of `h x w` pixels.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the backbone stride {s}"
            )));
        }
        Ok((h / s, w / s))
    }

    /// Trainable scalars: every 3x3 conv and the 1x1 projection, with biases.
    pub fn param_count(&self) -> usize {
        let mut c_in = self.in_channels;
        let mut n = 0;
        for &w in &self.widths {
            for _ in 0..self.convs_per_stage {
                n += conv_params(c_in, w, 3);
                c_in = w;
            }
        }
        n + conv_params(c_in, self.proj_dim, 1)
    }
}

/// Weights plus bias of a `k x k` convolution.
pub fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k + c_out
}

#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvIds {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.register(
                format!("{name}/weight"),
                &[c_out, c_in, k, k],
                Init::FanInUniform { fan_in: c_in * k * k },
            )?,
            bias: store.register(format!("{name}/bias"), &[c_out], Init::Zeros)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Vec<ConvIds>>,
    proj: ConvIds,
}

impl Backbone {
    pub fn new<T: Scalar>(cfg: &BackboneConfig, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::new();
        for (s, &w) in cfg.widths.iter().enumerate() {
            let mut convs = Vec::new();
            for c in 0..cfg.convs_per_stage {
                convs.push(ConvIds::register(store, &format!("{prefix}/stage{s}/conv{c}"), c_in, w, 3)?);
                c_in = w;
            }
            stages.push(convs);
        }
        let proj = ConvIds::register(store, &format!("{prefix}/proj"), c_in, cfg.proj_dim, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            proj,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `F` for an image tensor `[in_channels, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut crate::params::Graph<'_, T>, img: Var) -> Result<Var> {
        let shape = g.shape(img).to_vec();
        match shape[..] {
            [c, h, w] if c == self.cfg.in_channels => {
                self.cfg.grid(h, w)?;
            }
            _ => {
                return Err(Error::Config(format!(
                    "backbone expects [{}, H, W] input, got {shape:?}",
                    self.cfg.in_channels
                )))
            }
        }
        let mut x = img;
        for (convs, &pool) in self.stages.iter().zip(&self.cfg.pool_after) {
            for ids in convs {
                let (w, b) = (g.param(ids.weight), g.param(ids.bias));
                let y = g.conv2d(x, w, Some(b), 1, 1)?;
                x = g.relu(y);
            }
            if pool {
                x = g.maxpool2d(x, 2, 2)?;
            }
        }
        Ok(x)
    }

    /// `F_a`: per-pixel linear map of `F` to `proj_dim` channels.
    pub fn project<T: Scalar>(&self, g: &mut crate::params::Graph<'_, T>, f: Var) -> Result<Var> {
        let (w, b) = (g.param(self.proj.weight), g.param(self.proj.bias));
        project(g, f, w, Some(b))
    }
}

/// 1x1 convolution `kernel: [d, C, 1, 1]` applied to `f: [C, H, W]`.
pub fn project<T: Scalar>(t: &mut Tape<T>, f: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let (fs, ks) = (t.shape(f).to_vec(), t.shape(kernel).to_vec());
    match (&fs[..], &ks[..]) {
        ([c, _, _], [_, kc, 1, 1]) if c == kc => t.conv2d(f, kernel, bias, 1, 0),
        _ => Err(Error::shape("project", &fs, &ks)),
    }
}
