//! Siamese retrieval model: two branches of identical architecture with
//! disjoint parameters, one for ground panoramas and one for polar-warped
//! aerial images.

use crate::backbone::{Backbone, BackboneConfig};
use crate::coupling;
use crate::error::{Error, Result};
use crate::head::{Head, HeadConfig, HeadOutput};
use crate::loss::{View, DEFAULT_GAMMA};
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::raster::Image;
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Number of spatial attention maps `K`.
    pub attn_k: usize,
    /// Loss slope.
    pub gamma: f64,
    pub input_h: usize,
    pub input_w: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            head: HeadConfig::default(),
            attn_k: 4,
            gamma: DEFAULT_GAMMA,
            input_h: 64,
            input_w: 320,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate(self.backbone.proj_dim)?;
        let (_, gw) = self.grid()?;
        if gw % self.head.parts != 0 {
            return Err(Error::Config(format!(
                "grid width {gw} is not divisible by {} parts",
                self.head.parts
            )));
        }
        if self.attn_k == 0 {
            return Err(Error::Config("attn_k must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }

    /// Feature grid `(h, w)` after the backbone.
    pub fn grid(&self) -> Result<(usize, usize)> {
        self.backbone.grid(self.input_h, self.input_w)
    }

    pub fn descriptor_len(&self) -> usize {
        self.backbone.out_channels() * self.attn_k
    }

    /// Trainable scalars of both branches.
    pub fn param_count(&self) -> usize {
        let d = self.backbone.proj_dim;
        2 * (self.backbone.param_count() + self.head.param_count(d) + self.attn_k * d)
    }
}

/// Intermediate values of one branch on one image.
pub struct BranchOutput {
    /// CNN map `[c, h, w]`.
    pub features: Var,
    /// Attention maps `[k, h, w]`.
    pub attention: Var,
    /// Unit descriptor `[c * k]`.
    pub descriptor: Var,
    pub head: HeadOutput,
}

#[derive(Debug, Clone)]
pub struct Branch {
    backbone: Backbone,
    head: Head,
    attn: ParamId,
}

impl Branch {
    fn new<T: Scalar>(cfg: &ModelConfig, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        let d = cfg.backbone.proj_dim;
        Ok(Self {
            backbone: Backbone::new(&cfg.backbone, store, &format!("{prefix}/backbone"))?,
            head: Head::new(&cfg.head, d, store, &format!("{prefix}/head"))?,
            attn: store.register(
                format!("{prefix}/coupling/weight"),
                &[cfg.attn_k, d, 1, 1],
                Init::FanInUniform { fan_in: d },
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<BranchOutput> {
        let features = self.backbone.forward(g, img)?;
        let fa = self.backbone.project(g, features)?;
        let head = self.head.forward(g, fa)?;
        let kernel = g.param(self.attn);
        let attention = coupling::attention_project(g, head.fused, kernel)?;
        let raw = coupling::couple(g, features, attention)?;
        let descriptor = coupling::normalize(g, raw)?;
        Ok(BranchOutput {
            features,
            attention,
            descriptor,
            head,
        })
    }
}

/// Network input: `[channels, h, w]` with each channel's mean removed.
pub fn preprocess<T: Scalar>(img: &Image, h: usize, w: usize) -> Result<Tensor<T>> {
    if (img.height(), img.width()) != (h, w) {
        return Err(Error::Config(format!(
            "image is {}x{}, model expects {h}x{w}",
            img.height(),
            img.width()
        )));
    }
    let mut t = img.to_tensor::<T>();
    let plane = h * w;
    for ch in t.data_mut().chunks_mut(plane) {
        let mean = ch.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64;
        let m = T::from_f64(mean);
        ch.iter_mut().for_each(|v| *v -= m);
    }
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct SiameseModel<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    ground: Branch,
    aerial: Branch,
}

impl<T: Scalar> SiameseModel<T> {
    /// Build the architecture with zeroed parameters; call [`init`](Self::init) to draw them.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let ground = Branch::new(cfg, &mut store, "ground")?;
        let aerial = Branch::new(cfg, &mut store, "aerial")?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            ground,
            aerial,
        })
    }

    pub fn seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        m.init(seed);
        Ok(m)
    }

    pub fn init(&mut self, seed: u64) {
        self.store.init(seed);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn branch(&self, view: View) -> &Branch {
        match view {
            View::Ground => &self.ground,
            View::Aerial => &self.aerial,
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn preprocess(&self, img: &Image) -> Result<Tensor<T>> {
        preprocess(img, self.cfg.input_h, self.cfg.input_w)
    }

    /// Record a branch forward pass on `g` for a preprocessed input.
    pub fn forward(&self, g: &mut Graph<'_, T>, view: View, input: &Tensor<T>) -> Result<BranchOutput> {
        let x = g.constant(input.clone());
        self.branch(view).forward(g, x)
    }

    /// Descriptor of a preprocessed input.
    pub fn embed_tensor(&self, view: View, input: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new(&self.store, false);
        let out = self.forward(&mut g, view, input)?;
        Ok(g.value(out.descriptor).data().to_vec())
    }

    pub fn embed(&self, view: View, img: &Image) -> Result<Vec<T>> {
        self.embed_tensor(view, &self.preprocess(img)?)
    }

    pub fn embed_ground(&self, img: &Image) -> Result<Vec<T>> {
        self.embed(View::Ground, img)
    }

    /// `polar_img` must already be polar-warped.
    pub fn embed_aerial(&self, polar_img: &Image) -> Result<Vec<T>> {
        self.embed(View::Aerial, polar_img)
    }

    /// Attention maps `[k, h, w]` of one branch.
    pub fn attention_maps(&self, view: View, img: &Image) -> Result<Tensor<T>> {
        let input = self.preprocess(img)?;
        let mut g = Graph::new(&self.store, false);
        let out = self.forward(&mut g, view, &input)?;
        Ok(g.value(out.attention).clone())
    }
}
