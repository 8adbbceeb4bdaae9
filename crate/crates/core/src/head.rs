//! Dual-branch window transformer head: a global branch attending over the
//! whole token grid and a part branch attending within vertical column
//! partitions, fused by a sum followed by squeeze-and-excitation gating.

use crate::error::{Error, Result};
use crate::params::{Graph, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Var};

pub const LN_EPS: f64 = 1e-5;
const LINEAR_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadConfig {
    /// Blocks per branch.
    pub depth: usize,
    /// Number of vertical partitions in the part branch.
    pub parts: usize,
    pub mlp_ratio: usize,
    pub se_reduction: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            parts: 5,
            mlp_ratio: 4,
            se_reduction: 4,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.depth == 0 || self.parts == 0 || self.mlp_ratio == 0 || self.se_reduction == 0 {
            return Err(Error::Config("head depth, parts, mlp_ratio and se_reduction must be positive".into()));
        }
        if !dim.is_multiple_of(self.se_reduction) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by se_reduction {}",
                self.se_reduction
            )));
        }
        Ok(())
    }

    /// Trainable scalars of a head over `dim`-channel tokens.
    pub fn param_count(&self, dim: usize) -> usize {
        let hidden = self.mlp_ratio * dim;
        let block = 4 * dim + 3 * dim * dim + 2 * dim * hidden + hidden + dim;
        let r = dim / self.se_reduction;
        let se = dim * r + r + r * dim + dim;
        2 * self.depth * block + se
    }
}

/// Tokens `[h*w, d]` in row-major grid order, remembering the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSeq {
    pub var: Var,
    pub h: usize,
    pub w: usize,
}

/// `[d, h, w]` map to `h*w` tokens; token `i*w + j` is cell `(i, j)`.
pub fn tokenize<T: Scalar>(t: &mut Tape<T>, map: Var) -> Result<TokenSeq> {
    let [d, h, w] = t.value(map).dims3("tokenize")?;
    let flat = t.reshape(map, &[d, h * w])?;
    let var = t.transpose(flat)?;
    Ok(TokenSeq { var, h, w })
}

pub fn detokenize<T: Scalar>(t: &mut Tape<T>, z: &TokenSeq) -> Result<Var> {
    let [n, d] = t.value(z.var).dims2("detokenize")?;
    if n != z.h * z.w {
        return Err(Error::shape("detokenize", &[n, d], &[z.h, z.w]));
    }
    let tr = t.transpose(z.var)?;
    t.reshape(tr, &[d, z.h, z.w])
}

/// Split of a `grid_h x grid_w` token grid into `parts` column blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub parts: usize,
    /// Columns per partition.
    pub width: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PartitionSpec {
    pub fn new(grid_h: usize, grid_w: usize, parts: usize) -> Result<Self> {
        if parts == 0 || grid_h == 0 || grid_w == 0 || !grid_w.is_multiple_of(parts) {
            return Err(Error::Config(format!(
                "grid width {grid_w} cannot be split into {parts} equal partitions"
            )));
        }
        Ok(Self {
            parts,
            width: grid_w / parts,
            grid_h,
            grid_w,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// First column of partition `j` (0-based).
    pub fn offset(&self, j: usize) -> usize {
        j * self.width
    }

    /// Token indices of partition `j`, row by row, columns left to right.
    pub fn part_indices(&self, j: usize) -> Vec<usize> {
        let o = self.offset(j);
        (0..self.grid_h)
            .flat_map(|i| (o..o + self.width).map(move |c| i * self.grid_w + c))
            .collect()
    }

    pub fn part_of(&self, token: usize) -> usize {
        (token % self.grid_w) / self.width
    }

    /// For every original token, its position in the concatenation of all parts.
    pub fn merge_index(&self) -> Vec<usize> {
        let mut inv = vec![0; self.tokens()];
        let order = (0..self.parts).flat_map(|j| self.part_indices(j));
        for (pos, tok) in order.enumerate() {
            inv[tok] = pos;
        }
        inv
    }

    /// Row-major `[n, n]` flags: true where both tokens share a partition.
    pub fn block_mask(&self) -> Vec<bool> {
        let n = self.tokens();
        (0..n * n)
            .map(|k| self.part_of(k / n) == self.part_of(k % n))
            .collect()
    }

    fn check(&self, z: &TokenSeq) -> Result<()> {
        if (z.h, z.w) != (self.grid_h, self.grid_w) {
            return Err(Error::shape("partition", &[self.grid_h, self.grid_w], &[z.h, z.w]));
        }
        Ok(())
    }
}

pub fn split_parts<T: Scalar>(t: &mut Tape<T>, z: &TokenSeq, spec: &PartitionSpec) -> Result<Vec<Var>> {
    spec.check(z)?;
    (0..spec.parts)
        .map(|j| t.select_rows(z.var, &spec.part_indices(j)))
        .collect()
}

pub fn merge_parts<T: Scalar>(t: &mut Tape<T>, parts: &[Var], spec: &PartitionSpec) -> Result<TokenSeq> {
    if parts.len() != spec.parts {
        return Err(Error::Usage(format!(
            "expected {} partitions, got {}",
            spec.parts,
            parts.len()
        )));
    }
    let d = t.shape(parts[0]).get(1).copied().unwrap_or(0);
    for &p in parts {
        if t.shape(p) != [spec.grid_h * spec.width, d] {
            return Err(Error::Usage(format!(
                "partition of shape {:?} does not fit a {}x{} grid",
                t.shape(p),
                spec.grid_h,
                spec.width
            )));
        }
    }
    let cat = t.concat(parts)?;
    let var = t.select_rows(cat, &spec.merge_index())?;
    Ok(TokenSeq {
        var,
        h: spec.grid_h,
        w: spec.grid_w,
    })
}

pub struct Attention {
    pub out: Var,
    /// Row-stochastic `[n, n]` weights.
    pub weights: Var,
}

/// Single-head self-attention over the rows of `x: [n, d]`. Pairs whose
/// `allowed` flag is false get zero weight.
pub fn shsa<T: Scalar>(
    t: &mut Tape<T>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    allowed: Option<&[bool]>,
) -> Result<Attention> {
    let d = t.value(x).dims2("shsa")?[1];
    let q = t.matmul(x, wq)?;
    let k = t.matmul(x, wk)?;
    let v = t.matmul(x, wv)?;
    let logits = t.matmul_nt(q, k)?;
    let mut logits = t.scale(logits, T::from_f64(1.0 / (d as f64).sqrt()));
    if let Some(mask) = allowed {
        logits = t.masked(logits, mask.to_vec())?;
    }
    let weights = t.softmax_last(logits)?;
    let out = t.matmul(weights, v)?;
    Ok(Attention { out, weights })
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl BlockIds {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        let lin = Init::TruncNormal { std: LINEAR_STD };
        let mut reg = |name: &str, shape: &[usize], init| store.register(format!("{prefix}/{name}"), shape, init);
        Ok(Self {
            ln1_gain: reg("ln1/gain", &[dim], Init::Ones)?,
            ln1_bias: reg("ln1/bias", &[dim], Init::Zeros)?,
            wq: reg("attn/wq", &[dim, dim], lin)?,
            wk: reg("attn/wk", &[dim, dim], lin)?,
            wv: reg("attn/wv", &[dim, dim], lin)?,
            ln2_gain: reg("ln2/gain", &[dim], Init::Ones)?,
            ln2_bias: reg("ln2/bias", &[dim], Init::Zeros)?,
            fc1_w: reg("mlp/fc1/weight", &[dim, hidden], lin)?,
            fc1_b: reg("mlp/fc1/bias", &[hidden], Init::Zeros)?,
            fc2_w: reg("mlp/fc2/weight", &[hidden, dim], lin)?,
            fc2_b: reg("mlp/fc2/bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<'_, T>) -> BlockVars {
        BlockVars {
            ln1_gain: g.param(self.ln1_gain),
            ln1_bias: g.param(self.ln1_bias),
            wq: g.param(self.wq),
            wk: g.param(self.wk),
            wv: g.param(self.wv),
            ln2_gain: g.param(self.ln2_gain),
            ln2_bias: g.param(self.ln2_bias),
            fc1_w: g.param(self.fc1_w),
            fc1_b: g.param(self.fc1_b),
            fc2_w: g.param(self.fc2_w),
            fc2_b: g.param(self.fc2_b),
        }
    }
}

pub struct BlockOutput {
    pub out: TokenSeq,
    /// Attention weights of every SHSA call in the block.
    pub attention: Vec<Var>,
}

fn mlp_residual<T: Scalar>(t: &mut Tape<T>, z: Var, p: &BlockVars) -> Result<Var> {
    let n = t.layer_norm(z, p.ln2_gain, p.ln2_bias, LN_EPS)?;
    let h = t.matmul(n, p.fc1_w)?;
    let h = t.add_row(h, p.fc1_b)?;
    let h = t.gelu(h);
    let o = t.matmul(h, p.fc2_w)?;
    let o = t.add_row(o, p.fc2_b)?;
    t.add(o, z)
}

/// Pre-norm transformer block. `allowed` restricts which token pairs may attend.
pub fn vit_block<T: Scalar>(t: &mut Tape<T>, z: &TokenSeq, p: &BlockVars, allowed: Option<&[bool]>) -> Result<BlockOutput> {
    let n = t.layer_norm(z.var, p.ln1_gain, p.ln1_bias, LN_EPS)?;
    let att = shsa(t, n, p.wq, p.wk, p.wv, allowed)?;
    let mid = t.add(att.out, z.var)?;
    let var = mlp_residual(t, mid, p)?;
    Ok(BlockOutput {
        out: TokenSeq { var, ..*z },
        attention: vec![att.weights],
    })
}

/// Block whose attention runs separately inside each partition with shared weights.
pub fn part_block<T: Scalar>(t: &mut Tape<T>, z: &TokenSeq, spec: &PartitionSpec, p: &BlockVars) -> Result<BlockOutput> {
    let parts = split_parts(t, z, spec)?;
    let mut attention = Vec::with_capacity(parts.len());
    let mut updated = Vec::with_capacity(parts.len());
    for x in parts {
        let n = t.layer_norm(x, p.ln1_gain, p.ln1_bias, LN_EPS)?;
        let att = shsa(t, n, p.wq, p.wk, p.wv, None)?;
        updated.push(t.add(att.out, x)?);
        attention.push(att.weights);
    }
    let merged = merge_parts(t, &updated, spec)?;
    let var = mlp_residual(t, merged.var, p)?;
    Ok(BlockOutput {
        out: TokenSeq { var, ..*z },
        attention,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SeVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SeIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SeIds {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, reduced: usize) -> Result<Self> {
        let lin = Init::TruncNormal { std: LINEAR_STD };
        Ok(Self {
            w1: store.register(format!("{prefix}/fc1/weight"), &[dim, reduced], lin)?,
            b1: store.register(format!("{prefix}/fc1/bias"), &[reduced], Init::Zeros)?,
            w2: store.register(format!("{prefix}/fc2/weight"), &[reduced, dim], lin)?,
            b2: store.register(format!("{prefix}/fc2/bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<'_, T>) -> SeVars {
        SeVars {
            w1: g.param(self.w1),
            b1: g.param(self.b1),
            w2: g.param(self.w2),
            b2: g.param(self.b2),
        }
    }
}

/// Channel gate `[d]` computed from the token mean of `x: [n, d]`.
pub fn se_gate<T: Scalar>(t: &mut Tape<T>, x: Var, p: &SeVars) -> Result<Var> {
    let d = t.value(x).dims2("se")?[1];
    let squeeze = t.mean_rows(x)?;
    let s = t.reshape(squeeze, &[1, d])?;
    let h = t.matmul(s, p.w1)?;
    let h = t.add_row(h, p.b1)?;
    let h = t.relu(h);
    let e = t.matmul(h, p.w2)?;
    let e = t.add_row(e, p.b2)?;
    let gate = t.sigmoid(e);
    t.reshape(gate, &[d])
}

pub struct HeadVars {
    pub global: Vec<BlockVars>,
    pub part: Vec<BlockVars>,
    pub se: SeVars,
}

pub struct HeadOutput {
    /// Fused map `[d, h, w]`.
    pub fused: Var,
    /// Final global-branch tokens.
    pub global: Var,
    /// Final part-branch tokens.
    pub part: Var,
    /// SE channel gate `[d]`.
    pub gate: Var,
    pub attention: Vec<Var>,
}

/// Run both branches on `fa: [d, h, w]` and fuse them.
pub fn head_forward<T: Scalar>(t: &mut Tape<T>, fa: Var, p: &HeadVars, parts: usize) -> Result<HeadOutput> {
    if p.global.is_empty() || p.part.is_empty() {
        return Err(Error::Config("head needs at least one block per branch".into()));
    }
    let z = tokenize(t, fa)?;
    let spec = PartitionSpec::new(z.h, z.w, parts)?;
    let mut attention = Vec::new();
    let mut g = z;
    for b in &p.global {
        let o = vit_block(t, &g, b, None)?;
        attention.extend(o.attention);
        g = o.out;
    }
    let mut q = z;
    for b in &p.part {
        let o = part_block(t, &q, &spec, b)?;
        attention.extend(o.attention);
        q = o.out;
    }
    let sum = t.add(g.var, q.var)?;
    let gate = se_gate(t, sum, &p.se)?;
    let var = t.mul_row(sum, gate)?;
    let fused = detokenize(t, &TokenSeq { var, ..z })?;
    Ok(HeadOutput {
        fused,
        global: g.var,
        part: q.var,
        gate,
        attention,
    })
}

#[derive(Debug, Clone)]
pub struct Head {
    cfg: HeadConfig,
    global: Vec<BlockIds>,
    part: Vec<BlockIds>,
    se: SeIds,
}

impl Head {
    pub fn new<T: Scalar>(cfg: &HeadConfig, dim: usize, store: &mut ParamStore<T>, prefix: &str) -> Result<Self> {
        cfg.validate(dim)?;
        let hidden = cfg.mlp_ratio * dim;
        let global = (0..cfg.depth)
            .map(|l| BlockIds::register(store, &format!("{prefix}/global{l}"), dim, hidden))
            .collect::<Result<_>>()?;
        let part = (0..cfg.depth)
            .map(|l| BlockIds::register(store, &format!("{prefix}/part{l}"), dim, hidden))
            .collect::<Result<_>>()?;
        let se = SeIds::register(store, &format!("{prefix}/se"), dim, dim / cfg.se_reduction)?;
        Ok(Self {
            cfg: cfg.clone(),
            global,
            part,
            se,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn bind<T: Scalar>(&self, g: &mut Graph<'_, T>) -> HeadVars {
        HeadVars {
            global: self.global.iter().map(|b| b.bind(g)).collect(),
            part: self.part.iter().map(|b| b.bind(g)).collect(),
            se: self.se.bind(g),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fa: Var) -> Result<HeadOutput> {
        let vars = self.bind(g);
        head_forward(g, fa, &vars, self.cfg.parts)
    }
}
