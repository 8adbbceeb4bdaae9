//! Descriptor databases, exhaustive nearest-neighbour recall and throughput.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::binio::Cursor;
use crate::dataset::{Manifest, TrainPair};
use crate::error::{Error, Result};
use crate::loss::View;
use crate::model::SiameseModel;
use crate::polar::PolarConfig;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"TGDESC1\n";

/// Named descriptor rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorDb {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
}

impl DescriptorDb {
    pub fn new(ids: Vec<String>, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("descriptor dimension must be positive".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Data(format!(
                "{} values do not form {} rows of width {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("duplicate descriptor id {dup}")));
        }
        Ok(Self { ids, dim, data })
    }

    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Data("descriptor rows differ in length".into()));
        }
        Self::new(ids, dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Largest deviation of any row norm from 1.
    pub fn max_norm_error(&self) -> f64 {
        self.data
            .chunks(self.dim)
            .map(|r| (r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend((self.len() as u32).to_le_bytes());
        out.extend((self.dim as u32).to_le_bytes());
        for id in &self.ids {
            out.extend((id.len() as u32).to_le_bytes());
            out.extend(id.as_bytes());
        }
        for v in &self.data {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(path, reason);
        let truncated = || bad("truncated descriptor file");
        let mut cur = Cursor::new(bytes);
        if cur.take(MAGIC.len()) != Some(&MAGIC[..]) {
            return Err(bad("not a descriptor file"));
        }
        let n = cur.u32().ok_or_else(truncated)? as usize;
        let dim = cur.u32().ok_or_else(truncated)? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = cur.u32().ok_or_else(truncated)? as usize;
            let raw = cur.take(len).ok_or_else(truncated)?;
            ids.push(String::from_utf8(raw.to_vec()).map_err(|_| bad("descriptor id is not UTF-8"))?);
        }
        let count = n.checked_mul(dim).and_then(|c| c.checked_mul(4)).ok_or_else(|| bad("descriptor file too large"))?;
        let data = cur
            .take(count)
            .ok_or_else(truncated)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !cur.at_end() {
            return Err(bad("trailing bytes after descriptor rows"));
        }
        Self::new(ids, dim, data).map_err(|e| bad(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Query id to gallery id.
pub type Truth = HashMap<String, String>;

/// Every query matched to the gallery row with the same id.
pub fn identity_truth(queries: &DescriptorDb) -> Truth {
    queries.ids().iter().map(|id| (id.clone(), id.clone())).collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// 0-based rank of each query's true match: gallery rows strictly closer,
/// plus equally distant rows with a smaller index.
pub fn true_match_ranks(queries: &DescriptorDb, gallery: &DescriptorDb, truth: &Truth, threads: usize) -> Result<Vec<usize>> {
    if queries.dim() != gallery.dim() {
        return Err(Error::Data(format!(
            "query dimension {} differs from gallery dimension {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let index: HashMap<&str, usize> = gallery.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let targets = queries
        .ids()
        .iter()
        .map(|q| {
            truth
                .get(q)
                .and_then(|g| index.get(g.as_str()).copied())
                .ok_or_else(|| Error::Data(format!("no gallery match for query {q}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let rank = |qi: usize| {
        let q = queries.row(qi);
        let t = targets[qi];
        let dt = sq_dist(q, gallery.row(t));
        (0..gallery.len())
            .filter(|&j| {
                let d = sq_dist(q, gallery.row(j));
                d < dt || (d == dt && j < t)
            })
            .count()
    };
    run_indexed(queries.len(), threads, rank)
}

/// `f(0..n)` in order, on `threads` workers when more than one.
fn run_indexed<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync + Send) -> Result<Vec<R>> {
    if threads <= 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::Usage(format!("k must be in 1..={n}, got {k}")));
    }
    Ok(())
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len().max(1) as f64
}

/// Fraction of queries whose true match is among the `k` nearest gallery rows.
pub fn recall_at_k(queries: &DescriptorDb, gallery: &DescriptorDb, truth: &Truth, k: usize) -> Result<f64> {
    check_k(k, gallery.len())?;
    Ok(recall_from_ranks(&true_match_ranks(queries, gallery, truth, 1)?, k))
}

/// `max(1, round(pct / 100 * n))`.
pub fn percent_k(n: usize, pct: f64) -> usize {
    ((pct / 100.0 * n as f64).round() as usize).max(1)
}

pub fn recall_at_percent(queries: &DescriptorDb, gallery: &DescriptorDb, truth: &Truth, pct: f64) -> Result<f64> {
    recall_at_k(queries, gallery, truth, percent_k(gallery.len(), pct))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub queries: usize,
    pub gallery: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r1p: f64,
    /// Cut-off used for `r1p`.
    pub k1p: usize,
}

impl Report {
    /// Metrics from ranks; cut-offs beyond the gallery size are clamped to it.
    pub fn from_ranks(ranks: &[usize], gallery: usize) -> Self {
        let at = |k: usize| recall_from_ranks(ranks, k.min(gallery));
        let k1p = percent_k(gallery, 1.0);
        Self {
            queries: ranks.len(),
            gallery,
            r1: at(1),
            r5: at(5),
            r10: at(10),
            r1p: at(k1p),
            k1p,
        }
    }

    /// Parse the `key=value` block written by `Display`.
    pub fn parse(text: &str) -> Result<Self> {
        let kv: HashMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Data(format!("report lacks {k}")));
        let f = |k: &str| -> Result<f64> { get(k)?.trim().parse().map_err(|_| Error::Data(format!("bad value for {k}"))) };
        let u = |k: &str| -> Result<usize> { get(k)?.trim().parse().map_err(|_| Error::Data(format!("bad value for {k}"))) };
        Ok(Self {
            queries: u("queries")?,
            gallery: u("gallery")?,
            r1: f("r1")?,
            r5: f("r5")?,
            r10: f("r10")?,
            r1p: f("r1p")?,
            k1p: u("k1p")?,
        })
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "r@1 r@5 r@10 r@1%")?;
        writeln!(
            f,
            "{:.2} {:.2} {:.2} {:.2}",
            100.0 * self.r1,
            100.0 * self.r5,
            100.0 * self.r10,
            100.0 * self.r1p
        )?;
        writeln!(f, "queries={}", self.queries)?;
        writeln!(f, "gallery={}", self.gallery)?;
        writeln!(f, "r1={}", self.r1)?;
        writeln!(f, "r5={}", self.r5)?;
        writeln!(f, "r10={}", self.r10)?;
        writeln!(f, "r1p={}", self.r1p)?;
        writeln!(f, "k1p={}", self.k1p)
    }
}

pub fn evaluate_dbs(queries: &DescriptorDb, gallery: &DescriptorDb, truth: &Truth, threads: usize) -> Result<Report> {
    if gallery.is_empty() || queries.is_empty() {
        return Err(Error::Data("cannot evaluate an empty descriptor set".into()));
    }
    let ranks = true_match_ranks(queries, gallery, truth, threads)?;
    Ok(Report::from_ranks(&ranks, gallery.len()))
}

fn to_f32<T: Scalar>(v: Vec<T>) -> Vec<f32> {
    v.into_iter().map(|x| x.as_f64() as f32).collect()
}

/// Descriptors of one view of preprocessed pairs.
pub fn embed_pairs<T: Scalar>(model: &SiameseModel<T>, pairs: &[TrainPair<T>], view: View, threads: usize) -> Result<DescriptorDb> {
    let rows = run_indexed(pairs.len(), threads, |i| {
        let input = match view {
            View::Ground => &pairs[i].ground,
            View::Aerial => &pairs[i].aerial,
        };
        model.embed_tensor(view, input).map(to_f32)
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    DescriptorDb::from_rows(pairs.iter().map(|p| p.id.clone()).collect(), &rows)
}

/// Descriptors of one view of a manifest; aerial images are polar-warped first.
pub fn embed_manifest<T: Scalar>(
    model: &SiameseModel<T>,
    manifest: &Manifest,
    polar: &PolarConfig,
    view: View,
    threads: usize,
) -> Result<DescriptorDb> {
    let rows = run_indexed(manifest.len(), threads, |i| {
        let (g, a) = manifest.load_pair(i, polar)?;
        let img = match view {
            View::Ground => g,
            View::Aerial => a,
        };
        model.embed(view, &img).map(to_f32)
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    DescriptorDb::from_rows(manifest.entries.iter().map(|e| e.id.clone()).collect(), &rows)
}

/// Ground views as queries against aerial views as gallery.
pub fn evaluate_pairs<T: Scalar>(model: &SiameseModel<T>, pairs: &[TrainPair<T>], threads: usize) -> Result<Report> {
    let q = embed_pairs(model, pairs, View::Ground, threads)?;
    let g = embed_pairs(model, pairs, View::Aerial, threads)?;
    evaluate_dbs(&q, &g, &identity_truth(&q), threads)
}

pub fn evaluate<T: Scalar>(model: &SiameseModel<T>, manifest: &Manifest, polar: &PolarConfig, threads: usize) -> Result<Report> {
    let q = embed_manifest(model, manifest, polar, View::Ground, threads)?;
    let g = embed_manifest(model, manifest, polar, View::Aerial, threads)?;
    evaluate_dbs(&q, &g, &identity_truth(&q), threads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub param_count: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub seconds: f64,
    pub images_per_second: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "params={}", self.param_count)?;
        writeln!(f, "warmup={}", self.warmup)?;
        writeln!(f, "iterations={}", self.iterations)?;
        writeln!(f, "seconds={:.6}", self.seconds)?;
        writeln!(f, "images_per_second={:.3}", self.images_per_second)
    }
}

pub const BENCH_WARMUP: usize = 10;
pub const BENCH_MIN_ITERS: usize = 100;

/// Single-image ground-branch throughput; `iterations` is raised to at least 100.
pub fn bench<T: Scalar>(model: &SiameseModel<T>, input: &Tensor<T>, iterations: usize) -> Result<BenchReport> {
    let iterations = iterations.max(BENCH_MIN_ITERS);
    for _ in 0..BENCH_WARMUP {
        model.embed_tensor(View::Ground, input)?;
    }
    let start = Instant::now();
    for _ in 0..iterations {
        model.embed_tensor(View::Ground, input)?;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(BenchReport {
        param_count: model.param_count(),
        warmup: BENCH_WARMUP,
        iterations,
        seconds,
        images_per_second: iterations as f64 / seconds.max(f64::MIN_POSITIVE),
    })
}
