use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use transgcnn_core::checkpoint::Checkpoint;
use transgcnn_core::dataset::{load_pairs, Manifest};
use transgcnn_core::polar::polar_transform;
use transgcnn_core::raster::write_heatmap_pgm;
use transgcnn_core::retrieval::{bench, embed_manifest, evaluate, evaluate_dbs, identity_truth, DescriptorDb};
use transgcnn_core::scenes::{gen_dataset, gen_pair};
use transgcnn_core::train::Trainer;
use transgcnn_core::{Error, Image, Result, Scalar, SiameseModel, View};

use crate::config::{Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "transgcnn", version, about = "Ground-to-aerial retrieval on synthetic scenes")]
pub struct Cli {
    /// Worker threads for embedding and evaluation.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic pairs, PNGs and a manifest.
    GenData(GenData),
    /// Polar-warp one aerial image.
    Polar(PolarCmd),
    /// Train from a manifest and write a checkpoint plus loss log.
    Train(TrainCmd),
    /// Write the descriptors of one view of a manifest.
    Embed(EmbedCmd),
    /// Print recall metrics.
    Eval(EvalCmd),
    /// Print parameter count and single-image throughput.
    Bench(BenchCmd),
    /// Write the attention maps of one image as PGM heatmaps.
    Attn(AttnCmd),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ViewArg {
    Ground,
    Aerial,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Ground => View::Ground,
            ViewArg::Aerial => View::Aerial,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (`key = value` lines); desk defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load_or_default(self.config.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: u64,
    #[arg(long)]
    pub seed: u64,
    /// Pixel noise std; brightness and contrast jitter use the same strength.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Index of the first pair.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct PolarCmd {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Manifest CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path; periodic checkpoints overwrite it.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log; defaults to `<out>.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EmbedCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub view: ViewArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    /// Query descriptor DB; truth pairs rows with equal ids.
    #[arg(long, requires = "gallery", conflicts_with_all = ["checkpoint", "data"])]
    pub queries: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    pub gallery: Option<PathBuf>,
    /// Embed and evaluate a manifest directly.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct BenchCmd {
    /// Randomly initialized weights when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct AttnCmd {
    /// Randomly initialized weights when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Ground panorama, or raw aerial tile (polar-warped before use).
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_enum)]
    pub view: ViewArg,
    /// Output files are `<prefix>_k<i>.pgm`.
    #[arg(long)]
    pub prefix: PathBuf,
    #[command(flatten)]
    pub config: ConfigArg,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Config(_) | Error::Shape { .. } | Error::Data(_) => 4,
        Error::Numeric(_) | Error::DegenerateDescriptor => 5,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_model<T: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<SiameseModel<T>> {
    match checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut model = SiameseModel::new(&cfg.model)?;
            ckpt.restore_params(model.store_mut())?;
            Ok(model)
        }
        None => SiameseModel::seeded(&cfg.model, cfg.train.seed),
    }
}

macro_rules! with_precision {
    ($p:expr, $f:ident($($arg:expr),*)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let threads = cli.threads as usize;
    match &cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Polar(a) => polar(a),
        Command::Train(a) => {
            let cfg = a.config.load()?;
            with_precision!(cfg.precision, train(a, &cfg, out))
        }
        Command::Embed(a) => {
            let cfg = a.config.load()?;
            with_precision!(cfg.precision, embed(a, &cfg, threads))
        }
        Command::Eval(a) => eval(a, threads, out),
        Command::Bench(a) => {
            let cfg = a.config.load()?;
            with_precision!(cfg.precision, bench_cmd(a, &cfg, out))
        }
        Command::Attn(a) => {
            let cfg = a.config.load()?;
            with_precision!(cfg.precision, attn(a, &cfg, out))
        }
    }
}

fn gen_data(a: &GenData, out: &mut dyn Write) -> Result<()> {
    let cfg = a.config.load()?;
    let spec = cfg.scene_spec(a.seed, a.noise);
    spec.validate()?;
    let manifest = gen_dataset(&spec, &a.out, a.start, a.count)?;
    writeln!(out, "wrote {} pairs to {}", manifest.len(), a.out.display()).map_err(|e| io_err(&a.out, e))
}

fn polar(a: &PolarCmd) -> Result<()> {
    let cfg = a.config.load()?;
    let img = Image::load(&a.input)?;
    polar_transform(&img, &cfg.polar)?.save(&a.out)
}

fn train<T: Scalar>(a: &TrainCmd, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let manifest = Manifest::read(&a.data)?;
    let data = load_pairs::<T>(&manifest, &cfg.polar, cfg.model.input_h, cfg.model.input_w)?;
    let model = SiameseModel::<T>::seeded(&cfg.model, cfg.train.seed)?;
    let mut trainer = match &resume {
        Some(ckpt) => Trainer::resume(model, cfg.train.clone(), ckpt, data.len())?,
        None => Trainer::new(model, cfg.train.clone())?,
    };
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log");
        p.into()
    });
    let file = if resume.is_some() {
        File::options().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    };
    let mut log = BufWriter::new(file.map_err(|e| io_err(&log_path, e))?);
    trainer.fit(&data, |t, loss, due| {
        let line = format!("epoch {} loss {loss:.6}", t.epoch());
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| io_err(&log_path, e))?;
        writeln!(out, "{line}").map_err(|e| io_err(&log_path, e))?;
        if due {
            t.checkpoint().save(&a.out)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&a.out)
}

fn embed<T: Scalar>(a: &EmbedCmd, cfg: &RunConfig, threads: usize) -> Result<()> {
    let model = load_model::<T>(cfg, Some(&a.checkpoint))?;
    let manifest = Manifest::read(&a.data)?;
    embed_manifest(&model, &manifest, &cfg.polar, a.view.into(), threads)?.save(&a.out)
}

fn eval_manifest<T: Scalar>(a: &EvalCmd, cfg: &RunConfig, threads: usize) -> Result<String> {
    let (Some(ckpt), Some(data)) = (&a.checkpoint, &a.data) else {
        unreachable!("checked by the caller");
    };
    let model = load_model::<T>(cfg, Some(ckpt))?;
    let manifest = Manifest::read(data)?;
    Ok(evaluate(&model, &manifest, &cfg.polar, threads)?.to_string())
}

fn eval(a: &EvalCmd, threads: usize, out: &mut dyn Write) -> Result<()> {
    let report = match (&a.queries, &a.gallery, &a.checkpoint, &a.data) {
        (Some(q), Some(g), None, None) => {
            let q = DescriptorDb::load(q)?;
            let g = DescriptorDb::load(g)?;
            evaluate_dbs(&q, &g, &identity_truth(&q), threads)?.to_string()
        }
        (None, None, Some(_), Some(_)) => {
            let cfg = a.config.load()?;
            with_precision!(cfg.precision, eval_manifest(a, &cfg, threads))?
        }
        _ => {
            return Err(Error::Usage(
                "eval needs either --queries and --gallery or --checkpoint and --data".into(),
            ))
        }
    };
    write!(out, "{report}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn bench_cmd<T: Scalar>(a: &BenchCmd, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = load_model::<T>(cfg, a.checkpoint.as_deref())?;
    let sample = gen_pair(&cfg.scene_spec(0, 0.05), 0)?;
    let input = model.preprocess(&sample.ground)?;
    let report = bench(&model, &input, a.iterations)?;
    write!(out, "{report}").map_err(|e| io_err(Path::new("<stdout>"), e))
}

fn attn<T: Scalar>(a: &AttnCmd, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let model = load_model::<T>(cfg, a.checkpoint.as_deref())?;
    let mut img = Image::load(&a.image)?;
    if a.view == ViewArg::Aerial {
        img = polar_transform(&img, &cfg.polar)?;
    }
    let maps = model.attention_maps(a.view.into(), &img)?;
    let (h, w) = (maps.shape()[1], maps.shape()[2]);
    for (i, map) in maps.to_f64_vec().chunks(h * w).enumerate() {
        let path = PathBuf::from(format!("{}_k{i}.pgm", a.prefix.display()));
        write_heatmap_pgm(&path, h, w, map)?;
        writeln!(out, "{}", path.display()).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}
