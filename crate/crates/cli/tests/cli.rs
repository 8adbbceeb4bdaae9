use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use transgcnn_core::polar::{polar_transform, PolarConfig};
use transgcnn_core::retrieval::{DescriptorDb, Report};
use transgcnn_core::{Image, ModelConfig};
use transgcnn_cli::RunConfig;

const MICRO: &str = "\
# tiny model for fast end-to-end runs
widths = 2, 3, 4
convs_per_stage = 1
proj_dim = 8
depth = 1
parts = 2
attn_k = 4
grid_h = 2
grid_w = 4
ground_h = 16
ground_w = 32
aerial_w = 32
aerial_h = 32
batch_size = 4
epochs = 2
seed = 3
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_transgcnn"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn transgcnn")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new(count: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("micro.cfg");
        fs::write(&config, MICRO).unwrap();
        let data = dir.path().join("data");
        ok(&["gen-data", "--out", s(&data), "--count", count, "--seed", "7", "--config", s(&config)]);
        Self { dir, config, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn manifest(&self) -> PathBuf {
        self.data.join("manifest.csv")
    }

    fn train(&self, out: &Path) {
        ok(&["train", "--data", s(&self.manifest()), "--out", s(out), "--config", s(&self.config)]);
    }
}

#[test]
fn gen_data_writes_count_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(&["gen-data", "--out", s(d), "--count", "10", "--seed", "5", "--noise", "0.05"]);
    }
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 11);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.csv")).unwrap());
    for line in manifest.lines().skip(1) {
        let id = line.split(',').next().unwrap();
        for view in ["ground", "aerial"] {
            let rel = format!("{view}/{id}.png");
            assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap());
        }
    }
    let ground = Image::load(a.join("ground/pair000000.png")).unwrap();
    assert_eq!((ground.height(), ground.width()), (64, 320));
}

#[test]
fn usage_and_io_failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert_eq!(code(&["gen-data", "--out", s(&out), "--count", "0", "--seed", "1"]), 2);
    assert!(!out.exists());
    assert_eq!(code(&["gen-data", "--out", s(&out), "--count", "ten", "--seed", "1"]), 2);
    assert_eq!(code(&["gen-data", "--count", "1", "--seed", "1"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["--threads", "0", "gen-data", "--out", s(&out), "--count", "1", "--seed", "1"]), 2);
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let under_file = file.join("sub");
    assert_eq!(code(&["gen-data", "--out", s(&under_file), "--count", "1", "--seed", "1"]), 3);
    assert_eq!(code(&["polar", "--in", s(&dir.path().join("missing.png")), "--out", s(&out)]), 3);
    assert_eq!(code(&["eval", "--queries", s(&file), "--gallery", s(&file)]), 3);
    assert_eq!(code(&["eval"]), 2);
    assert!(run(&["eval"]).stderr.starts_with(b"error"));
}

#[test]
fn invalid_config_fails_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    let out = dir.path().join("never");
    for text in ["parts = 3", "colour = blue", "lr = -1", "grid_w = 41"] {
        fs::write(&bad, text).unwrap();
        assert_eq!(code(&["gen-data", "--out", s(&out), "--count", "2", "--seed", "1", "--config", s(&bad)]), 4, "{text}");
        assert_eq!(code(&["train", "--data", s(&bad), "--out", s(&out), "--config", s(&bad)]), 4, "{text}");
        assert!(!out.exists());
    }
    assert_eq!(code(&["bench", "--config", s(&dir.path().join("absent.cfg"))]), 3);
}

#[test]
fn polar_matches_the_library() {
    let fx = Fixture::new("1");
    let aerial = fx.data.join("aerial/pair000000.png");
    let out = fx.path("p.png");
    ok(&["polar", "--in", s(&aerial), "--out", s(&out), "--config", s(&fx.config)]);
    let cfg = PolarConfig::new(32, 16, 32, 32).unwrap();
    let expect = fx.path("lib.png");
    polar_transform(&Image::load(&aerial).unwrap(), &cfg).unwrap().save(&expect).unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&expect).unwrap());
    let img = Image::load(&out).unwrap();
    assert_eq!((img.height(), img.width()), (16, 32));

    let uniform = fx.path("u.png");
    Image::filled(128, 128, 3, 0.6).unwrap().save(&uniform).unwrap();
    ok(&["polar", "--in", s(&uniform), "--out", s(&out)]);
    let img = Image::load(&out).unwrap();
    assert_eq!((img.height(), img.width()), (64, 320));
    assert!(img.data().iter().all(|&v| v == img.data()[0]));
    // wrong tile size for the configured polar grid
    assert_eq!(code(&["polar", "--in", s(&uniform), "--out", s(&out), "--config", s(&fx.config)]), 4);
}

#[test]
fn train_embed_eval_round_trip() {
    let fx = Fixture::new("12");
    let ckpt = fx.path("model.ckpt");
    fx.train(&ckpt);
    let log = fs::read_to_string(fx.path("model.ckpt.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch 1 loss "));
    assert!(fs::read(&ckpt).unwrap().starts_with(b"TGCKPT1\n"));

    let again = fx.path("again.ckpt");
    fx.train(&again);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());

    let mut dbs = Vec::new();
    for view in ["ground", "aerial"] {
        let db = fx.path(&format!("{view}.tgdesc"));
        ok(&[
            "embed", "--checkpoint", s(&ckpt), "--data", s(&fx.manifest()), "--view", view, "--out", s(&db),
            "--config", s(&fx.config),
        ]);
        let loaded = DescriptorDb::load(&db).unwrap();
        assert_eq!(loaded.len(), 12);
        assert_eq!(loaded.dim(), RunConfig::parse(MICRO).unwrap().model.descriptor_len());
        dbs.push(db);
    }

    let same = ok(&["eval", "--queries", s(&dbs[0]), "--gallery", s(&dbs[0])]);
    let fields: Vec<&str> = same.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(fields, vec!["100.00"; 4]);

    let cross = ok(&["eval", "--queries", s(&dbs[0]), "--gallery", s(&dbs[1])]);
    assert_eq!(cross.lines().next(), Some("r@1 r@5 r@10 r@1%"));
    for f in cross.lines().nth(1).unwrap().split_whitespace() {
        let v: f64 = f.parse().unwrap();
        assert!((0.0..=100.0).contains(&v));
    }
    let threaded = ok(&["--threads", "3", "eval", "--queries", s(&dbs[0]), "--gallery", s(&dbs[1])]);
    assert_eq!(cross, threaded);

    let direct = ok(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&fx.manifest()), "--config", s(&fx.config),
    ]);
    assert_eq!(Report::parse(&direct).unwrap(), Report::parse(&cross).unwrap());
}

#[test]
fn resumed_training_matches_a_single_run() {
    let fx = Fixture::new("10");
    let full = fx.path("full.ckpt");
    fx.train(&full);

    let one = fx.path("one.cfg");
    fs::write(&one, MICRO.replace("epochs = 2", "epochs = 1")).unwrap();
    let part = fx.path("part.ckpt");
    ok(&["train", "--data", s(&fx.manifest()), "--out", s(&part), "--config", s(&one)]);
    ok(&[
        "train", "--data", s(&fx.manifest()), "--out", s(&part), "--resume", s(&part), "--config", s(&fx.config),
    ]);
    assert_eq!(fs::read(&full).unwrap(), fs::read(&part).unwrap());
    assert_eq!(
        fs::read_to_string(fx.path("full.ckpt.log")).unwrap(),
        fs::read_to_string(fx.path("part.ckpt.log")).unwrap()
    );
}

#[test]
fn attn_writes_one_heatmap_per_map() {
    let fx = Fixture::new("1");
    let prefix = fx.path("maps/ground");
    fs::create_dir_all(fx.path("maps")).unwrap();
    let ground = fx.data.join("ground/pair000000.png");
    ok(&["attn", "--image", s(&ground), "--view", "ground", "--prefix", s(&prefix), "--config", s(&fx.config)]);
    let mut names: Vec<String> = fs::read_dir(fx.path("maps"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["ground_k0.pgm", "ground_k1.pgm", "ground_k2.pgm", "ground_k3.pgm"]);
    let bytes = fs::read(fx.path("maps/ground_k0.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5\n4 2\n255\n"));

    let aerial = fx.data.join("aerial/pair000000.png");
    let prefix = fx.path("aerial");
    ok(&["attn", "--image", s(&aerial), "--view", "aerial", "--prefix", s(&prefix), "--config", s(&fx.config)]);
    assert!(fx.path("aerial_k3.pgm").exists());
}

#[test]
fn bench_reports_params_and_throughput() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("micro.cfg");
    fs::write(&cfg_path, MICRO).unwrap();
    let out = ok(&["bench", "--config", s(&cfg_path), "--iterations", "100"]);
    let get = |key: &str| -> f64 {
        out.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("{key} missing in {out}"))
            .parse()
            .unwrap()
    };
    let cfg = RunConfig::parse(MICRO).unwrap();
    assert_eq!(get("params") as usize, cfg.model.param_count());
    assert_eq!(get("iterations"), 100.0);
    assert_eq!(get("warmup"), 10.0);
    assert!(get("images_per_second") > 0.0 && get("seconds") > 0.0);

    let desk = ok(&["bench", "--iterations", "1"]);
    assert!(desk.contains(&format!("params={}\n", ModelConfig::default().param_count())));
}
