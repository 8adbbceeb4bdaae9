//! Train the desk-scale model on in-memory synthetic pairs and report
//! validation recall as training progresses.
//!
//! cargo run --release -p transgcnn-core --example desk_experiment -- [epochs] [eval_every]

use std::time::Instant;

use transgcnn_core::dataset::TrainPair;
use transgcnn_core::retrieval::evaluate_pairs;
use transgcnn_core::scenes::{gen_pair, SceneSpec};
use transgcnn_core::train::{TrainConfig, Trainer};
use transgcnn_core::{ModelConfig, Result, SiameseModel};

fn pairs(spec: &SceneSpec, range: std::ops::Range<u64>, cfg: &ModelConfig) -> Result<Vec<TrainPair<f32>>> {
    let polar = spec.polar()?;
    range
        .map(|i| {
            let p = gen_pair(spec, i)?;
            let warped = transgcnn_core::polar::polar_transform(&p.aerial, &polar)?;
            TrainPair::from_images(p.id, &p.ground, &warped, cfg.input_h, cfg.input_w)
        })
        .collect()
}

fn main() -> Result<()> {
    let args: Vec<u32> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let epochs = args.first().copied().unwrap_or(40);
    let every = args.get(1).copied().unwrap_or(5);
    let spec = SceneSpec::with_noise(42, 0.05);
    let cfg = ModelConfig::default();
    let train = pairs(&spec, 0..200, &cfg)?;
    let val = pairs(&spec, 200..328, &cfg)?;
    let model = SiameseModel::<f32>::seeded(&cfg, 42)?;
    println!("params={}", model.param_count());
    let tc = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, tc)?;
    let start = Instant::now();
    trainer.fit(&train, |t, loss, _| {
        print!("epoch {} loss {loss:.4} t={:.0}s", t.epoch(), start.elapsed().as_secs_f64());
        if t.epoch() % every == 0 {
            let r = evaluate_pairs(t.model(), &val, 1)?;
            print!(" val r1={:.3} r5={:.3}", r.r1, r.r5);
        }
        println!();
        Ok(())
    })?;
    Ok(())
}
