//! Trains a small network on synthetic sequences and evaluates it on the
//! same sequences.
//!
//! cargo run --example overfit_synthetic -- [steps] [sequences]

use std::time::Instant;

use siamabc::backbone::BackboneConfig;
use siamabc::evaluation::ope_run;
use siamabc::heads::HeadConfig;
use siamabc::model::{ModelConfig, SiamAbc};
use siamabc::sampling::synth::{synth_dataset, SynthSpec};
use siamabc::tracker::{Tracker, TrackerConfig};
use siamabc::training::{train, TrainConfig};

fn main() -> siamabc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(600);
    let count = args.get(1).copied().unwrap_or(20);

    let spec = SynthSpec {
        length: 100,
        ..Default::default()
    };
    let records = synth_dataset(&spec, count, 7)?;
    let model_cfg = ModelConfig {
        backbone: BackboneConfig {
            widths: vec![8, 16, 32, 48],
            channels: 64,
            stage_depth: 1,
        },
        heads: HeadConfig {
            channels: 64,
            ..Default::default()
        },
        ..Default::default()
    };
    let cfg = TrainConfig {
        steps,
        log_every: 25,
        ..TrainConfig::desk()
    };
    let t0 = Instant::now();
    let (model, log) = train(SiamAbc::new(model_cfg, 1)?, cfg, &records, 1)?;
    println!(
        "trained {} steps in {:.1}s, final loss {:.4}",
        log.len(),
        t0.elapsed().as_secs_f64(),
        log.last().map_or(f64::NAN, |s| s.loss)
    );

    let t1 = Instant::now();
    let tracker = Tracker::new(&model, TrackerConfig::default())?;
    let rep = ope_run(&tracker, &records, 1)?;
    println!(
        "ope in {:.1}s: auc {:.4} mean iou {:.4} precision {:.4}",
        t1.elapsed().as_secs_f64(),
        rep.aggregate.auc,
        rep.aggregate.mean_iou,
        rep.aggregate.precision
    );
    Ok(())
}
