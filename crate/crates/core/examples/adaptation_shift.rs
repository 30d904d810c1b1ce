//! Trains a small network on clean synthetic sequences, then tracks
//! brightness-shifted copies with every test-time normalization mode.
//!
//! cargo run --example adaptation_shift -- [steps] [brightness]

use siamabc::adaptation::AdaptMode;
use siamabc::evaluation::ope_run;
use siamabc::model::SiamAbc;
use siamabc::sampling::synth::{synth_dataset, Corruption, SynthSpec};
use siamabc::tracker::{AdaptConfig, Tracker, TrackerConfig};
use siamabc::training::{train, TrainConfig};

fn main() -> siamabc::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps = args.first().and_then(|a| a.parse().ok()).unwrap_or(300);
    let delta = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0.4);

    let cfg = siamabc::config::AppConfig::from_toml(include_str!("../../../configs/desk.toml"))?;
    let clean = SynthSpec {
        length: 60,
        ..cfg.synth.spec.clone()
    };
    let train_set = synth_dataset(&clean, 12, 1)?;
    let tc = TrainConfig {
        steps,
        log_every: 50,
        ..cfg.train.clone()
    };
    let (model, _) = train(SiamAbc::new(cfg.model.clone(), 1)?, tc, &train_set, 1)?;

    let shifted = SynthSpec {
        corruption: Corruption::Brightness { delta },
        ..clean
    };
    let test_set = synth_dataset(&shifted, 8, 2)?;
    for mode in [
        AdaptMode::Off,
        AdaptMode::Dtta,
        AdaptMode::Momentum,
        AdaptMode::Dua,
        AdaptMode::Adabn,
    ] {
        let tcfg = TrackerConfig {
            adapt: AdaptConfig { mode, lambda_bn: 0.1 },
            ..cfg.tracker.clone()
        };
        let rep = ope_run(&Tracker::new(&model, tcfg)?, &test_set, 1)?;
        println!(
            "{mode:<9} auc {:.4} mean iou {:.4}",
            rep.aggregate.auc, rep.aggregate.mean_iou
        );
    }
    Ok(())
}
