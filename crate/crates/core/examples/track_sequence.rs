//! Tracks one synthetic sequence and prints every box with its score and
//! the frames where the dynamic template was refreshed.
//!
//! cargo run --example track_sequence -- [checkpoint]

use siamabc::checkpoint::load_checkpoint;
use siamabc::evaluation::compute_metrics;
use siamabc::model::{ModelConfig, SiamAbc};
use siamabc::sampling::synth::{synth_dataset, SynthSpec};
use siamabc::tracker::{Tracker, TrackerConfig, UpdatePolicy};

fn main() -> siamabc::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(p.as_ref())?.0,
        None => SiamAbc::new(ModelConfig::default(), 0)?,
    };
    let rec = synth_dataset(
        &SynthSpec {
            length: 60,
            ..Default::default()
        },
        1,
        3,
    )?
    .remove(0);
    let cfg = TrackerConfig {
        update: UpdatePolicy {
            interval: 10,
            lambda_d: 0.25,
        },
        ..Default::default()
    };
    let tracker = Tracker::new(&model, cfg)?;
    let res = tracker.run(&rec)?;
    for (t, (b, s)) in res.boxes.iter().zip(&res.scores).enumerate() {
        let [x, y, w, h] = b.to_xywh();
        println!("{t:>3} {x:7.1} {y:7.1} {w:6.1} {h:6.1}  score {s:.3}");
    }
    println!("dynamic updates at frames {:?}", res.update_frames);
    let m = compute_metrics(&res.boxes, &rec.boxes)?;
    println!(
        "auc {:.4} mean iou {:.4} precision {:.4}",
        m.auc, m.mean_iou, m.precision
    );
    Ok(())
}
