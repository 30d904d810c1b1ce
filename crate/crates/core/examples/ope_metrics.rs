//! Scores perturbed copies of the ground truth with the one-pass
//! evaluation metrics and prints the success curve.
//!
//! cargo run --example ope_metrics

use siamabc::evaluation::{compute_metrics, iou, success_curve};
use siamabc::sampling::synth::{synth_dataset, SynthSpec};
use siamabc::types::BBox;

fn main() -> siamabc::Result<()> {
    let rec = synth_dataset(
        &SynthSpec {
            length: 50,
            ..Default::default()
        },
        1,
        5,
    )?
    .remove(0);
    for shift in [0.0, 4.0, 8.0, 16.0, 32.0] {
        let pred: Vec<BBox> = rec
            .boxes
            .iter()
            .map(|b| BBox::new(b.x_min + shift, b.y_min, b.x_max + shift, b.y_max))
            .collect();
        let m = compute_metrics(&pred, &rec.boxes)?;
        println!(
            "shift {shift:>4} px: auc {:.3} op50 {:.3} op75 {:.3} precision {:.3} norm precision {:.3}",
            m.auc, m.op50, m.op75, m.precision, m.norm_precision
        );
        if shift == 8.0 {
            let ious: Vec<f64> = pred.iter().zip(&rec.boxes).map(|(p, g)| iou(p, g)).collect();
            let curve: Vec<String> = success_curve(&ious)
                .iter()
                .map(|(t, s)| format!("{t:.2}:{s:.2}"))
                .collect();
            println!("  curve {}", curve.join(" "));
        }
    }
    Ok(())
}
