//! Encodes the template and search crops of a synthetic frame and prints
//! the feature shapes and parameter counts.
//!
//! cargo run --example backbone_features

use siamabc::backbone::{backbone_forward, backbone_raw_forward};
use siamabc::model::{ModelConfig, SiamAbc};
use siamabc::sampling::crop_region;
use siamabc::sampling::synth::{synth_dataset, SynthSpec};
use siamabc::types::{SEARCH_SIZE, TEMPLATE_SIZE};

fn main() -> siamabc::Result<()> {
    let rec = synth_dataset(
        &SynthSpec {
            length: 2,
            ..Default::default()
        },
        1,
        0,
    )?
    .remove(0);
    let model = SiamAbc::new(ModelConfig::default(), 0)?;
    let cfg = &model.config.backbone;
    let (frame, b) = (&rec.frames[0], rec.boxes[0]);
    for (name, offset, size) in [("template", 0.2, TEMPLATE_SIZE), ("search", 2.0, SEARCH_SIZE)] {
        let patch = crop_region(frame, &b, offset, size)?;
        let raw = backbone_raw_forward(&model.weights, cfg, &patch)?;
        let f = backbone_forward(&model.weights, cfg, &patch)?;
        println!(
            "{name:<8} {size}x{size} -> raw {:?}, adapted {:?} (stride {})",
            raw.data.dim(),
            f.data.dim(),
            f.stride
        );
    }
    println!("backbone parameters: {}", cfg.param_count());
    println!("whole network parameters: {}", model.param_count());
    Ok(())
}
