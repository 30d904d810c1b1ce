//! Writes a small synthetic dataset to disk, reads it back and draws a few
//! training tuples from it.
//!
//! cargo run --example synth_dataset -- [dir]

use siamabc::sampling::dataset::{load_dataset, write_dataset};
use siamabc::sampling::synth::{synth_dataset, Corruption, Schedule, SynthSpec};
use siamabc::sampling::{AugmentParams, TupleSampler, DEFAULT_DELTA};

fn main() -> siamabc::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "synth_data".into());
    let spec = SynthSpec {
        length: 40,
        corruption: Corruption::Noise { std: 0.05 },
        schedule: Schedule::Ramp,
        ..Default::default()
    };
    let records = synth_dataset(&spec, 4, 42)?;
    write_dataset(dir.as_ref(), &records)?;
    let back = load_dataset(dir.as_ref())?;
    for r in &back {
        let (first, last) = (r.boxes[0], r.boxes[r.len() - 1]);
        println!(
            "{}: {} frames, box {:?} -> {:?}",
            r.name,
            r.len(),
            first.to_xywh().map(|v| v.round()),
            last.to_xywh().map(|v| v.round())
        );
    }
    let mut sampler = TupleSampler::new(DEFAULT_DELTA, AugmentParams::default(), 0);
    for t in sampler.batch(&back, 3)? {
        let i = t.indices;
        println!(
            "tuple (i, k, j) = ({}, {}, {}), target box in search crop {:?}",
            i.i,
            i.k,
            i.j,
            t.gt.to_xywh().map(|v| v.round())
        );
    }
    println!("dataset written to {dir}");
    Ok(())
}
