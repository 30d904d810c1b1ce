//! Times the filtration blocks at several widths and one full tracking
//! step of the default network.
//!
//! cargo run --example bench_blocks -- [repeats]

use siamabc::evaluation::report::format_bench;
use siamabc::evaluation::{bench_block, BenchShape, Block};
use siamabc::model::ModelConfig;

fn main() -> siamabc::Result<()> {
    let repeats = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let model = ModelConfig::default();
    let mut reports = Vec::new();
    for c in [64, 128, 256] {
        let shape = BenchShape {
            channels: c,
            repeats,
            ..Default::default()
        };
        reports.push(bench_block(Block::Fmf, &shape, &model)?);
        reports.push(bench_block(Block::Psa, &shape, &model)?);
    }
    reports.push(bench_block(
        Block::Full,
        &BenchShape {
            repeats,
            ..Default::default()
        },
        &model,
    )?);
    print!("{}", format_bench(&reports, ""));
    Ok(())
}
