//! Subcommand implementations behind the `siamabc` binary. Each command
//! reads the effective configuration and writes its artifacts under
//! `config.out`; every artifact carries the configuration echo.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::evaluation::bench::{bench_block, BenchReport, Block};
use crate::evaluation::report::{echo_header, format_bench, format_curve, format_metrics_report};
use crate::evaluation::{ope_run, OpeReport, OracleTracker, SequenceTracker};
use crate::model::SiamAbc;
use crate::sampling::dataset::{load_dataset, parse_boxes, write_dataset};
use crate::sampling::synth::synth_dataset;
use crate::sampling::SequenceRecord;
use crate::tracker::{format_results, SequenceResult, Tracker};
use crate::training::{format_loss_log, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::InputSize { .. } | Error::InvalidBox(_) => {
            EXIT_DATA
        }
        Error::Numeric(_) | Error::Shape(_) | Error::State(_) => EXIT_NUMERIC,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Train,
    Track,
    Eval {
        /// Score stored result files instead of running the tracker.
        results: Option<PathBuf>,
        /// Replay the ground truth instead of running the tracker.
        oracle: bool,
    },
    Bench,
    Synth,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one command and returns a short human-readable summary.
pub fn run(cmd: &Command, config: &AppConfig) -> Result<String> {
    config.validate()?;
    match cmd {
        Command::Synth => cmd_synth(config),
        Command::Train => cmd_train(config),
        Command::Track => cmd_track(config),
        Command::Eval { results, oracle } => cmd_eval(config, results.as_deref(), *oracle),
        Command::Bench => cmd_bench(config),
    }
}

fn cmd_synth(config: &AppConfig) -> Result<String> {
    let records = synth_dataset(&config.synth.spec, config.synth.count, config.seed)?;
    write_dataset(&config.out, &records)?;
    write(&config.out.join("synth.toml"), &echo_header(&config.echo()?))?;
    Ok(format!("wrote {} sequences to {}", records.len(), config.out.display()))
}

fn cmd_train(config: &AppConfig) -> Result<String> {
    let records = load_dataset(&config.dataset)?;
    let model = SiamAbc::new(config.model.clone(), config.seed)?;
    let (model, log) = train(model, config.train.clone(), &records, config.seed)?;
    let echo = config.echo()?;
    save_checkpoint_to(&config.checkpoint, &model, &echo)?;
    write(
        &config.out.join("loss.csv"),
        &format!("{}{}", echo_header(&echo), format_loss_log(&log)),
    )?;
    let last = log.last().map_or(f64::NAN, |s| s.loss);
    Ok(format!(
        "trained {} steps on {} sequences, final loss {last:.4}; checkpoint {}",
        log.len(),
        records.len(),
        config.checkpoint.display()
    ))
}

fn save_checkpoint_to(path: &Path, model: &SiamAbc, echo: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(path, model, echo)
}

/// Loads the checkpoint and adopts its architecture into the config.
fn load_model(config: &AppConfig) -> Result<(SiamAbc, AppConfig)> {
    let (model, header) = load_checkpoint(&config.checkpoint)?;
    let mut cfg = config.clone();
    if cfg.model != header.model {
        log::warn!("using the architecture stored in {}", config.checkpoint.display());
        cfg.model = header.model;
    }
    Ok((model, cfg))
}

fn write_results(dir: &Path, report: &OpeReport, echo: &str, with_scores: bool) -> Result<()> {
    for s in &report.sequences {
        let text = format!("{}{}", echo_header(echo), format_results(&s.result, with_scores));
        write(&dir.join(format!("{}.txt", s.name)), &text)?;
    }
    Ok(())
}

fn track_all(config: &AppConfig, records: &[SequenceRecord]) -> Result<(OpeReport, String)> {
    let (model, cfg) = load_model(config)?;
    let tracker = Tracker::new(&model, cfg.tracker.clone())?;
    let report = ope_run(&tracker, records, cfg.jobs)?;
    Ok((report, cfg.echo()?))
}

fn cmd_track(config: &AppConfig) -> Result<String> {
    let records = load_dataset(&config.dataset)?;
    let (report, echo) = track_all(config, &records)?;
    write_results(&config.out.join("results"), &report, &echo, config.eval.with_scores)?;
    Ok(format!(
        "tracked {} sequences into {}",
        report.sequences.len(),
        config.out.join("results").display()
    ))
}

/// Replays result files from `dir`, one `<sequence>.txt` per sequence.
struct StoredResults {
    dir: PathBuf,
}

impl SequenceTracker for StoredResults {
    fn run_sequence(&self, record: &SequenceRecord) -> Result<SequenceResult> {
        let path = self.dir.join(format!("{}.txt", record.name));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let boxes = parse_boxes(&text, &path)?;
        Ok(SequenceResult {
            name: record.name.clone(),
            scores: vec![1.0; boxes.len()],
            boxes,
            update_frames: Vec::new(),
        })
    }
}

fn cmd_eval(config: &AppConfig, results: Option<&Path>, oracle: bool) -> Result<String> {
    let records = load_dataset(&config.dataset)?;
    let (report, echo) = match (results, oracle) {
        (Some(_), true) => return Err(Error::Config("--results and --oracle are exclusive".into())),
        (Some(dir), false) => (
            ope_run(&StoredResults { dir: dir.to_path_buf() }, &records, config.jobs)?,
            config.echo()?,
        ),
        (None, true) => (ope_run(&OracleTracker, &records, config.jobs)?, config.echo()?),
        (None, false) => {
            let (report, echo) = track_all(config, &records)?;
            write_results(&config.out.join("results"), &report, &echo, config.eval.with_scores)?;
            (report, echo)
        }
    };
    write(&config.out.join("report.txt"), &format_metrics_report(&report, &echo))?;
    write(&config.out.join("curve.csv"), &format_curve(&report, &echo))?;
    let a = report.aggregate;
    Ok(format!(
        "auc {:.4} op50 {:.4} op75 {:.4} precision {:.4} norm_precision {:.4} over {} sequences",
        a.auc,
        a.op50,
        a.op75,
        a.precision,
        a.norm_precision,
        report.sequences.len()
    ))
}

fn cmd_bench(config: &AppConfig) -> Result<String> {
    let b = &config.bench;
    let mut reports: Vec<BenchReport> = Vec::new();
    for &block in &b.blocks {
        match block {
            Block::Full => reports.push(bench_block(block, &b.shape, &config.model)?),
            Block::Fmf | Block::Psa => {
                for &w in &b.widths {
                    let shape = crate::evaluation::bench::BenchShape {
                        channels: w,
                        ..b.shape.clone()
                    };
                    reports.push(bench_block(block, &shape, &config.model)?);
                }
            }
        }
    }
    let echo = config.echo()?;
    // counts are deterministic; timings go to a separate file
    let mut counts = echo_header(&echo);
    counts.push_str("block,channels,params,macs\n");
    for r in &reports {
        counts.push_str(&format!("{},{},{},{}\n", r.block, r.channels, r.params, r.macs));
    }
    write(&config.out.join("bench.csv"), &counts)?;
    write(&config.out.join("latency.csv"), &format_bench(&reports, &echo))?;
    let mut s = String::from("block  channels  params  macs  median_ms\n");
    for r in &reports {
        s.push_str(&format!(
            "{:<6} {:>8} {:>7} {:>11} {:>9.3}\n",
            r.block, r.channels, r.params, r.macs, r.median_ms
        ));
    }
    Ok(s.trim_end().to_string())
}
