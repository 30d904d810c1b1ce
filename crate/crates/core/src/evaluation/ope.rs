//! One-pass evaluation: each sequence is tracked once from its first
//! ground-truth box, without re-initialization.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, iou, success_curve, Metrics};
use crate::sampling::dataset::load_dataset;
use crate::sampling::SequenceRecord;
use crate::tracker::{SequenceResult, Tracker};

/// Anything that can run a whole sequence.
pub trait SequenceTracker: Sync {
    fn run_sequence(&self, record: &SequenceRecord) -> Result<SequenceResult>;
}

impl SequenceTracker for Tracker<'_> {
    fn run_sequence(&self, record: &SequenceRecord) -> Result<SequenceResult> {
        self.run(record)
    }
}

/// Replays the ground truth; useful to check the harness itself.
pub struct OracleTracker;

impl SequenceTracker for OracleTracker {
    fn run_sequence(&self, record: &SequenceRecord) -> Result<SequenceResult> {
        Ok(SequenceResult {
            name: record.name.clone(),
            boxes: record.boxes.clone(),
            scores: vec![1.0; record.len()],
            update_frames: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceReport {
    pub name: String,
    pub metrics: Metrics,
    /// `(threshold, success rate)` points.
    pub curve: Vec<(f64, f64)>,
    #[serde(skip)]
    pub result: SequenceResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpeReport {
    pub sequences: Vec<SequenceReport>,
    /// Mean over sequences.
    pub aggregate: Metrics,
}

impl OpeReport {
    /// Success curve averaged over sequences.
    pub fn mean_curve(&self) -> Vec<(f64, f64)> {
        let n = self.sequences.len().max(1) as f64;
        let mut out: Vec<(f64, f64)> = super::success_thresholds().iter().map(|&t| (t, 0.0)).collect();
        for s in &self.sequences {
            for (o, c) in out.iter_mut().zip(&s.curve) {
                o.1 += c.1 / n;
            }
        }
        out
    }
}

fn evaluate<T: SequenceTracker + ?Sized>(tracker: &T, record: &SequenceRecord) -> Result<SequenceReport> {
    let result = tracker.run_sequence(record)?;
    let metrics = compute_metrics(&result.boxes, &record.boxes)?;
    let ious: Vec<f64> = result.boxes.iter().zip(&record.boxes).map(|(p, g)| iou(p, g)).collect();
    Ok(SequenceReport {
        name: record.name.clone(),
        metrics,
        curve: success_curve(&ious),
        result,
    })
}

/// Runs every sequence, `jobs` at a time. Output order follows `records`,
/// so the report does not depend on `jobs`.
pub fn ope_run<T: SequenceTracker + ?Sized>(tracker: &T, records: &[SequenceRecord], jobs: usize) -> Result<OpeReport> {
    if records.is_empty() {
        return Err(Error::Data("no sequences to evaluate".into()));
    }
    let jobs = jobs.clamp(1, records.len());
    let sequences: Vec<SequenceReport> = if jobs == 1 {
        records.iter().map(|r| evaluate(tracker, r)).collect::<Result<_>>()?
    } else {
        let chunk = records.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = records
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|r| evaluate(tracker, r)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(records.len());
            for h in handles {
                out.extend(
                    h.join()
                        .map_err(|_| Error::Numeric("evaluation worker panicked".into()))??,
                );
            }
            Ok::<_, Error>(out)
        })?
    };
    let aggregate = Metrics::mean(&sequences.iter().map(|s| s.metrics).collect::<Vec<_>>());
    Ok(OpeReport { sequences, aggregate })
}

/// Loads a dataset directory (skipping broken sequences) and evaluates it.
pub fn ope_run_dir<T: SequenceTracker + ?Sized>(tracker: &T, dir: &Path, jobs: usize) -> Result<OpeReport> {
    let records = load_dataset(dir)?;
    ope_run(tracker, &records, jobs)
}
