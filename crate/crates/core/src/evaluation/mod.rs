//! Tracking metrics, one-pass evaluation and block benchmarks.

pub mod bench;
pub mod ope;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::BBox;

pub use bench::{bench_block, BenchReport, BenchShape, Block};
pub use ope::{ope_run, ope_run_dir, OpeReport, OracleTracker, SequenceReport, SequenceTracker};

/// Number of IoU thresholds in the success curve, `0, 0.05, ..., 1`.
pub const SUCCESS_POINTS: usize = 21;
/// Center-error threshold for precision, in pixels.
pub const PRECISION_PIXELS: f64 = 20.0;
/// Normalized center-error threshold, as a fraction of `sqrt(w * h)`.
pub const NORM_PRECISION_THRESHOLD: f64 = 0.2;

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area().max(0.0) + b.area().max(0.0) - inter;
    if union > 0.0 && inter.is_finite() {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn success_thresholds() -> [f64; SUCCESS_POINTS] {
    std::array::from_fn(|k| k as f64 / (SUCCESS_POINTS - 1) as f64)
}

/// A frame succeeds at threshold `tau` when its overlap is positive and at
/// least `tau`; a frame with no overlap never counts, even at `tau = 0`.
fn succeeds(iou: f64, tau: f64) -> bool {
    iou > 0.0 && iou >= tau
}

/// Success rate at each of the 21 thresholds.
pub fn success_curve(ious: &[f64]) -> Vec<(f64, f64)> {
    let n = ious.len().max(1) as f64;
    success_thresholds()
        .iter()
        .map(|&t| (t, ious.iter().filter(|&&v| succeeds(v, t)).count() as f64 / n))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub op50: f64,
    pub op75: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub mean_iou: f64,
    pub frames: usize,
}

impl Metrics {
    /// Field-wise mean; `frames` is summed.
    pub fn mean(items: &[Metrics]) -> Metrics {
        if items.is_empty() {
            return Metrics::default();
        }
        let n = items.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            auc: avg(|m| m.auc),
            op50: avg(|m| m.op50),
            op75: avg(|m| m.op75),
            precision: avg(|m| m.precision),
            norm_precision: avg(|m| m.norm_precision),
            mean_iou: avg(|m| m.mean_iou),
            frames: items.iter().map(|m| m.frames).sum(),
        }
    }
}

fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let e = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

pub fn compute_metrics(pred: &[BBox], gt: &[BBox]) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::Data(format!(
            "{} predicted boxes for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let curve = success_curve(&ious);
    let n = pred.len().max(1) as f64;
    let mut precise = 0usize;
    let mut norm_precise = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let e = center_error(p, g);
        if e <= PRECISION_PIXELS {
            precise += 1;
        }
        let scale = g.area().max(0.0).sqrt();
        if scale > 0.0 && e / scale <= NORM_PRECISION_THRESHOLD {
            norm_precise += 1;
        }
    }
    Ok(Metrics {
        auc: curve.iter().map(|c| c.1).sum::<f64>() / SUCCESS_POINTS as f64,
        op50: curve[10].1,
        op75: curve[15].1,
        precision: precise as f64 / n,
        norm_precision: norm_precise as f64 / n,
        mean_iou: ious.iter().sum::<f64>() / n,
        frames: pred.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_values() {
        let a = BBox::new(0., 0., 2., 2.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5., 5., 6., 6.)), 0.0);
        assert!((iou(&a, &BBox::new(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-15);
        let z = BBox::new(1., 1., 1., 1.);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn iou_symmetry_and_scale() {
        let a = BBox::new(0.3, 1.0, 4.0, 7.5);
        let b = BBox::new(2.0, -1.0, 5.5, 3.0);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        assert!((iou(&a, &b) - iou(&a.scaled(3.7), &b.scaled(3.7))).abs() < 1e-12);
    }

    #[test]
    fn constant_overlap_curve() {
        let gt = vec![BBox::new(0., 0., 10., 10.); 7];
        let pred = vec![BBox::new(0., 0., 10., 6.); 7];
        let m = compute_metrics(&pred, &gt).unwrap();
        assert!((m.auc - 13.0 / 21.0).abs() < 1e-12);
        assert_eq!(m.op50, 1.0);
        assert_eq!(m.op75, 0.0);
    }

    #[test]
    fn zero_overlap_scores_zero() {
        let gt = vec![BBox::new(0., 0., 10., 10.); 3];
        let pred = vec![BBox::new(50., 50., 60., 60.); 3];
        let m = compute_metrics(&pred, &gt).unwrap();
        assert_eq!(m.auc, 0.0);
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn perfect_stream() {
        let gt: Vec<BBox> = (0..5).map(|i| BBox::from_xywh(i as f64, 2.0, 10.0, 12.0)).collect();
        let m = compute_metrics(&gt, &gt).unwrap();
        assert_eq!(
            (m.auc, m.op50, m.op75, m.precision, m.norm_precision),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        assert!(compute_metrics(&gt[..2], &gt).is_err());
    }
}
