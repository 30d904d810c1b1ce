mod common;

use proptest::prelude::*;
use siamabc::evaluation::bench::percentile;
use siamabc::evaluation::report::{format_bench, format_metrics_report, parse_report};
use siamabc::evaluation::{
    bench_block, compute_metrics, iou, ope_run, success_curve, BenchShape, Block, Metrics, OracleTracker,
};
use siamabc::model::SiamAbc;
use siamabc::sampling::synth::{synth_dataset, SynthSpec};
use siamabc::tracker::{Tracker, TrackerConfig};
use siamabc::types::BBox;

use common::*;

fn shifted(b: &BBox, dx: f64) -> BBox {
    BBox::new(b.x_min + dx, b.y_min, b.x_max + dx, b.y_max)
}

#[test]
fn metrics_on_known_offsets() {
    let gt = vec![BBox::from_xywh(0.0, 0.0, 10.0, 10.0); 4];
    // overlaps 1, 1/3, 0 and 0: centers 0, 5, 30 and 50 px away
    let pred = vec![
        gt[0],
        shifted(&gt[0], 5.0),
        shifted(&gt[0], 30.0),
        shifted(&gt[0], 50.0),
    ];
    let m = compute_metrics(&pred, &gt).unwrap();
    let ious = [1.0, 1.0 / 3.0, 0.0, 0.0];
    assert!((m.auc - auc_oracle(&ious)).abs() < 1e-15);
    assert_eq!(m.op50, 0.25);
    assert_eq!(m.op75, 0.25);
    assert_eq!(m.precision, 0.5);
    assert_eq!(m.norm_precision, 0.25);
    assert!((m.mean_iou - (4.0 / 3.0) / 4.0).abs() < 1e-15);
    assert_eq!(m.frames, 4);
    assert!(compute_metrics(&pred[..2], &gt).is_err());
}

#[test]
fn zero_overlap_never_succeeds() {
    let c = success_curve(&[0.0, 0.0]);
    assert_eq!(c.len(), 21);
    assert!(c.iter().all(|p| p.1 == 0.0));
    let c = success_curve(&[0.6]);
    assert_eq!(c.iter().filter(|p| p.1 == 1.0).count(), 13);
}

#[test]
fn metrics_mean_sums_frames() {
    let a = Metrics {
        auc: 0.2,
        frames: 3,
        ..Default::default()
    };
    let b = Metrics {
        auc: 0.6,
        frames: 5,
        ..Default::default()
    };
    let m = Metrics::mean(&[a, b]);
    assert!((m.auc - 0.4).abs() < 1e-15);
    assert_eq!(m.frames, 8);
    assert_eq!(Metrics::mean(&[]), Metrics::default());
}

#[test]
fn ope_does_not_depend_on_jobs() {
    let recs = synth_dataset(
        &SynthSpec {
            length: 8,
            ..Default::default()
        },
        3,
        13,
    )
    .unwrap();
    let model = SiamAbc::new(tiny_config(), 3).unwrap();
    let tracker = Tracker::new(&model, TrackerConfig::default()).unwrap();
    let one = ope_run(&tracker, &recs, 1).unwrap();
    assert_eq!(one, ope_run(&tracker, &recs, 2).unwrap());
    assert_eq!(one, ope_run(&tracker, &recs, 8).unwrap());
    assert!(ope_run(&tracker, &[], 1).is_err());
    let oracle = ope_run(&OracleTracker, &recs, 2).unwrap();
    assert_eq!(oracle.aggregate.auc, 1.0);
    assert_eq!(oracle.aggregate.frames, 24);
}

#[test]
fn reports_carry_the_config_and_parse_back() {
    let recs = synth_dataset(
        &SynthSpec {
            length: 5,
            ..Default::default()
        },
        2,
        1,
    )
    .unwrap();
    let rep = ope_run(&OracleTracker, &recs, 1).unwrap();
    let text = format_metrics_report(&rep, "seed = 9\n[model]\nsqueeze = 2");
    assert!(text.contains("# seed = 9\n# [model]\n# squeeze = 2\n"));
    let kv = parse_report(&text);
    let get = |k: &str| kv.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone());
    assert_eq!(get("sequences").as_deref(), Some("2"));
    assert_eq!(get("seq000.auc").as_deref(), Some("1"));
    assert_eq!(get("frames").as_deref(), Some("10"));
}

#[test]
fn bench_reports_counts_and_timings() {
    let shape = BenchShape {
        channels: 16,
        warmup: 1,
        repeats: 3,
        ..Default::default()
    };
    let model = tiny_config();
    let fmf = bench_block(Block::Fmf, &shape, &model).unwrap();
    let psa = bench_block(Block::Psa, &shape, &model).unwrap();
    assert_eq!(fmf.samples_ms.len(), 3);
    assert!(fmf.median_ms >= 0.0 && fmf.p95_ms >= fmf.median_ms);
    assert!(fmf.params < psa.params);
    assert!(fmf.macs < psa.macs);
    let full = bench_block(Block::Full, &shape, &model).unwrap();
    assert_eq!(full.params, SiamAbc::new(model.clone(), 0).unwrap().param_count());
    let text = format_bench(&[fmf, psa, full], "");
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 4);
    assert!("conv".parse::<Block>().is_err());
}

#[test]
fn percentile_is_nearest_rank() {
    let v = [5.0, 1.0, 4.0, 2.0, 3.0];
    assert_eq!(percentile(&v, 0.5), 3.0);
    assert_eq!(percentile(&v, 0.95), 5.0);
    assert_eq!(percentile(&v, 0.0), 1.0);
    assert!(percentile(&[], 0.5).is_nan());
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f64..60.0, 0.0f64..60.0, 1.0f64..30.0, 1.0f64..30.0).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

proptest! {
    #[test]
    fn auc_matches_enumeration(pairs in prop::collection::vec((arb_box(), arb_box()), 1..30)) {
        let (pred, gt): (Vec<BBox>, Vec<BBox>) = pairs.into_iter().unzip();
        let ious: Vec<f64> = pred.iter().zip(&gt).map(|(p, g)| iou(p, g)).collect();
        let m = compute_metrics(&pred, &gt).unwrap();
        prop_assert!((m.auc - auc_oracle(&ious)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.auc));
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }
}
