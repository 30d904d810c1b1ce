//! Plain-text artifacts: `key: value` metric reports, curve data and bench
//! tables. Every artifact starts with the effective configuration as `#`
//! comment lines.

use std::fmt::Write as _;

use crate::evaluation::{BenchReport, Metrics, OpeReport};

/// The configuration text as `# ` comment lines.
pub fn echo_header(config_echo: &str) -> String {
    let mut s = String::from("# effective configuration\n");
    for line in config_echo.lines() {
        let _ = writeln!(s, "# {line}");
    }
    s
}

fn metric_lines(s: &mut String, prefix: &str, m: &Metrics) {
    let _ = writeln!(s, "{prefix}auc: {}", m.auc);
    let _ = writeln!(s, "{prefix}op50: {}", m.op50);
    let _ = writeln!(s, "{prefix}op75: {}", m.op75);
    let _ = writeln!(s, "{prefix}precision: {}", m.precision);
    let _ = writeln!(s, "{prefix}norm_precision: {}", m.norm_precision);
    let _ = writeln!(s, "{prefix}mean_iou: {}", m.mean_iou);
    let _ = writeln!(s, "{prefix}frames: {}", m.frames);
}

pub fn format_metrics_report(report: &OpeReport, config_echo: &str) -> String {
    let mut s = echo_header(config_echo);
    let _ = writeln!(s, "sequences: {}", report.sequences.len());
    metric_lines(&mut s, "", &report.aggregate);
    for seq in &report.sequences {
        metric_lines(&mut s, &format!("{}.", seq.name), &seq.metrics);
        let _ = writeln!(s, "{}.updates: {}", seq.name, seq.result.update_frames.len());
    }
    s
}

/// Mean success curve, one `threshold,success` line per point.
pub fn format_curve(report: &OpeReport, config_echo: &str) -> String {
    let mut s = echo_header(config_echo);
    s.push_str("threshold,success\n");
    for (t, v) in report.mean_curve() {
        let _ = writeln!(s, "{t},{v}");
    }
    s
}

pub fn format_bench(reports: &[BenchReport], config_echo: &str) -> String {
    let mut s = echo_header(config_echo);
    s.push_str("block,channels,params,macs,median_ms,p95_ms,repeats\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{:.4},{}",
            r.block,
            r.channels,
            r.params,
            r.macs,
            r.median_ms,
            r.p95_ms,
            r.samples_ms.len()
        );
    }
    s
}

/// Reads `key: value` lines back, ignoring comments.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
