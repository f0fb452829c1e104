//! Text artifacts: training logs, ROC tables, AUC summaries and the ROC plot.

use std::fmt::Write as _;

use fusenet_core::clf3d::TrainLog;
use fusenet_core::evalkit::{EntryStatus, RocReport};
use fusenet_core::segnet::PretrainLogEntry;
use serde::Serialize;

use crate::error::{Error, Result};

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))
}

pub fn train_log_csv(log: &TrainLog) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &log.entries {
        w.serialize(e)?;
    }
    finish(w)
}

pub fn pretrain_log_csv(log: &[PretrainLogEntry]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "step", "loss"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.step.to_string(), e.loss.to_string()])?;
    }
    finish(w)
}

/// One row per ROC point: `class, fpr, tpr, threshold`.
pub fn roc_csv(report: &RocReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "fpr", "tpr", "threshold"])?;
    for e in &report.entries {
        for p in &e.points {
            w.write_record([e.class.name().to_string(), p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
        }
    }
    finish(w)
}

/// ROC points of a single class.
pub fn roc_class_csv(report: &RocReport, class: &str) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fpr", "tpr", "threshold"])?;
    for e in report.entries.iter().filter(|e| e.class.name() == class) {
        for p in &e.points {
            w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
        }
    }
    finish(w)
}

#[derive(Debug, Serialize)]
pub struct AucSummaryEntry {
    pub class: &'static str,
    pub status: EntryStatus,
    pub positives: usize,
    pub negatives: usize,
    pub auc: Option<f64>,
}

pub fn auc_summary(report: &RocReport) -> Vec<AucSummaryEntry> {
    report
        .entries
        .iter()
        .map(|e| AucSummaryEntry { class: e.class.name(), status: e.status, positives: e.positives, negatives: e.negatives, auc: e.auc })
        .collect()
}

pub fn auc_summary_json(report: &RocReport) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(&auc_summary(report))?)
}

const COLOURS: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#111111"];

/// Static plot of every curve on the unit square with an AUC legend.
pub fn roc_svg(report: &RocReport) -> String {
    let (left, top, size) = (60.0, 20.0, 400.0);
    let x = |f: f64| left + f * size;
    let y = |t: f64| top + (1.0 - t) * size;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="700" height="480" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{size}" height="{size}" fill="none" stroke="#000"/>"##);
    let _ = writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#, x(v), top + size + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">false positive rate</text>"#, x(0.5), top + size + 34.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">true positive rate</text>"#,
        y(0.5)
    );
    for (i, e) in report.entries.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        if !e.points.is_empty() {
            let pts: Vec<String> = e.points.iter().map(|p| format!("{:.2},{:.2}", x(p.fpr), y(p.tpr))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        }
        let label = match e.auc {
            Some(a) => format!("{} (AUC {a:.3})", e.class.name()),
            None => format!("{} (AUC n/a)", e.class.name()),
        };
        let ly = top + 20.0 + 20.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="480" y1="{ly:.1}" x2="500" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/>"#);
        let _ = writeln!(s, r#"<text x="506" y="{:.1}">{label}</text>"#, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}
