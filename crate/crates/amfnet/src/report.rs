//! Text and JSON renderings of evaluation and ablation results.

use std::fmt::Write as _;

use amfnet_core::metrics::{MetricsReport, CLASS_NAMES};
use amfnet_core::train::EpochRecord;
use serde::Serialize;
use serde_json::{json, Value};

/// Column headers in report order.
pub fn column_names() -> Vec<String> {
    let mut names = Vec::new();
    for class in CLASS_NAMES {
        for m in ["Acc", "IoU", "F1"] {
            names.push(format!("{class} {m}"));
        }
    }
    names.extend(["mAcc", "mIoU", "mF1"].map(String::from));
    names
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Two header rows (class, metric) and one row per `(name, report)`, all
/// values in percent.
pub fn metrics_table(rows: &[(String, MetricsReport)]) -> String {
    let name_width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = write!(s, "{:name_width$}", "");
    for class in CLASS_NAMES {
        let _ = write!(s, " | {class:^23}");
    }
    let _ = writeln!(s, " | {:^23}", "mean");
    let _ = write!(s, "{:name_width$}", "model");
    for _ in 0..=CLASS_NAMES.len() {
        let _ = write!(s, " | {:>7}{:>8}{:>8}", "Acc", "IoU", "F1");
    }
    s.push('\n');
    for (name, report) in rows {
        let _ = write!(s, "{name:name_width$}");
        for group in report.columns().chunks(3) {
            let _ = write!(s, " | {:>7}{:>8}{:>8}", pct(group[0]), pct(group[1]), pct(group[2]));
        }
        s.push('\n');
    }
    s
}

/// Percentages keyed by column name, rounded to two decimals.
pub fn metrics_json(report: &MetricsReport) -> Value {
    let mut map = serde_json::Map::new();
    for (name, v) in column_names().into_iter().zip(report.columns()) {
        map.insert(name, json!((v * 10000.0).round() / 100.0));
    }
    Value::Object(map)
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "val_mAcc")]
    pub val_macc: f64,
    #[serde(rename = "val_mIoU")]
    pub val_miou: f64,
    #[serde(rename = "val_mF1")]
    pub val_mf1: f64,
}

impl From<&EpochRecord> for EpochLine {
    fn from(r: &EpochRecord) -> Self {
        EpochLine {
            epoch: r.epoch,
            lr: r.lr,
            train_loss: r.train_loss,
            val_macc: r.val.m_acc,
            val_miou: r.val.m_iou,
            val_mf1: r.val.m_f1,
        }
    }
}

/// One row of an ablation study.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: char,
    pub spec: String,
    pub params: usize,
    pub best_epoch: usize,
    pub report: MetricsReport,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<4}{:<8}{:>10}{:>6} | {:>7}{:>8}{:>8}", "row", "stages", "params", "best", "mAcc", "mIoU", "mF1");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<4}{:<8}{:>10}{:>6} | {:>7}{:>8}{:>8}",
            r.label,
            r.spec,
            r.params,
            r.best_epoch,
            pct(r.report.m_acc),
            pct(r.report.m_iou),
            pct(r.report.m_f1)
        );
    }
    s
}

pub fn ablation_json(rows: &[AblationRow]) -> Value {
    Value::Array(
        rows.iter()
            .map(|r| {
                json!({
                    "row": r.label.to_string(),
                    "stages": r.spec,
                    "params": r.params,
                    "best_epoch": r.best_epoch,
                    "metrics": metrics_json(&r.report),
                })
            })
            .collect(),
    )
}
