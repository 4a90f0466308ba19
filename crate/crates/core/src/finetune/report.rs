use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::metrics::Metrics;
use super::train::FinetuneEpoch;
use crate::data::{Group, ScanRecord, N_CLASSES};
use crate::error::{IoContext, Result};

pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const HISTOGRAM_FILE: &str = "score_histogram.csv";
pub const CURVE_FILE: &str = "training_curve.csv";

/// Everything written by [`emit_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub metrics: Metrics,
    pub history: Vec<FinetuneEpoch>,
    /// Records whose scores feed the per-group histogram.
    pub records: Vec<ScanRecord>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    #[serde(flatten)]
    metrics: &'a Metrics,
    config_hash: &'a str,
    seed: u64,
}

fn confusion_csv(m: &Metrics) -> String {
    let mut s = String::from("true\\pred");
    for c in 0..N_CLASSES {
        write!(s, ",{c}").unwrap();
    }
    s.push('\n');
    for (i, row) in m.confusion.iter().enumerate() {
        write!(s, "{i}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Per-group counts of labeled records in each class.
pub fn score_histogram_csv(records: &[ScanRecord]) -> String {
    let mut counts = [[0u64; N_CLASSES]; 3];
    let mut seen = [false; 3];
    for r in records {
        let Some(label) = r.label() else { continue };
        let g = match r.group {
            Some(Group::Hc) => 0,
            Some(Group::Tbi) => 1,
            None => 2,
        };
        seen[g] = true;
        counts[g][label.index()] += 1;
    }
    let mut s = String::from("group,class,count\n");
    for (g, name) in ["HC", "TBI", "NA"].iter().enumerate() {
        if seen[g] {
            for (c, n) in counts[g].iter().enumerate() {
                writeln!(s, "{name},{c},{n}").unwrap();
            }
        }
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn curve_csv(history: &[FinetuneEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,val_acc,val_loss\n");
    for h in history {
        writeln!(s, "{},{},{},{},{}", h.epoch, h.train_loss, h.train_acc, opt(h.val_acc), opt(h.val_loss)).unwrap();
    }
    s
}

/// Writes the metrics JSON and the confusion, histogram and training-curve
/// CSVs. The curve file is omitted when the history is empty.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let json = MetricsJson { metrics: &report.metrics, config_hash: &report.config_hash, seed: report.seed };
    let mut text = serde_json::to_string_pretty(&json).expect("metrics serialize");
    text.push('\n');
    let write = |name: &str, body: &str| {
        let p = out_dir.join(name);
        fs::write(&p, body).at(&p)
    };
    write(METRICS_FILE, &text)?;
    write(CONFUSION_FILE, &confusion_csv(&report.metrics))?;
    write(HISTOGRAM_FILE, &score_histogram_csv(&report.records))?;
    let curve = out_dir.join(CURVE_FILE);
    if report.history.is_empty() {
        if curve.exists() {
            fs::remove_file(&curve).at(&curve)?;
        }
    } else {
        write(CURVE_FILE, &curve_csv(&report.history))?;
    }
    Ok(())
}
