//! CSV tables written by `train` and `eval`.

use msrt_core::train::{ConfusionMatrix, EpochStats, EvalReport, Histogram, Roc};
use msrt_core::CLASS_NAMES;

fn to_csv(rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(r).expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// `fpr,tpr`, one row per threshold from (0,0) to (1,1).
pub fn roc_csv(roc: &Roc) -> Vec<u8> {
    let mut rows = vec![vec!["fpr".to_string(), "tpr".to_string()]];
    rows.extend(roc.points.iter().map(|(f, t)| vec![f.to_string(), t.to_string()]));
    to_csv(&rows)
}

/// `class,name,auc`; classes absent from the evaluation set have an empty AUC.
pub fn auc_csv(report: &EvalReport) -> Vec<u8> {
    let mut rows = vec![vec!["class".into(), "name".into(), "auc".into()]];
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let auc = report.auc(c).map(|a| a.to_string()).unwrap_or_default();
        rows.push(vec![c.to_string(), name.to_string(), auc]);
    }
    to_csv(&rows)
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_csv(cm: &ConfusionMatrix) -> Vec<u8> {
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
    let mut rows = vec![header];
    for (c, counts) in cm.counts.iter().enumerate() {
        let mut row = vec![CLASS_NAMES[c].to_string()];
        row.extend(counts.iter().map(|n| n.to_string()));
        rows.push(row);
    }
    to_csv(&rows)
}

fn f1_header(first: &str) -> Vec<String> {
    let mut h = vec![first.to_string()];
    h.extend(CLASS_NAMES.iter().map(|s| format!("{s}(%)")));
    h.push("AVG(%)".into());
    h
}

fn f1_row(label: String, f1: &[f64], avg: f64) -> Vec<String> {
    let mut row = vec![label];
    row.extend(f1.iter().map(|&f| pct(f)));
    row.push(pct(avg));
    row
}

/// Per-class F1 in percent plus the macro average.
pub fn f1_table_csv(model: &str, report: &EvalReport) -> Vec<u8> {
    to_csv(&[
        f1_header("model"),
        f1_row(model.to_string(), &report.f1, report.macro_f1),
    ])
}

/// One row per fold, then the per-class mean over folds.
pub fn cv_grid_csv(folds: &[EvalReport]) -> Vec<u8> {
    let mut rows = vec![f1_header("K")];
    for (i, r) in folds.iter().enumerate() {
        rows.push(f1_row((i + 1).to_string(), &r.f1, r.macro_f1));
    }
    if !folds.is_empty() {
        let k = folds.len() as f64;
        let mean: Vec<f64> = (0..CLASS_NAMES.len())
            .map(|c| folds.iter().map(|r| r.f1[c]).sum::<f64>() / k)
            .collect();
        let avg = folds.iter().map(|r| r.macro_f1).sum::<f64>() / k;
        rows.push(f1_row("AVG".into(), &mean, avg));
    }
    to_csv(&rows)
}

pub fn trajectory_csv(trajectory: &[EpochStats]) -> Vec<u8> {
    let mut rows = vec![vec![
        "epoch".into(),
        "loss".into(),
        "accuracy".into(),
        "macro_f1".into(),
    ]];
    for e in trajectory {
        rows.push(vec![
            e.epoch.to_string(),
            e.loss.to_string(),
            e.accuracy.to_string(),
            e.macro_f1.to_string(),
        ]);
    }
    to_csv(&rows)
}

/// Square matrix, no header.
pub fn matrix_csv(m: &[Vec<f64>]) -> Vec<u8> {
    let rows: Vec<Vec<String>> = m
        .iter()
        .map(|r| r.iter().map(|x| x.to_string()).collect())
        .collect();
    to_csv(&rows)
}

/// `bin_lo,bin_hi,count`.
pub fn histogram_csv(h: &Histogram) -> Vec<u8> {
    let mut rows = vec![vec!["bin_lo".into(), "bin_hi".into(), "count".into()]];
    for (i, c) in h.counts.iter().enumerate() {
        rows.push(vec![h.edges[i].to_string(), h.edges[i + 1].to_string(), c.to_string()]);
    }
    to_csv(&rows)
}
