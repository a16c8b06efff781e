//! Human-readable stdout tables and the TSV report files.

use bm3_core::{AblationRow, Error, GridOutcome, MetricsReport, Result};
use std::path::Path;

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::Io { path: path.into(), source: e })
}

pub fn write_json_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.into(), source: e })?;
    text.push('\n');
    write_text(path, &text)
}

/// One row per cutoff, Recall and NDCG side by side.
pub fn metrics_table(title: &str, report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>12} {:>12}   ({} users)\n",
        title, "Recall", "NDCG", report.users
    ));
    for (k, recall) in &report.recall {
        out.push_str(&format!(
            "  @{:<7} {:>12.4} {:>12.4}\n",
            k, recall, report.ndcg[k]
        ));
    }
    out
}

fn metric_columns(cutoffs: &[usize]) -> String {
    let mut header = String::new();
    for k in cutoffs {
        header.push_str(&format!("\trecall@{}", k));
    }
    for k in cutoffs {
        header.push_str(&format!("\tndcg@{}", k));
    }
    header
}

fn metric_cells(report: &MetricsReport, cutoffs: &[usize]) -> String {
    let mut row = String::new();
    for k in cutoffs {
        row.push_str(&format!("\t{:.6}", report.recall[k]));
    }
    for k in cutoffs {
        row.push_str(&format!("\t{:.6}", report.ndcg[k]));
    }
    row
}

/// The seven-variant ablation table: one labeled row per variant with
/// its validation stopping metric and test metrics.
pub fn ablation_tsv(rows: &[AblationRow], cutoffs: &[usize], stop_cutoff: usize) -> String {
    let mut out = format!(
        "label\tkey\tbest_epoch\tvalid_recall@{}{}\n",
        stop_cutoff,
        metric_columns(cutoffs)
    );
    for row in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.6}{}\n",
            row.label,
            row.key,
            row.report.best_epoch,
            row.report.best_valid_r20,
            metric_cells(&row.report.test_metrics, cutoffs)
        ));
    }
    out
}

/// Plot-ready sweep table: one row per grid cell, best cell marked.
pub fn grid_tsv(outcome: &GridOutcome, cutoffs: &[usize], stop_cutoff: usize) -> String {
    let mut out = format!(
        "layers\tdropout\tlambda\tbest_epoch\tvalid_recall@{}{}\tbest\tdir\n",
        stop_cutoff,
        metric_columns(cutoffs)
    );
    for (i, row) in outcome.rows.iter().enumerate() {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.6}{}\t{}\t{}\n",
            row.point.layers,
            row.point.dropout,
            row.point.lambda,
            row.report.best_epoch,
            row.valid_stop_metric,
            metric_cells(&row.report.test_metrics, cutoffs),
            if i == outcome.best { 1 } else { 0 },
            row.dir
        ));
    }
    out
}
