//! CSV and JSON emission. Numbers are written with Rust's shortest
//! round-trip `f64` formatting: always `.` as decimal separator, never an
//! exponent, and `inf`/`NaN` for non-finite values.

use std::fs;
use std::path::{Path, PathBuf};

use normlab_core::analysis::AnalysisSeries;
use normlab_core::gradcheck::GradCheckReport;
use normlab_core::network::EpochMetrics;
use serde::Serialize;

use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LANDSCAPE_FILE: &str = "landscape.csv";
pub const GRADPRED_FILE: &str = "gradpred.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const NOISE_COMPARISON_FILE: &str = "noise_comparison.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

pub fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// One row per epoch. `lambda_i` columns follow the model's GNPlus layers.
pub fn write_metrics(dir: &Path, lambda_count: usize, epochs: &[EpochMetrics]) -> Result<PathBuf, CliError> {
    let path = dir.join(METRICS_FILE);
    let mut cols = header(&["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]);
    cols.extend((0..lambda_count).map(|i| format!("lambda_{i}")));
    cols.push("divergence_flag".into());
    let rows = epochs.iter().map(|e| {
        let mut r = vec![
            e.epoch.to_string(),
            opt(e.train_loss),
            opt(e.train_acc),
            opt(e.val_loss),
            opt(e.val_acc),
        ];
        r.extend(e.lambdas.iter().map(|&l| num(l)));
        r.push(e.divergence.as_str().to_string());
        r
    });
    write_csv(&path, &cols, rows)?;
    Ok(path)
}

pub fn write_landscape(dir: &Path, series: &AnalysisSeries) -> Result<PathBuf, CliError> {
    let path = dir.join(LANDSCAPE_FILE);
    let rows = series.landscape.iter().flat_map(|s| {
        s.etas
            .iter()
            .zip(&s.losses)
            .map(move |(&eta, &loss)| vec![s.step.to_string(), num(eta), num(loss)])
    });
    write_csv(&path, &header(&["step", "eta", "loss"]), rows)?;
    Ok(path)
}

pub fn write_gradpred(dir: &Path, series: &AnalysisSeries) -> Result<PathBuf, CliError> {
    let path = dir.join(GRADPRED_FILE);
    let rows = series
        .gradpred
        .iter()
        .map(|g| vec![g.step.to_string(), num(g.l2_distance)]);
    write_csv(&path, &header(&["step", "l2_distance"]), rows)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseComparisonRow {
    pub seed: u64,
    pub final_train_acc_noise: Option<f64>,
    pub final_train_acc_plain: Option<f64>,
    pub final_train_loss_noise: Option<f64>,
    pub final_train_loss_plain: Option<f64>,
    pub divergence_noise: String,
    pub divergence_plain: String,
}

pub fn write_noise_comparison(dir: &Path, rows: &[NoiseComparisonRow]) -> Result<PathBuf, CliError> {
    let path = dir.join(NOISE_COMPARISON_FILE);
    let cols = header(&[
        "seed",
        "final_train_acc_noise",
        "final_train_acc_plain",
        "final_train_loss_noise",
        "final_train_loss_plain",
        "divergence_noise",
        "divergence_plain",
    ]);
    let body = rows.iter().map(|r| {
        vec![
            r.seed.to_string(),
            opt(r.final_train_acc_noise),
            opt(r.final_train_acc_plain),
            opt(r.final_train_loss_noise),
            opt(r.final_train_loss_plain),
            r.divergence_noise.clone(),
            r.divergence_plain.clone(),
        ]
    });
    write_csv(&path, &cols, body)?;
    Ok(path)
}

pub fn write_gradcheck(dir: &Path, report: &GradCheckReport) -> Result<PathBuf, CliError> {
    let path = dir.join(GRADCHECK_FILE);
    let rows = report.results.iter().map(|r| {
        vec![
            r.case.clone(),
            r.tensor.clone(),
            num(r.max_rel_error),
            (r.max_rel_error <= report.tolerance).to_string(),
        ]
    });
    write_csv(&path, &header(&["case", "tensor", "max_rel_error", "pass"]), rows)?;
    Ok(path)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}
