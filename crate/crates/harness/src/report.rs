//! Run reports and their JSON/CSV encodings.
//!
//! Every float is written with 17 significant digits, so parsing an export
//! gives back the exact values and re-exporting gives identical bytes.

use std::io;
use std::path::Path;

use latentdr::textio::fmt_f64;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean per-step losses; absent for the untrained row and for terms the
    /// variant never computes.
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub total: Option<f64>,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: f64,
    pub medium: f64,
    pub few: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    /// Epoch whose checkpoint had the best validation accuracy.
    pub best_epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub clean_acc: f64,
    pub degraded_acc: f64,
    pub restored_acc: f64,
    pub align_train: Option<f64>,
    pub align_test: Option<f64>,
    pub uniform_train: Option<f64>,
    pub uniform_test: Option<f64>,
    /// Test accuracy by class-frequency group (long-tail runs only).
    pub groups: Option<GroupAccuracy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRow>,
    #[serde(rename = "final")]
    pub final_metrics: FinalMetrics,
    pub wall_time_secs: f64,
}

/// Compact JSON with 17-significant-digit floats.
struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(fmt_f64(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = to_json(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    /// JSON with `wall_time_secs` zeroed: identical for identical runs.
    pub fn to_deterministic_json(&self) -> Result<String> {
        to_json(&RunReport {
            wall_time_secs: 0.0,
            ..self.clone()
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Label for summaries: the degradation kind, or `none` for ERM.
    pub fn kind_label(&self) -> String {
        match self.config.variant {
            latentdr::latentdr::AblationVariant::Erm => "none".into(),
            _ => self.config.kind.to_string(),
        }
    }
}

/// One CSV line per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub variant: String,
    pub kind: String,
    pub held_out: usize,
    pub seed: u64,
    pub test_acc: String,
    pub clean_acc: String,
    pub degraded_acc: String,
    pub restored_acc: String,
    pub align_test: String,
    pub uniform_test: String,
}

fn opt_float(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl CsvRow {
    pub fn from_report(r: &RunReport) -> Self {
        let f = &r.final_metrics;
        Self {
            variant: r.config.variant.to_string(),
            kind: r.kind_label(),
            held_out: r.config.held_out,
            seed: r.seed,
            test_acc: fmt_f64(f.test_acc),
            clean_acc: fmt_f64(f.clean_acc),
            degraded_acc: fmt_f64(f.degraded_acc),
            restored_acc: fmt_f64(f.restored_acc),
            align_test: opt_float(f.align_test),
            uniform_test: opt_float(f.uniform_test),
        }
    }
}

pub fn csv_text(reports: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow::from_report(r))?;
    }
    if reports.is_empty() {
        w.write_record([
            "variant",
            "kind",
            "held_out",
            "seed",
            "test_acc",
            "clean_acc",
            "degraded_acc",
            "restored_acc",
            "align_test",
            "uniform_test",
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv writes UTF-8"))
}

pub fn write_csv(reports: &[RunReport], path: &Path) -> Result<()> {
    std::fs::write(path, csv_text(reports)?).map_err(|e| HarnessError::io(path, e))
}

pub fn read_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<CsvRow>, _>>()?)
}
