//! Aggregated experiment rows with CSV and JSON forms.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, Setup};

/// Mean metrics of one `(model, setup, alpha, group)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub setup: Setup,
    pub alpha: f64,
    /// A language, a split, or `all`.
    pub group: String,
    pub n: usize,
    pub sdr_mean: f64,
    pub sir_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    /// Chunks left out because a reference was silent.
    pub skipped: usize,
}

impl ExperimentReport {
    /// Sorts rows by model, setup, alpha and group.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            (&a.model, a.setup)
                .cmp(&(&b.model, b.setup))
                .then(a.alpha.total_cmp(&b.alpha))
                .then_with(|| a.group.cmp(&b.group))
        });
    }

    pub fn merge(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
        self.skipped += other.skipped;
        self.sort();
    }

    pub fn row(&self, model: &str, setup: Setup, alpha: f64, group: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.setup == setup && r.alpha == alpha && r.group == group)
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| EvalError::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
    }

    /// Rows from CSV; the skip count is not part of the CSV form.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<Result<Vec<ReportRow>, _>>()
            .map_err(|e| EvalError::Report(e.to_string()))?;
        Ok(Self { rows, skipped: 0 })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Report(e.to_string()))
    }

    /// Writes `path` as CSV and a JSON mirror with the `.json` extension.
    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |source| EvalError::Io { path: p, source }
        };
        fs::write(path, self.to_csv()?).map_err(io(path))?;
        let json = path.with_extension("json");
        fs::write(&json, self.to_json()).map_err(io(&json))
    }
}
