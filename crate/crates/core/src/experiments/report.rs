//! Tabular experiment output.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One `(setting, swept_value, S, L, estimator)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub swept_value: Option<f64>,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub estimator: String,
    pub mean: f64,
    /// Standard error of `mean` over replicates (0 for a single replicate).
    pub std: f64,
}

/// What produced a report. Recomputing from this block reproduces every row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    /// Subcommand or runner name.
    pub runner: String,
    /// Full runner configuration.
    pub config: serde_json::Value,
}

impl Provenance {
    pub fn new(runner: &str, seed: u64, config: serde_json::Value) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            seed,
            version: version_string(),
            timestamp,
            runner: runner.to_owned(),
            config,
        }
    }
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Axis name of `swept_value`, when the report is a sweep.
    pub swept_parameter: Option<String>,
    pub provenance: Option<Provenance>,
}

fn row_order(a: &ReportRow, b: &ReportRow) -> Ordering {
    let sv = |r: &ReportRow| r.swept_value.unwrap_or(f64::NEG_INFINITY);
    a.setting
        .cmp(&b.setting)
        .then(sv(a).total_cmp(&sv(b)))
        .then(a.l.cmp(&b.l))
        .then(a.estimator.cmp(&b.estimator))
}

impl Report {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        let mut r = Self {
            rows,
            swept_parameter: None,
            provenance: None,
        };
        r.sort();
        r
    }

    pub fn sort(&mut self) {
        self.rows.sort_by(row_order);
    }

    pub fn estimators(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rows.iter().map(|r| r.estimator.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn find(&self, estimator: &str, swept_value: Option<f64>, l: usize) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.swept_value == swept_value && r.l == l)
    }

    /// CSV with header `setting,swept_value,S,L,estimator,mean,std`, rows sorted.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut rows = self.rows.clone();
        rows.sort_by(row_order);
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn write_provenance(&self, path: &Path) -> Result<()> {
        let body = serde_json::json!({
            "swept_parameter": self.swept_parameter,
            "provenance": self.provenance,
        });
        fs::write(path, serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rows = rd.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?;
        Ok(Self::new(rows))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&fs::read_to_string(path)?)
    }
}
