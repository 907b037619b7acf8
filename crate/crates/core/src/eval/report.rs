use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub settings: BTreeMap<String, Value>,
    pub metrics: BTreeMap<String, f64>,
    pub seed: u64,
    pub checkpoint_sha: String,
}

impl EvalReport {
    pub fn new(protocol: &str, seed: u64) -> Self {
        EvalReport {
            protocol: protocol.to_string(),
            settings: BTreeMap::new(),
            metrics: BTreeMap::new(),
            seed,
            checkpoint_sha: String::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.settings.insert(key.to_string(), value.into());
        self
    }

    pub fn metric(&mut self, key: &str, value: f64) -> &mut Self {
        self.metrics.insert(key.to_string(), value);
        self
    }

    /// Mean ranks are at least 1; every other metric is a ratio.
    pub fn validate(&self) -> Result<()> {
        for (k, &v) in &self.metrics {
            let ok = if k == "mean_rank" {
                v >= 1.0
            } else {
                (0.0..=1.0).contains(&v)
            };
            if !ok || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("metric {k} = {v} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

/// Writes reports as a JSON array or as one CSV row per report with
/// `settings.*` and `metrics.*` columns in sorted order.
pub fn emit_report(reports: &[EvalReport], path: &Path, format: ReportFormat) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to write".into()));
    }
    for r in reports {
        r.validate()?;
    }
    let bytes = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Csv => to_csv(reports)?,
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let settings: BTreeSet<&String> = reports.iter().flat_map(|r| r.settings.keys()).collect();
    let metrics: BTreeSet<&String> = reports.iter().flat_map(|r| r.metrics.keys()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["protocol".to_string(), "seed".into(), "checkpoint_sha".into()];
    header.extend(settings.iter().map(|k| format!("settings.{k}")));
    header.extend(metrics.iter().map(|k| format!("metrics.{k}")));
    let werr = |e: csv::Error| Error::InvalidArgument(e.to_string());
    w.write_record(&header).map_err(werr)?;
    for r in reports {
        let mut row = vec![r.protocol.clone(), r.seed.to_string(), r.checkpoint_sha.clone()];
        row.extend(settings.iter().map(|k| match r.settings.get(*k) {
            None => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
        }));
        row.extend(metrics.iter().map(|k| r.metrics.get(*k).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(werr)?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn read_report_json(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}
