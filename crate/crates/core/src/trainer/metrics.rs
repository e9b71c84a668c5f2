use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StageTag;
use crate::error::{Error, Result};

/// Mean of one loss term over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub stage: StageTag,
    /// 1-based.
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

/// One JSON object per line.
pub fn metrics_to_string(records: &[MetricRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                line: i + 1,
                field: "metrics".into(),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_metrics(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_to_string(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    parse_metrics(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
