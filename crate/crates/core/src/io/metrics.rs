//! JSON-lines metric records.

use indexmap::IndexMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    /// `‖W‖_F` of the (composed) weight.
    pub frob: f64,
    /// `None` for an all-zero weight.
    pub eff_rank: Option<f64>,
    /// `lr / ‖W‖_F²`; `None` for an all-zero weight.
    pub eff_step: Option<f64>,
    /// Leading singular values, descending.
    pub sv_top: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema: u32,
    pub step: u64,
    pub wall_ms: Option<u64>,
    /// Mean minibatch loss since the previous record.
    pub loss: Option<f64>,
    pub eval_loss: f64,
    pub eval_acc: Option<f64>,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_switch_eval_loss: Option<f64>,
    pub layers: IndexMap<String, LayerMetrics>,
}

impl MetricRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

pub fn write_record(w: &mut impl Write, r: &MetricRecord) -> std::io::Result<()> {
    writeln!(w, "{}", r.to_line())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: MetricRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if r.schema != SCHEMA_VERSION {
            return Err(Error::Format(format!("{}:{}: schema {}", path.display(), i + 1, r.schema)));
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optional_fields_are_omitted() {
        let r = MetricRecord {
            schema: SCHEMA_VERSION,
            step: 10,
            wall_ms: None,
            loss: Some(0.5),
            eval_loss: 0.25,
            eval_acc: None,
            lr: 0.1,
            event: None,
            pre_switch_eval_loss: None,
            layers: IndexMap::new(),
        };
        let line = r.to_line();
        assert!(!line.contains("event"));
        assert!(line.contains("\"wall_ms\":null"));
        let back: MetricRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
    }
}
