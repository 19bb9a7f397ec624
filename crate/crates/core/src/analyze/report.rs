//! Versioned JSON analysis report.

use serde::{Deserialize, Serialize};

use super::{AnalyzeError, EnergyReport, ErrorDecomposition, Result, SpikingActivity};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub model: Option<String>,
    pub dataset: String,
    pub samples: usize,
    pub timesteps: u32,
    pub seed: Option<u64>,
    pub energy_table: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub timesteps: u32,
    pub snn_accuracy: f64,
    pub ann_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub activity: SpikingActivity,
    pub energy: EnergyReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub errors: Option<ErrorDecomposition>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| AnalyzeError::Invalid(format!("report: {e}")))?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(REPORT_SCHEMA_VERSION as u64) {
            return Err(AnalyzeError::Invalid(format!(
                "report schema version {version:?}, expected {REPORT_SCHEMA_VERSION}"
            )));
        }
        serde_json::from_value(value).map_err(|e| AnalyzeError::Invalid(format!("report: {e}")))
    }
}
