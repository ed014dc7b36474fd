//! Operations shared by the command line and the service, so both produce identical results.

use std::path::Path;

use ifam_core::databench::{GroupedDataset, MetricsReport, Split};
use ifam_core::interventions::{loo_part_removal, InterventionPlan, LooReport, ThresholdTable};
use ifam_core::model::IfamModel;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Score optimized by leave-one-out part removal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Wga,
    Aa,
}

impl Metric {
    pub fn of(self, r: &MetricsReport) -> f64 {
        match self {
            Metric::Wga => r.wga,
            Metric::Aa => r.aa,
        }
    }
}

pub fn evaluate(model: &IfamModel, data: &GroupedDataset, split: Split, plan: &InterventionPlan) -> Result<MetricsReport> {
    Ok(model.evaluate_split(data, split, plan)?)
}

pub fn calibrate(model: &IfamModel, data: &GroupedDataset, split: Split, q: f64) -> Result<ThresholdTable> {
    Ok(model.calibrate(data.split(split), q)?)
}

pub fn loo(model: &IfamModel, data: &GroupedDataset, split: Split, metric: Metric, base: &InterventionPlan, repeated: bool) -> Result<LooReport> {
    Ok(loo_part_removal(model.n_parts(), base, repeated, |plan| {
        Ok(metric.of(&model.evaluate_split(data, split, plan)?))
    })?)
}

pub fn parse_plan(text: &str) -> std::result::Result<InterventionPlan, String> {
    serde_json::from_str(text).map_err(|e| e.to_string())
}

pub fn read_plan(path: &Path) -> Result<InterventionPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    parse_plan(&text).map_err(|detail| CliError::Config {
        what: "plan",
        path: path.to_path_buf(),
        detail,
    })
}

/// Reads a strict JSON document, reporting parse failures as malformed configuration.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &'static str) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config {
        what,
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
