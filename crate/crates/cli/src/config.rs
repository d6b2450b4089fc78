//! Run configuration read from TOML and overridden by flags.

use std::collections::BTreeMap;
use std::path::Path;

use hetdecomp::{Arm, DecompositionQuery, LearnerKind, LearnerSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Column bindings of the input table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Columns {
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Explicit group column; required by the `column` group rule.
    #[serde(default)]
    pub group: Option<String>,
}

/// Group rule with covariates referenced by column name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Groups {
    Column,
    Threshold { covariate: String, threshold: f64, lower: String, upper: String },
}

/// Binning of a real-valued dose column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub bins: usize,
    #[serde(default)]
    pub atoms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learners {
    #[serde(default = "cell_frequency")]
    pub propensity: LearnerSpec,
    #[serde(default = "cell_frequency")]
    pub outcome: LearnerSpec,
}

fn cell_frequency() -> LearnerSpec {
    LearnerSpec::new(LearnerKind::CellFrequency)
}

impl Default for Learners {
    fn default() -> Self {
        Self { propensity: cell_frequency(), outcome: cell_frequency() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryOverrides {
    pub arm: Option<String>,
    pub control: Option<String>,
    pub group: Option<String>,
    pub reference: Option<String>,
}

/// Everything needed to reproduce a decomposition or test run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub folds: Option<usize>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub clip_floor: Option<f64>,
    pub columns: Columns,
    pub arms: Vec<Arm>,
    pub groups: Groups,
    #[serde(default)]
    pub partition: Option<Partition>,
    #[serde(default)]
    pub learners: Learners,
    #[serde(default)]
    pub query: QueryOverrides,
    /// Extra key-value metadata echoed into the manifest.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("invalid config {}: {e}", path.display())))
    }

    /// The query after flag overrides; arms and groups default to the first
    /// two declared.
    pub fn query(&self) -> Result<DecompositionQuery, CliError> {
        let pick = |v: &Option<String>, fallback: Option<String>, what: &str| {
            v.clone().or(fallback).ok_or_else(|| CliError::input(format!("no {what} given and none can be inferred")))
        };
        let arm_name = |k: usize| self.arms.get(k).map(|a| a.name.clone());
        let (g1, g0) = match &self.groups {
            Groups::Threshold { upper, lower, .. } => (Some(upper.clone()), Some(lower.clone())),
            Groups::Column => (None, None),
        };
        Ok(DecompositionQuery {
            arm: pick(&self.query.arm, arm_name(0), "arm")?,
            control: pick(&self.query.control, arm_name(1), "control")?,
            group: pick(&self.query.group, g1, "group")?,
            reference: pick(&self.query.reference, g0, "reference")?,
        })
    }
}
