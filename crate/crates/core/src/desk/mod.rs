//! Synthetic decoder with plantable key-value facts.

mod internalizer;
mod model;
mod scenario;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use internalizer::{internalize, parse_document, AdapterProfile, DocumentFact};
pub use model::{argmax, log_softmax, DeskModel, DeskModelConfig, GenerationTrace, PlantedFact};
pub use scenario::{build_scenario, tier_for, ScenarioSpec};

use crate::error::{Error, Result};

/// Versioned desk fixture: model config (including its seed), planted
/// facts, and the profile used to turn documents into adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeskSpec {
    pub config: DeskModelConfig,
    pub facts: Vec<PlantedFact>,
    pub adapter_profile: AdapterProfile,
}

impl DeskSpec {
    pub fn build(&self) -> Result<DeskModel> {
        DeskModel::build(self.config.clone(), self.facts.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
