//! Label to (modality, category) mapping for medications and exercise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{InterventionSpec, DURATIONS};
use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../data/intervention_catalog.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub label: String,
    pub modality: String,
    pub category: usize,
    /// Clinical dosing frequency in tokens per month, when one is standard.
    #[serde(default)]
    pub frequency: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("built-in catalog parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("parsing intervention catalog", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
    }

    pub fn get(&self, label: &str) -> Result<&CatalogEntry> {
        let key = label.to_ascii_lowercase();
        self.entries
            .iter()
            .find(|e| e.label.to_ascii_lowercase() == key)
            .ok_or_else(|| Error::InvalidArgument(format!("`{label}` is not in the intervention catalog")))
    }

    /// Append spec for `label`; `frequency` falls back to the entry's
    /// clinical frequency.
    pub fn spec(&self, label: &str, frequency: Option<u32>, duration: u32) -> Result<InterventionSpec> {
        let e = self.get(label)?;
        let f = frequency.or(e.frequency).ok_or_else(|| {
            Error::InvalidArgument(format!("`{label}` has no standard frequency; pass one explicitly"))
        })?;
        let spec = InterventionSpec::append(e.label.clone(), e.modality.clone(), e.category, f, duration);
        if !DURATIONS.contains(&duration) {
            return Err(Error::InvalidArgument(format!("duration {duration} is not one of {DURATIONS:?}")));
        }
        spec.validate(None)?;
        Ok(spec)
    }
}
