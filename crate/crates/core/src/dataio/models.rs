//! JSON persistence for linear models and CARR ensembles.
//!
//! `{"format_version": 1, "models": [{"kind": "linear", ...}, {"kind": "carr", ...}]}`
//!
//! Floats are written in shortest round-trip decimal form, so weights,
//! stage weights and errors reload bit-identically.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::carr::CarrEnsemble;
use crate::error::{Error, Result};
use crate::linclass::LinearModel;
use crate::scalar::Scalar;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", bound = "")]
pub enum ModelEntry<T: Scalar> {
    Linear(LinearModel<T>),
    Carr(CarrEnsemble<T>),
}

#[derive(Serialize)]
#[serde(bound = "")]
struct ModelFileOut<'a, T: Scalar> {
    format_version: u32,
    models: &'a [ModelEntry<T>],
}

fn check_finite<T: Scalar>(entry: &ModelEntry<T>) -> Result<()> {
    match entry {
        ModelEntry::Linear(m) => m.validate(),
        ModelEntry::Carr(e) => {
            for (t, s) in e.stages.iter().enumerate() {
                s.model.validate().map_err(|err| Error::InvalidConfig(format!("stage {t}: {err}")))?;
                if !s.alpha.is_finite() || !s.train_error.is_finite() {
                    return Err(Error::InvalidConfig(format!("category {} stage {t}: non-finite alpha or error", e.category)));
                }
            }
            Ok(())
        }
    }
}

pub fn save_models<T: Scalar>(path: &Path, models: &[ModelEntry<T>]) -> Result<()> {
    for m in models {
        check_finite(m)?;
    }
    let file = ModelFileOut { format_version: MODEL_FORMAT_VERSION, models };
    let text = serde_json::to_string_pretty(&file).expect("models serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_models<T: Scalar>(path: &Path) -> Result<Vec<ModelEntry<T>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_models(&text, path)
}

fn parse_models<T: Scalar>(text: &str, path: &Path) -> Result<Vec<ModelEntry<T>>> {
    let json = |message: String| Error::Json { path: path.to_path_buf(), message };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| json("missing format_version".into()))?;
    if found != u64::from(MODEL_FORMAT_VERSION) {
        return Err(Error::VersionMismatch { expected: MODEL_FORMAT_VERSION, found: found as u32 });
    }
    let entries = value
        .get("models")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(|| json("missing models array".into()))?;
    let mut models = Vec::with_capacity(entries.len());
    for (i, entry) in entries.iter().enumerate() {
        let at = |e: serde_path_to_error::Error<serde_json::Error>| {
            json(format!("at models[{i}].{}: {}", e.path(), e.inner()))
        };
        let model = match entry.get("kind").and_then(serde_json::Value::as_str) {
            Some("linear") => ModelEntry::Linear(serde_path_to_error::deserialize(entry).map_err(at)?),
            Some("carr") => ModelEntry::Carr(serde_path_to_error::deserialize(entry).map_err(at)?),
            other => return Err(json(format!("models[{i}]: unknown kind {other:?}"))),
        };
        check_finite(&model)?;
        models.push(model);
    }
    Ok(models)
}

pub fn save_linear_models<T: Scalar>(path: &Path, models: &[LinearModel<T>]) -> Result<()> {
    let entries: Vec<_> = models.iter().cloned().map(ModelEntry::Linear).collect();
    save_models(path, &entries)
}

pub fn load_linear_models<T: Scalar>(path: &Path) -> Result<Vec<LinearModel<T>>> {
    load_models(path)?
        .into_iter()
        .map(|m| match m {
            ModelEntry::Linear(l) => Ok(l),
            ModelEntry::Carr(e) => Err(Error::Json {
                path: path.to_path_buf(),
                message: format!("expected linear models, found ensemble for {}", e.category),
            }),
        })
        .collect()
}

pub fn save_ensembles<T: Scalar>(path: &Path, ensembles: &[CarrEnsemble<T>]) -> Result<()> {
    let entries: Vec<_> = ensembles.iter().cloned().map(ModelEntry::Carr).collect();
    save_models(path, &entries)
}

/// Loads ensembles; bare linear models load as single-stage ensembles.
pub fn load_ensembles<T: Scalar>(path: &Path) -> Result<Vec<CarrEnsemble<T>>> {
    Ok(load_models(path)?
        .into_iter()
        .map(|m| match m {
            ModelEntry::Carr(e) => e,
            ModelEntry::Linear(l) => CarrEnsemble::base_only(l, Default::default()),
        })
        .collect())
}
