//! JSON checkpoints: model spec, preprocessing state and named parameters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::dataset::{SplitPercent, Standardizer, WindowConfig};
use crate::error::{Error, Result};
use crate::hybrid::{Model, ModelSpec};
use crate::imputation::Method;
use crate::pipeline::PipelineConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub artifact_version: String,
    pub seed: u64,
    pub spec: ModelSpec,
    pub window: WindowConfig,
    pub split: SplitPercent,
    pub imputation: Method,
    pub standardizer: Standardizer,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        seed: u64,
        cfg: &PipelineConfig,
        standardizer: &Standardizer,
    ) -> Self {
        let params = model
            .spec()
            .manifest()
            .into_iter()
            .zip(model.params())
            .map(|((name, shape), t)| ParamEntry {
                name,
                shape,
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            spec: *model.spec(),
            window: cfg.window,
            split: cfg.split,
            imputation: cfg.method,
            standardizer: standardizer.clone(),
            params,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            window: self.window,
            split: self.split,
            method: self.imputation,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    /// First 16 hex digits of the SHA-256 of the serialised checkpoint.
    pub fn id(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_json()?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| {
            Error::Checkpoint(format!("{}: malformed checkpoint: {e}", path.display()))
        })?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model after checking the stored parameters against
    /// the manifest of the stored spec.
    pub fn to_model(&self) -> Result<Model> {
        self.spec.validate()?;
        let diff = manifest_diff(&self.spec.manifest(), &self.params);
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "parameters do not match the {} manifest:\n  {}",
                self.spec.arch,
                diff.join("\n  ")
            )));
        }
        if self.standardizer.mean.len() != self.spec.p || self.standardizer.std.len() != self.spec.p
        {
            return Err(Error::Checkpoint(format!(
                "standardizer covers {} stations, spec has {}",
                self.standardizer.mean.len(),
                self.spec.p
            )));
        }
        let params = self
            .params
            .iter()
            .map(|e| Tensor::new(e.shape.clone(), e.values.clone()))
            .collect::<Result<Vec<_>>>()?;
        Model::from_params(self.spec, params)
    }
}

/// Human-readable differences between an expected manifest and stored
/// entries; empty when they agree.
pub fn manifest_diff(expected: &[(String, Vec<usize>)], stored: &[ParamEntry]) -> Vec<String> {
    let mut out = Vec::new();
    let have: BTreeMap<&str, &ParamEntry> = stored.iter().map(|e| (e.name.as_str(), e)).collect();
    for (name, shape) in expected {
        match have.get(name.as_str()) {
            None => out.push(format!("- {name} {shape:?} missing")),
            Some(e) if &e.shape != shape => {
                out.push(format!("~ {name} shape {:?}, expected {shape:?}", e.shape))
            }
            Some(e) if e.values.len() != shape.iter().product::<usize>() => out.push(format!(
                "~ {name} has {} values, expected {}",
                e.values.len(),
                shape.iter().product::<usize>()
            )),
            Some(e) if e.values.iter().any(|v| !v.is_finite()) => {
                out.push(format!("~ {name} holds non-finite values"))
            }
            Some(_) => {}
        }
    }
    for e in stored {
        if !expected.iter().any(|(n, _)| n == &e.name) {
            out.push(format!("+ {} {:?} unexpected", e.name, e.shape));
        }
    }
    if out.is_empty() {
        let order_matches = expected.iter().zip(stored).all(|((n, _), e)| n == &e.name);
        if !order_matches {
            out.push("parameter order differs from the manifest".into());
        }
    }
    out
}
