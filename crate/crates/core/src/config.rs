//! Strict JSON run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSpec};
use crate::error::{ensure, CoreError, Result};
use crate::eval::EvalConfig;
use crate::net::{FlowNet, FlowNetConfig};
use crate::train::{check_compatible, CurriculumConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub model: FlowNetConfig,
    pub datasets: BTreeMap<String, DatasetSpec>,
    pub curriculum: CurriculumConfig,
    /// Dataset the evaluation harness compares samples against.
    pub eval_dataset: String,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| CoreError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.version == CONFIG_VERSION, "version", || {
            format!("unsupported version {} (expected {CONFIG_VERSION})", self.version)
        })?;
        self.model.validate()?;
        for (name, spec) in &self.datasets {
            spec.validate()
                .map_err(|e| CoreError::config(format!("datasets.{name}"), e.to_string()))?;
        }
        self.curriculum.validate()?;
        self.eval.validate()?;
        let mut refs = vec![
            ("curriculum.stage1.dataset", &self.curriculum.stage1.dataset),
            ("eval_dataset", &self.eval_dataset),
        ];
        if let Some(s2) = &self.curriculum.stage2 {
            refs.push(("curriculum.stage2.dataset", &s2.dataset));
        }
        for (field, id) in refs {
            let spec = self
                .datasets
                .get(id)
                .ok_or_else(|| CoreError::config(field, format!("unknown dataset `{id}`")))?;
            let [l, d] = spec.sample_shape();
            let c = &self.model;
            ensure(
                d == c.latent_dim && l <= c.max_seq_len && spec.n_labels <= c.n_labels,
                field,
                || format!("dataset `{id}` does not fit the model shape"),
            )?;
        }
        Ok(())
    }

    pub fn dataset_spec(&self, id: &str) -> Result<&DatasetSpec> {
        self.datasets
            .get(id)
            .ok_or_else(|| CoreError::config("dataset", format!("unknown dataset `{id}`")))
    }

    /// Materialize a dataset, checking it fits the model.
    pub fn dataset(&self, id: &str) -> Result<Dataset> {
        let data = Dataset::generate(self.dataset_spec(id)?)?;
        check_compatible(&FlowNet::new(self.model.clone())?, &data)?;
        Ok(data)
    }
}
