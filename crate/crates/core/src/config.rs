//! The single JSON document describing a reproducible run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{fingerprint, ModelConfig};
use crate::pipeline::{PipelineConfig, TrainingConfig};
use crate::records::GeneratorConfig;
use crate::schema::AttributeSchema;
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    pub few_shot_ratios: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: ["BASE", "SP", "SP+MC", "SP+MP+MC", "SP+MP+MC+CA"]
                .map(String::from)
                .to_vec(),
            seeds: vec![0, 1, 2],
            few_shot_ratios: vec![0.1, 0.2],
        }
    }
}

/// Every section's `seed` field is overwritten from `seed` when the
/// configuration is resolved, so one number reproduces the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Attribute schema file; the built-in schema when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema_path: Option<PathBuf>,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub stage1: TrainingConfig,
    pub stage2: TrainingConfig,
    pub stage3: TrainingConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    /// Not part of the fingerprint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schema_path: None,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            stage1: TrainingConfig::stage(1),
            stage2: TrainingConfig::stage(2),
            stage3: TrainingConfig::stage(3),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        crate::json::read(path)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Seeds derived from the global seed; a missing stage-1 prevalence
    /// estimate takes the generator's configured prevalence.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let s = c.seed;
        c.generator.seed = derive_seed(s, "generation", 0);
        c.stage1.seed = derive_seed(s, "batching", 1);
        c.stage2.seed = derive_seed(s, "batching", 2);
        c.stage3.seed = derive_seed(s, "batching", 3);
        c.eval.seed = derive_seed(s, "splits", 0);
        c.stage1.stage = 1;
        c.stage2.stage = 2;
        c.stage3.stage = 3;
        if c.stage1.prevalence_estimate.is_none() {
            c.stage1.prevalence_estimate = Some(c.generator.polyp_frame_prevalence);
        }
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolved();
        r.generator.validate(&self.schema()?)?;
        for s in [&r.stage1, &r.stage2, &r.stage3] {
            s.validate()?;
        }
        if r.model.embed_dim == 0 || r.model.hidden_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if r.eval.probe_steps == 0 || !(r.eval.probe_learning_rate > 0.0) {
            return Err(Error::Config(
                "probe needs steps and a positive learning rate".into(),
            ));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<AttributeSchema> {
        match &self.schema_path {
            Some(p) => AttributeSchema::load(p),
            None => Ok(AttributeSchema::default()),
        }
    }

    /// Hash of the resolved configuration without output locations.
    pub fn fingerprint(&self) -> Result<String> {
        let mut r = self.resolved();
        r.out_dir = None;
        fingerprint(&r)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let r = self.resolved();
        PipelineConfig {
            model: r.model,
            stage1: r.stage1,
            stage2: r.stage2,
            stage3: r.stage3,
            seed: derive_seed(r.seed, "init", 0),
        }
    }
}
