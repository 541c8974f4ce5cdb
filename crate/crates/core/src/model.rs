//! The trainable model (both encoders plus the optional cross-attention
//! block) and its on-disk checkpoint.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{TextEncoder, TextVars, VisionEncoder, VisionVars, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::{CrossAttentionBlock, CrossAttentionVars};
use crate::report::{NEGATIVE_SENTENCE, POSITIVE_SENTENCE};
use crate::seed::{stream_rng, Rng};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_FORMAT: &str = "endoalign-checkpoint/1";

/// Zero-shot prompts for the malignancy task.
pub const MALIGNANT_PROMPT: &str = "This is a malignant polyp.";
pub const BENIGN_PROMPT: &str = "This is a benign polyp.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Half-width of the uniform noise added to identity attention weights.
    pub attention_init_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: 32,
            attention_init_noise: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub cross_attention: Option<CrossAttentionBlock>,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub vision: VisionVars,
    pub text: TextVars,
    pub cross_attention: Option<CrossAttentionVars>,
}

/// Vocabulary over the standardized sentences, the evaluation prompts and
/// every report sentence.
pub fn build_vocabulary<'a, I: IntoIterator<Item = &'a str>>(report_sentences: I) -> Vocabulary {
    let fixed = [
        POSITIVE_SENTENCE,
        NEGATIVE_SENTENCE,
        MALIGNANT_PROMPT,
        BENIGN_PROMPT,
    ];
    Vocabulary::build(fixed.into_iter().chain(report_sentences))
}

impl Model {
    pub fn init(image_dim: usize, vocabulary: Vocabulary, cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "init", 0);
        let vision = VisionEncoder::init(image_dim, cfg.hidden_dim, cfg.embed_dim, &mut rng);
        let text = TextEncoder::init(vocabulary, cfg.hidden_dim, cfg.embed_dim, &mut rng);
        Self {
            vision,
            text,
            cross_attention: None,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.vision.output_dim()
    }

    pub fn add_cross_attention(&mut self, noise: f64, rng: &mut Rng) {
        if self.cross_attention.is_none() {
            self.cross_attention = Some(CrossAttentionBlock::near_identity(
                self.embed_dim(),
                noise,
                rng,
            ));
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            vision: self.vision.bind(tape),
            text: self.text.bind(tape),
            cross_attention: self.cross_attention.as_ref().map(|b| b.bind(tape)),
        }
    }

    pub fn write_grads(&mut self, tape: &Tape, vars: &ModelVars) -> Result<()> {
        self.vision.write_grads(tape, &vars.vision)?;
        self.text.write_grads(tape, &vars.text)?;
        if let (Some(block), Some(v)) = (&mut self.cross_attention, &vars.cross_attention) {
            block.write_grads(tape, v)?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.vision.params_mut());
        out.extend(self.text.params_mut());
        if let Some(b) = &mut self.cross_attention {
            out.extend(b.params_mut());
        }
        out
    }

    /// Encoder parameters only, leaving any attention block untouched.
    pub fn encoder_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.vision.params_mut());
        out.extend(self.text.params_mut());
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        out.extend(self.vision.params());
        out.extend(self.text.params());
        if let Some(b) = &self.cross_attention {
            out.extend(b.params());
        }
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(trainable);
            p.zero_grad();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Unit-norm embeddings of frames, one row each.
    pub fn embed_frames<F: AsRef<[f64]>>(&self, frames: &[F]) -> Result<Tensor> {
        Ok(crate::encoders::encode_images(&self.vision, frames)?.matrix)
    }

    pub fn embed_texts<S: AsRef<str>>(&self, sentences: &[S]) -> Result<Tensor> {
        Ok(crate::encoders::encode_texts(&self.text, sentences)?.matrix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    Init,
    Stage1Round1,
    Stage1Round2,
    Stage2,
    Stage3,
}

impl StageTag {
    pub fn file_stem(self) -> &'static str {
        match self {
            StageTag::Init => "init",
            StageTag::Stage1Round1 => "stage1_round1",
            StageTag::Stage1Round2 => "stage1_round2",
            StageTag::Stage2 => "stage2",
            StageTag::Stage3 => "stage3",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

/// First 16 hex digits of the SHA-256 of `value`'s canonical JSON.
///
/// `serde_json::Value` keeps object keys sorted, so key order in the source
/// does not change the result.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let text = crate::json::to_string_compact(&canonical)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub format_version: String,
    pub stage: StageTag,
    pub temperature: f64,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_attention: Option<CrossAttentionBlock>,
    /// Hash of the training configuration and schema version.
    pub config_fingerprint: String,
    /// Hash of the full run configuration, when trained through one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_fingerprint: Option<String>,
}

impl StageCheckpoint {
    pub fn new(
        stage: StageTag,
        model: &Model,
        temperature: f64,
        config_fingerprint: String,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT.to_string(),
            stage,
            temperature,
            vision: model.vision.clone(),
            text: model.text.clone(),
            cross_attention: model.cross_attention.clone(),
            config_fingerprint,
            run_fingerprint: None,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            vision: self.vision.clone(),
            text: self.text.clone(),
            cross_attention: self.cross_attention.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}`",
                self.format_version
            )));
        }
        let model = self.model();
        if !model.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        let d = model.vision.output_dim();
        let shapes_ok = model.vision.w1.shape()[1] == model.vision.w2.shape()[0]
            && model.text.output_dim() == d
            && model.text.embedding.rows() == model.text.vocabulary.len()
            && model
                .cross_attention
                .as_ref()
                .is_none_or(|b| b.params().iter().all(|p| p.shape() == [d, d]));
        if !shapes_ok {
            return Err(Error::Checkpoint("inconsistent parameter shapes".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Checkpoint("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::json::write_compact(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Self = crate::json::read(path)?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
