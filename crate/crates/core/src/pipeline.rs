//! The three training stages and their orchestration.
//!
//! 1. Cleansing: match one random frame per case against the standardized
//!    positive/negative sentence, score every frame of positive cases with
//!    the result, keep the top `⌈prevalence · K⌉` frames per case, then train
//!    again on the kept frames.
//! 2. Attunement: single-polyp cases, one kept frame against the finding
//!    sentence, with attribute-similarity soft targets.
//! 3. Unification: every positive case; all kept frames and all findings of
//!    a patient are cross-attended, averaged to one embedding per side, and
//!    matched at patient level against OR-combined attribute targets.
//!
//! Every stage starts from the previous stage's parameters. Randomness comes
//! from `(seed, stream, epoch)` sub-streams, so a stage is a pure function of
//! its inputs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_vocabulary, fingerprint, Model, ModelConfig, ModelVars, StageCheckpoint, StageTag,
};
use crate::objectives::{
    aggregate_patient, cosine_similarity_matrices, cross_attend, detection_loss, morph_loss,
    morphology_targets, union_loss, PatientEmbedding, TargetMatrix,
};
use crate::optim::{AdamWConfig, AdamWState};
use crate::records::{corpus_stats, MedicalCase};
use crate::report::{
    parse_case, standardized_sentence, ParsedReport, NEGATIVE_SENTENCE, POSITIVE_SENTENCE,
};
use crate::schema::{AttributeSchema, AttributeVector};
use crate::seed::{stream_rng, Rng};
use crate::tensor::{Tape, Var};

pub const MANIFEST_FORMAT: &str = "endoalign-manifest/1";

/// Cases paired with their parsed reports.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub cases: Vec<MedicalCase>,
    pub reports: Vec<ParsedReport>,
    pub schema_version: String,
}

impl Corpus {
    pub fn parse(cases: Vec<MedicalCase>, schema: &AttributeSchema) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::EmptyInput("corpus"));
        }
        let dim = cases[0].images.first().map_or(0, Vec::len);
        for c in &cases {
            c.check_invariants(dim)?;
        }
        let reports = cases
            .iter()
            .map(|c| parse_case(c, schema))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cases,
            reports,
            schema_version: schema.version.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.cases[0].images[0].len()
    }

    pub fn is_positive(&self, i: usize) -> bool {
        !self.reports[i].polyp_sentences.is_empty()
    }

    pub fn vocabulary(&self) -> crate::encoders::Vocabulary {
        build_vocabulary(
            self.reports
                .iter()
                .flat_map(|r| r.polyp_sentences.iter().map(|p| p.text.as_str())),
        )
    }

    fn attributes(&self, i: usize) -> Vec<AttributeVector> {
        self.reports[i]
            .polyp_sentences
            .iter()
            .map(|p| p.attributes.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs over which the learning rate ramps linearly up from zero.
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Fraction of frames kept per positive case; defaults to the corpus's
    /// measured polyp-frame prevalence.
    pub prevalence_estimate: Option<f64>,
    /// Attribute soft targets (stages 2 and 3); one-hot when false.
    pub morphology_targets: bool,
    /// Cross-attention before patient averaging (stage 3).
    pub cross_attention: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::stage(1)
    }
}

impl TrainingConfig {
    pub fn stage(stage: u8) -> Self {
        Self {
            stage,
            batch_size: if stage == 3 { 8 } else { 32 },
            epochs: 100,
            warmup_epochs: 50,
            learning_rate: 5e-5,
            weight_decay: 0.01,
            temperature: 0.07,
            prevalence_estimate: None,
            morphology_targets: true,
            cross_attention: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.stage) {
            return fail(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs exceeds epochs".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 for a contrastive loss".into());
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("learning_rate and weight_decay must be non-negative".into());
        }
        if let Some(p) = self.prevalence_estimate {
            validate_prevalence(p)?;
        }
        Ok(())
    }

    pub fn fingerprint(&self, schema_version: &str) -> Result<String> {
        fingerprint(&(self, schema_version))
    }
}

fn validate_prevalence(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "prevalence_estimate must lie in (0, 1], got {p}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageTag,
    pub seed: u64,
    /// Mean batch loss per epoch, measured before each update.
    pub epoch_losses: Vec<f64>,
    pub cases_used: usize,
    pub cases_excluded: usize,
    pub batches_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: StageCheckpoint,
    pub report: StageReport,
}

fn warmup_lr(cfg: &TrainingConfig, step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

struct EpochStats {
    losses: Vec<f64>,
    skipped: usize,
}

/// Shared loop: shuffled batches over `items`, AdamW with linear warmup.
fn run_epochs<F>(
    model: &mut Model,
    cfg: &TrainingConfig,
    items: &[usize],
    train_attention: bool,
    mut batch_loss: F,
) -> Result<EpochStats>
where
    F: FnMut(&Model, &mut Tape, &ModelVars, &[usize], &mut Rng) -> Result<Var>,
{
    cfg.validate()?;
    let bs = cfg.batch_size;
    let per_epoch = items.len() / bs + usize::from(items.len() % bs >= 2);
    let warmup_steps = cfg.warmup_epochs * per_epoch;
    let mut opt = AdamWState::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    model.set_trainable(true);
    let mut stats = EpochStats {
        losses: Vec::with_capacity(cfg.epochs),
        skipped: 0,
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = items.to_vec();
        order.shuffle(&mut stream_rng(cfg.seed, "epoch-order", epoch as u64));
        let mut rng = stream_rng(cfg.seed, "sampling", epoch as u64);
        let mut total = 0.0;
        let mut count = 0;
        for batch in order.chunks(bs) {
            if batch.len() < 2 {
                log::warn!(
                    "skipping batch of {} case(s) in stage {}",
                    batch.len(),
                    cfg.stage
                );
                stats.skipped += 1;
                continue;
            }
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let loss = batch_loss(model, &mut tape, &vars, batch, &mut rng)?;
            total += tape.scalar_value(loss);
            count += 1;
            tape.backward(loss)?;
            model.write_grads(&tape, &vars)?;
            opt.learning_rate = warmup_lr(cfg, step, warmup_steps);
            let mut params = if train_attention {
                model.params_mut()
            } else {
                model.encoder_params_mut()
            };
            opt.step(&mut params)?;
            step += 1;
        }
        stats.losses.push(if count == 0 {
            f64::NAN
        } else {
            total / count as f64
        });
    }
    model.set_trainable(false);
    Ok(stats)
}

fn pick(rng: &mut Rng, pool: &[usize]) -> usize {
    pool[rng.random_range(0..pool.len())]
}

fn checkpoint(
    stage: StageTag,
    model: &Model,
    cfg: &TrainingConfig,
    corpus: &Corpus,
) -> Result<StageCheckpoint> {
    Ok(StageCheckpoint::new(
        stage,
        model,
        cfg.temperature,
        cfg.fingerprint(&corpus.schema_version)?,
    ))
}

fn stage1(
    corpus: &Corpus,
    pools: &[Vec<usize>],
    init: &Model,
    cfg: &TrainingConfig,
    tag: StageTag,
) -> Result<StageOutput> {
    let mut model = init.clone();
    let items: Vec<usize> = (0..corpus.len())
        .filter(|&i| !pools[i].is_empty())
        .collect();
    let stats = run_epochs(
        &mut model,
        cfg,
        &items,
        false,
        |m, tape, vars, batch, rng| {
            let frames: Vec<&[f64]> = batch
                .iter()
                .map(|&i| corpus.cases[i].images[pick(rng, &pools[i])].as_slice())
                .collect();
            let texts: Vec<&str> = batch
                .iter()
                .map(|&i| standardized_sentence(&corpus.reports[i]))
                .collect();
            let x = tape.constant(&m.vision.frames_tensor(&frames)?);
            let v = m.vision.forward(tape, &vars.vision, x)?;
            let t = m.text.forward(tape, &vars.text, &texts)?;
            let (sv, st) = cosine_similarity_matrices(tape, v, t)?;
            detection_loss(tape, &sv, &st, cfg.temperature)
        },
    )?;
    Ok(StageOutput {
        checkpoint: checkpoint(tag, &model, cfg, corpus)?,
        report: StageReport {
            stage: tag,
            seed: cfg.seed,
            epoch_losses: stats.losses,
            cases_used: items.len(),
            cases_excluded: corpus.len() - items.len(),
            batches_skipped: stats.skipped,
        },
    })
}

/// First cleansing round: one uniformly sampled frame per case and step.
pub fn stage1_round1(corpus: &Corpus, init: &Model, cfg: &TrainingConfig) -> Result<StageOutput> {
    let pools: Vec<Vec<usize>> = corpus
        .cases
        .iter()
        .map(|c| (0..c.num_frames()).collect())
        .collect();
    stage1(corpus, &pools, init, cfg, StageTag::Stage1Round1)
}

/// Second cleansing round: frames sampled only from the kept set.
pub fn stage1_round2(
    corpus: &Corpus,
    filtered: &FilteredFrameSet,
    round1: &Model,
    cfg: &TrainingConfig,
) -> Result<StageOutput> {
    filtered.check(corpus)?;
    stage1(
        corpus,
        &filtered.retained,
        round1,
        cfg,
        StageTag::Stage1Round2,
    )
}

/// Probability that each frame shows a polyp: softmax over the frame's
/// similarities to the positive and negative standardized sentences.
pub fn score_frames(model: &Model, case: &MedicalCase, temperature: f64) -> Result<Vec<f64>> {
    let v = model.embed_frames(&case.images)?;
    let t = model.embed_texts(&[POSITIVE_SENTENCE, NEGATIVE_SENTENCE])?;
    Ok(prompt_probabilities(&v, &t, temperature))
}

/// Row-wise `softmax(⟨v, t₀⟩/τ, ⟨v, t₁⟩/τ)[0]`.
pub fn prompt_probabilities(
    embeddings: &crate::tensor::Tensor,
    prompts: &crate::tensor::Tensor,
    temperature: f64,
) -> Vec<f64> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    (0..embeddings.rows())
        .map(|k| {
            let row = embeddings.row(k);
            let a = dot(row, prompts.row(0)) / temperature;
            let b = dot(row, prompts.row(1)) / temperature;
            let m = a.max(b);
            let (ea, eb) = ((a - m).exp(), (b - m).exp());
            ea / (ea + eb)
        })
        .collect()
}

pub fn score_corpus(model: &Model, corpus: &Corpus, temperature: f64) -> Result<Vec<Vec<f64>>> {
    corpus
        .cases
        .iter()
        .map(|c| score_frames(model, c, temperature))
        .collect()
}

/// Kept frames per case, with the probabilities used to rank them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredFrameSet {
    pub case_ids: Vec<String>,
    pub retained: Vec<Vec<usize>>,
    pub probabilities: Vec<Vec<f64>>,
    pub prevalence_estimate: f64,
}

impl FilteredFrameSet {
    /// Every frame of every case.
    pub fn all_frames(corpus: &Corpus) -> Self {
        Self {
            case_ids: corpus.cases.iter().map(|c| c.case_id.clone()).collect(),
            retained: corpus
                .cases
                .iter()
                .map(|c| (0..c.num_frames()).collect())
                .collect(),
            probabilities: corpus
                .cases
                .iter()
                .map(|c| vec![1.0; c.num_frames()])
                .collect(),
            prevalence_estimate: 1.0,
        }
    }

    pub fn check(&self, corpus: &Corpus) -> Result<()> {
        if self.retained.len() != corpus.len() {
            return Err(Error::Config(format!(
                "filter covers {} cases, corpus has {}",
                self.retained.len(),
                corpus.len()
            )));
        }
        for (i, (kept, case)) in self.retained.iter().zip(&corpus.cases).enumerate() {
            if self.case_ids.get(i) != Some(&case.case_id) {
                return Err(Error::Config(format!(
                    "filter case {i} does not match corpus order"
                )));
            }
            if kept.iter().any(|&k| k >= case.num_frames()) {
                return Err(Error::Config(format!(
                    "filter index out of range for {}",
                    case.case_id
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::json::write_pretty(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::json::read(path)
    }
}

/// Number of frames kept from a positive case with `frames` frames.
pub fn retained_count(prevalence: f64, frames: usize) -> usize {
    // 0.3 * 10 evaluates to 3.0000000000000004; tolerate that rounding.
    let raw = (prevalence * frames as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(frames)
}

/// Keeps the `⌈prevalence · K⌉` most probable frames of each positive case
/// (lower index wins ties) and one seeded random frame of each negative case.
pub fn prevalence_filter(
    scores: &[Vec<f64>],
    prevalence: f64,
    corpus: &Corpus,
    seed: u64,
) -> Result<FilteredFrameSet> {
    validate_prevalence(prevalence)?;
    if scores.len() != corpus.len() {
        return Err(Error::shape(
            "prevalence_filter",
            &[scores.len()],
            &[corpus.len()],
        ));
    }
    let mut retained = Vec::with_capacity(corpus.len());
    for (i, (p, case)) in scores.iter().zip(&corpus.cases).enumerate() {
        if p.len() != case.num_frames() {
            return Err(Error::shape(
                "prevalence_filter",
                &[p.len()],
                &[case.num_frames()],
            ));
        }
        if corpus.is_positive(i) {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            let mut kept = order[..retained_count(prevalence, p.len())].to_vec();
            kept.sort_unstable();
            retained.push(kept);
        } else {
            let mut rng = stream_rng(seed, "negative-frame", i as u64);
            retained.push(vec![rng.random_range(0..case.num_frames())]);
        }
    }
    Ok(FilteredFrameSet {
        case_ids: corpus.cases.iter().map(|c| c.case_id.clone()).collect(),
        retained,
        probabilities: scores.to_vec(),
        prevalence_estimate: prevalence,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub prevalence_estimate: f64,
    pub positive_cases: usize,
    pub retained_frames: usize,
    /// Kept frames of positive cases that truly show a polyp.
    pub purity: f64,
    /// Polyp-frame fraction over all frames of positive cases.
    pub base_rate: f64,
}

/// Purity of the kept frames of positive cases against generator labels.
pub fn filter_summary(filtered: &FilteredFrameSet, corpus: &Corpus) -> FilterSummary {
    let mut kept = 0;
    let mut true_kept = 0;
    let mut frames = 0;
    let mut polyp_frames = 0;
    let mut positives = 0;
    for (i, case) in corpus.cases.iter().enumerate() {
        if !corpus.is_positive(i) {
            continue;
        }
        positives += 1;
        kept += filtered.retained[i].len();
        true_kept += filtered.retained[i]
            .iter()
            .filter(|&&k| case.frame_labels[k])
            .count();
        frames += case.num_frames();
        polyp_frames += case.frame_labels.iter().filter(|&&l| l).count();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    FilterSummary {
        prevalence_estimate: filtered.prevalence_estimate,
        positive_cases: positives,
        retained_frames: kept,
        purity: ratio(true_kept, kept),
        base_rate: ratio(polyp_frames, frames),
    }
}

/// Attunement on single-polyp cases.
pub fn stage2_train(
    corpus: &Corpus,
    filtered: &FilteredFrameSet,
    init: &Model,
    cfg: &TrainingConfig,
) -> Result<StageOutput> {
    filtered.check(corpus)?;
    let positives = (0..corpus.len()).filter(|&i| corpus.is_positive(i)).count();
    let items: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            corpus.reports[i].polyp_sentences.len() == 1 && !filtered.retained[i].is_empty()
        })
        .collect();
    if positives > items.len() {
        log::info!(
            "stage 2 uses {} single-polyp cases, excluding {} other positive cases",
            items.len(),
            positives - items.len()
        );
    }
    let mut model = init.clone();
    let stats = run_epochs(
        &mut model,
        cfg,
        &items,
        false,
        |m, tape, vars, batch, rng| {
            let frames: Vec<&[f64]> = batch
                .iter()
                .map(|&i| corpus.cases[i].images[pick(rng, &filtered.retained[i])].as_slice())
                .collect();
            let texts: Vec<&str> = batch
                .iter()
                .map(|&i| corpus.reports[i].polyp_sentences[0].text.as_str())
                .collect();
            let x = tape.constant(&m.vision.frames_tensor(&frames)?);
            let v = m.vision.forward(tape, &vars.vision, x)?;
            let t = m.text.forward(tape, &vars.text, &texts)?;
            let (sv, st) = cosine_similarity_matrices(tape, v, t)?;
            if cfg.morphology_targets {
                // image- and text-side attributes both come from the finding
                let attrs: Vec<AttributeVector> = batch
                    .iter()
                    .map(|&i| corpus.reports[i].polyp_sentences[0].attributes.clone())
                    .collect();
                let (mv, mt) = morphology_targets(&attrs, &attrs)?;
                morph_loss(tape, &sv, &st, &mv, &mt, cfg.temperature)
            } else {
                detection_loss(tape, &sv, &st, cfg.temperature)
            }
        },
    )?;
    Ok(StageOutput {
        checkpoint: checkpoint(StageTag::Stage2, &model, cfg, corpus)?,
        report: StageReport {
            stage: StageTag::Stage2,
            seed: cfg.seed,
            epoch_losses: stats.losses,
            cases_used: items.len(),
            cases_excluded: positives - items.len(),
            batches_skipped: stats.skipped,
        },
    })
}

/// Patient embeddings for a batch, built on `tape`.
pub fn patient_embeddings(
    model: &Model,
    tape: &mut Tape,
    vars: &ModelVars,
    corpus: &Corpus,
    filtered: &FilteredFrameSet,
    batch: &[usize],
    use_attention: bool,
) -> Result<Vec<PatientEmbedding>> {
    let mut frames: Vec<&[f64]> = Vec::new();
    let mut texts: Vec<&str> = Vec::new();
    let mut spans = Vec::with_capacity(batch.len());
    for &i in batch {
        let (f0, t0) = (frames.len(), texts.len());
        frames.extend(
            filtered.retained[i]
                .iter()
                .map(|&k| corpus.cases[i].images[k].as_slice()),
        );
        texts.extend(
            corpus.reports[i]
                .polyp_sentences
                .iter()
                .map(|p| p.text.as_str()),
        );
        spans.push((f0, frames.len(), t0, texts.len()));
    }
    let x = tape.constant(&model.vision.frames_tensor(&frames)?);
    let v = model.vision.forward(tape, &vars.vision, x)?;
    let t = model.text.forward(tape, &vars.text, &texts)?;
    let block = if use_attention {
        Some(vars.cross_attention.ok_or_else(|| {
            Error::Config("cross-attention requested but the model has no attention block".into())
        })?)
    } else {
        None
    };
    batch
        .iter()
        .zip(spans)
        .map(|(&i, (f0, f1, t0, t1))| {
            let vi = tape.slice_rows(v, f0, f1)?;
            let ti = tape.slice_rows(t, t0, t1)?;
            let (ov, ot) = match &block {
                Some(b) => (
                    cross_attend(tape, b, vi, ti)?,
                    cross_attend(tape, b, ti, vi)?,
                ),
                None => (vi, ti),
            };
            aggregate_patient(tape, ov, ot, &corpus.attributes(i))
        })
        .collect()
}

/// Patient-level loss for a batch: union soft targets, or one-hot when
/// morphology targets are disabled.
pub fn patient_loss(
    tape: &mut Tape,
    patients: &[PatientEmbedding],
    morphology: bool,
    temperature: f64,
) -> Result<Var> {
    if morphology {
        return union_loss(tape, patients, temperature);
    }
    if patients.len() < 2 {
        return Err(Error::DegenerateBatch { n: patients.len() });
    }
    let vs: Vec<Var> = patients.iter().map(|p| p.v_hat).collect();
    let ts: Vec<Var> = patients.iter().map(|p| p.t_hat).collect();
    let v = tape.stack_rows(&vs)?;
    let t = tape.stack_rows(&ts)?;
    let (sv, st) = cosine_similarity_matrices(tape, v, t)?;
    let y = TargetMatrix::one_hot(patients.len());
    morph_loss(tape, &sv, &st, &y, &y, temperature)
}

/// Unification over all positive cases with kept frames.
pub fn stage3_train(
    corpus: &Corpus,
    filtered: &FilteredFrameSet,
    init: &Model,
    model_cfg: &ModelConfig,
    cfg: &TrainingConfig,
) -> Result<StageOutput> {
    filtered.check(corpus)?;
    let positives: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.is_positive(i))
        .collect();
    let items: Vec<usize> = positives
        .iter()
        .copied()
        .filter(|&i| !filtered.retained[i].is_empty())
        .collect();
    if items.len() < positives.len() {
        log::warn!(
            "stage 3 excludes {} patient(s) without kept frames",
            positives.len() - items.len()
        );
    }
    let mut model = init.clone();
    if cfg.cross_attention {
        model.add_cross_attention(
            model_cfg.attention_init_noise,
            &mut stream_rng(cfg.seed, "attention-init", 0),
        );
    }
    let stats = run_epochs(
        &mut model,
        cfg,
        &items,
        cfg.cross_attention,
        |m, tape, vars, batch, _| {
            let patients =
                patient_embeddings(m, tape, vars, corpus, filtered, batch, cfg.cross_attention)?;
            patient_loss(tape, &patients, cfg.morphology_targets, cfg.temperature)
        },
    )?;
    Ok(StageOutput {
        checkpoint: checkpoint(StageTag::Stage3, &model, cfg, corpus)?,
        report: StageReport {
            stage: StageTag::Stage3,
            seed: cfg.seed,
            epoch_losses: stats.losses,
            cases_used: items.len(),
            cases_excluded: positives.len() - items.len(),
            batches_skipped: stats.skipped,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub stage1: TrainingConfig,
    pub stage2: TrainingConfig,
    pub stage3: TrainingConfig,
    /// Seed for parameter initialization and the negative-frame draw.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            stage1: TrainingConfig::stage(1),
            stage2: TrainingConfig::stage(2),
            stage3: TrainingConfig::stage(3),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_fingerprint: Option<String>,
    pub init_seed: u64,
    pub stages: Vec<StageReport>,
    pub filter: FilterSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Round 1, round 2, stage 2 and stage 3, in that order.
    pub checkpoints: Vec<StageCheckpoint>,
    pub filtered: FilteredFrameSet,
    pub manifest: RunManifest,
}

impl RunOutput {
    pub fn checkpoint(&self, stage: StageTag) -> Option<&StageCheckpoint> {
        self.checkpoints.iter().find(|c| c.stage == stage)
    }
}

/// Resolves the prevalence estimate: configured value, else the corpus's
/// measured polyp-frame prevalence.
pub fn resolve_prevalence(cfg: &TrainingConfig, corpus: &Corpus) -> Result<f64> {
    match cfg.prevalence_estimate {
        Some(p) => Ok(p),
        None => {
            let p = corpus_stats(&corpus.cases)?.polyp_frame_prevalence;
            if p > 0.0 {
                Ok(p)
            } else {
                Err(Error::Config(
                    "no prevalence_estimate given and the corpus has no polyp frames".into(),
                ))
            }
        }
    }
}

/// Stage 1 (both rounds and the filter).
pub fn run_stage1(
    corpus: &Corpus,
    init: &Model,
    cfg: &PipelineConfig,
) -> Result<(StageOutput, FilteredFrameSet, StageOutput)> {
    let r1 = stage1_round1(corpus, init, &cfg.stage1)?;
    let r1_model = r1.checkpoint.model();
    let scores = score_corpus(&r1_model, corpus, cfg.stage1.temperature)?;
    let prevalence = resolve_prevalence(&cfg.stage1, corpus)?;
    let filtered = prevalence_filter(&scores, prevalence, corpus, cfg.seed)?;
    let r2 = stage1_round2(corpus, &filtered, &r1_model, &cfg.stage1)?;
    Ok((r1, filtered, r2))
}

pub fn initial_model(corpus: &Corpus, cfg: &PipelineConfig) -> Model {
    Model::init(
        corpus.image_dim(),
        corpus.vocabulary(),
        &cfg.model,
        cfg.seed,
    )
}

/// Round 1 → filter → round 2 → stage 2 → stage 3.
pub fn run_all(corpus: &Corpus, cfg: &PipelineConfig) -> Result<RunOutput> {
    let init = initial_model(corpus, cfg);
    let (r1, filtered, r2) = run_stage1(corpus, &init, cfg)?;
    let s2 = stage2_train(corpus, &filtered, &r2.checkpoint.model(), &cfg.stage2)?;
    let s3 = stage3_train(
        corpus,
        &filtered,
        &s2.checkpoint.model(),
        &cfg.model,
        &cfg.stage3,
    )?;
    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT.to_string(),
        run_fingerprint: None,
        init_seed: cfg.seed,
        stages: vec![r1.report, r2.report, s2.report, s3.report],
        filter: filter_summary(&filtered, corpus),
    };
    Ok(RunOutput {
        checkpoints: vec![r1.checkpoint, r2.checkpoint, s2.checkpoint, s3.checkpoint],
        filtered,
        manifest,
    })
}
