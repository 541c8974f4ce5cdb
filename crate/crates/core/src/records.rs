//! Synthetic colonoscopy records.
//!
//! Frames are feature vectors rather than pixels. Every corpus shares a fixed
//! geometry (its [`World`]): a background vector common to all frames and one
//! orthonormal signal direction per attribute bit. A frame showing a polyp is
//! `background + strength * Σ direction(bit) + noise` over the polyp's set
//! bits; a normal frame is `background + noise`.
//!
//! The world depends only on the seed, and each case draws from its own
//! sub-stream `(seed, index)`, so cases can be generated in any order and
//! held-out sets share the training corpus geometry.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::render_polyp_sentence;
use crate::schema::{AttributeSchema, AttributeVector, COUNT_ASPECT};
use crate::seed::{stream_rng, Rng};

/// Non-diagnostic sentences mixed into reports.
pub const FILLER_SENTENCES: &[&str] = &[
    "Bowel preparation was adequate.",
    "The scope was advanced to the cecum without difficulty.",
    "The ileocecal valve was identified.",
    "Withdrawal time exceeded six minutes.",
    "The patient tolerated the procedure well.",
    "Retroflexion in the rectum was performed.",
    "Mucosa appeared otherwise unremarkable.",
    "Sedation was administered by the anesthesia team.",
];

const NEGATIVE_FINDING: &str = "No polyps were identified.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_cases: usize,
    /// Inclusive range of frames per case.
    pub frames_per_case_range: (usize, usize),
    pub polyp_positive_rate: f64,
    /// Fraction of positive cases carrying more than one polyp.
    pub multi_polyp_fraction: f64,
    pub max_polyps: usize,
    /// Target fraction of frames showing a polyp within a positive case.
    pub polyp_frame_prevalence: f64,
    pub image_dim: usize,
    pub noise_std: f64,
    /// Length of each planted attribute direction.
    pub signal_strength: f64,
    /// Per-aspect multipliers on `signal_strength`; empty means all 1.
    pub aspect_signal_scale: Vec<f64>,
    pub background_norm: f64,
    pub filler_sentences: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_cases: 500,
            frames_per_case_range: (8, 24),
            polyp_positive_rate: 0.45,
            multi_polyp_fraction: 0.43,
            max_polyps: 3,
            polyp_frame_prevalence: 0.15,
            image_dim: 192,
            noise_std: 0.2,
            signal_strength: 1.0,
            aspect_signal_scale: Vec::new(),
            background_norm: 3.0,
            filler_sentences: 2,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let rate = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {x}")))
            }
        };
        rate("polyp_positive_rate", self.polyp_positive_rate)?;
        rate("multi_polyp_fraction", self.multi_polyp_fraction)?;
        rate("polyp_frame_prevalence", self.polyp_frame_prevalence)?;
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if self.image_dim < schema.total_bits() {
            return Err(Error::Config(format!(
                "image_dim {} is smaller than the {} attribute bits",
                self.image_dim,
                schema.total_bits()
            )));
        }
        let (lo, hi) = self.frames_per_case_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "frames_per_case_range ({lo}, {hi}) is empty or allows zero frames"
            )));
        }
        if self.max_polyps < 2 && self.multi_polyp_fraction > 0.0 {
            return Err(Error::Config(
                "max_polyps must be at least 2 when multi-polyp cases are requested".into(),
            ));
        }
        if hi < self.max_polyps {
            return Err(Error::Config(
                "frames_per_case_range must allow one frame per polyp".into(),
            ));
        }
        if !self.aspect_signal_scale.is_empty()
            && self.aspect_signal_scale.len() != schema.aspects.len()
        {
            return Err(Error::Config(format!(
                "aspect_signal_scale needs {} entries",
                schema.aspects.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicalCase {
    pub case_id: String,
    pub images: Vec<Vec<f64>>,
    /// Ground truth: whether each frame shows a polyp.
    pub frame_labels: Vec<bool>,
    /// Ground truth: which polyp (0-based) each frame shows.
    pub frame_polyps: Vec<Option<usize>>,
    /// Full raw report, filler included.
    pub report: Vec<String>,
    /// The per-polyp findings, one per polyp.
    pub sentences: Vec<String>,
    pub sentence_attributes: Vec<AttributeVector>,
    pub polyp_positive: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl MedicalCase {
    pub fn num_frames(&self) -> usize {
        self.images.len()
    }

    pub fn num_polyps(&self) -> usize {
        self.sentences.len()
    }

    pub fn check_invariants(&self, image_dim: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("case {}: {m}", self.case_id)));
        if self.images.is_empty() {
            return bad("no frames");
        }
        if self.images.iter().any(|f| f.len() != image_dim) {
            return bad("frame dimension mismatch");
        }
        if self.frame_labels.len() != self.images.len()
            || self.frame_polyps.len() != self.images.len()
        {
            return bad("per-frame labels do not match frame count");
        }
        if self.sentences.len() != self.sentence_attributes.len() {
            return bad("sentence/attribute count mismatch");
        }
        if self.polyp_positive != !self.sentences.is_empty() {
            return bad("polyp_positive disagrees with sentence count");
        }
        if self.polyp_positive && !self.frame_labels.iter().any(|&l| l) {
            return bad("positive case without a polyp frame");
        }
        Ok(())
    }
}

/// Geometry shared by every frame generated from one seed.
#[derive(Debug, Clone)]
pub struct World {
    pub background: Vec<f64>,
    /// One unit direction per attribute bit, mutually orthogonal.
    pub directions: Vec<Vec<f64>>,
    bit_scale: Vec<f64>,
    noise_std: f64,
}

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl World {
    pub fn new(cfg: &GeneratorConfig, schema: &AttributeSchema) -> Result<Self> {
        cfg.validate(schema)?;
        let mut rng = stream_rng(cfg.seed, "world", 0);
        let p = cfg.image_dim;
        let mut directions: Vec<Vec<f64>> = Vec::with_capacity(schema.total_bits());
        while directions.len() < schema.total_bits() {
            let mut v = gaussian(&mut rng, p);
            for d in &directions {
                let c = dot(&v, d);
                v.iter_mut().zip(d).for_each(|(x, y)| *x -= c * y);
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                directions.push(v);
            }
        }
        let mut background = gaussian(&mut rng, p);
        let norm = dot(&background, &background).sqrt();
        background
            .iter_mut()
            .for_each(|x| *x *= cfg.background_norm / norm);

        let mut bit_scale = Vec::with_capacity(schema.total_bits());
        for (a, aspect) in schema.aspects.iter().enumerate() {
            let s = cfg.aspect_signal_scale.get(a).copied().unwrap_or(1.0);
            bit_scale.extend(std::iter::repeat_n(
                cfg.signal_strength * s,
                aspect.values.len(),
            ));
        }
        Ok(Self {
            background,
            directions,
            bit_scale,
            noise_std: cfg.noise_std,
        })
    }

    pub fn image_dim(&self) -> usize {
        self.background.len()
    }

    pub fn normal_frame(&self, rng: &mut Rng) -> Vec<f64> {
        let noise = gaussian(rng, self.image_dim());
        self.background
            .iter()
            .zip(noise)
            .map(|(b, n)| b + self.noise_std * n)
            .collect()
    }

    pub fn polyp_frame(&self, attributes: &AttributeVector, rng: &mut Rng) -> Vec<f64> {
        let mut frame = self.normal_frame(rng);
        for (bit, _) in attributes.bits.iter().enumerate().filter(|(_, b)| **b != 0) {
            let s = self.bit_scale[bit];
            frame
                .iter_mut()
                .zip(&self.directions[bit])
                .for_each(|(f, d)| *f += s * d);
        }
        frame
    }
}

/// Draws one category per aspect; the count aspect follows `num_polyps`.
pub fn sample_attributes(
    schema: &AttributeSchema,
    num_polyps: usize,
    rng: &mut Rng,
) -> Result<AttributeVector> {
    let count_aspect = schema.aspect_index(COUNT_ASPECT);
    let assignment: Vec<usize> = schema
        .aspects
        .iter()
        .enumerate()
        .map(|(a, aspect)| {
            if Some(a) == count_aspect {
                usize::from(num_polyps > 1).min(aspect.values.len() - 1)
            } else {
                rng.random_range(0..aspect.values.len())
            }
        })
        .collect();
    schema.encode(&assignment)
}

fn generate_case(
    index: usize,
    cfg: &GeneratorConfig,
    schema: &AttributeSchema,
    world: &World,
    stream: &str,
) -> Result<MedicalCase> {
    let mut rng = stream_rng(cfg.seed, stream, index as u64);
    let (lo, hi) = cfg.frames_per_case_range;
    let k = rng.random_range(lo..=hi);
    let positive = rng.random::<f64>() < cfg.polyp_positive_rate;
    let num_polyps = if !positive {
        0
    } else if rng.random::<f64>() < cfg.multi_polyp_fraction {
        rng.random_range(2..=cfg.max_polyps)
    } else {
        1
    };

    let attributes = (0..num_polyps)
        .map(|_| sample_attributes(schema, num_polyps, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let mut frame_polyps: Vec<Option<usize>> = vec![None; k];
    if num_polyps > 0 {
        let target = (cfg.polyp_frame_prevalence * k as f64).round() as usize;
        let n_polyp_frames = target.max(num_polyps).min(k);
        let mut slots: Vec<usize> = (0..k).collect();
        slots.shuffle(&mut rng);
        for (j, &slot) in slots[..n_polyp_frames].iter().enumerate() {
            let polyp = if j < num_polyps {
                j
            } else {
                rng.random_range(0..num_polyps)
            };
            frame_polyps[slot] = Some(polyp);
        }
    }
    let images = frame_polyps
        .iter()
        .map(|fp| match fp {
            Some(p) => world.polyp_frame(&attributes[*p], &mut rng),
            None => world.normal_frame(&mut rng),
        })
        .collect();

    let sentences: Vec<String> = attributes
        .iter()
        .enumerate()
        .map(|(i, a)| render_polyp_sentence(schema, i + 1, a))
        .collect();

    let mut report = Vec::new();
    let fillers: Vec<&str> = FILLER_SENTENCES
        .choose_multiple(&mut rng, cfg.filler_sentences.min(FILLER_SENTENCES.len()))
        .copied()
        .collect();
    let lead = fillers.len().div_ceil(2);
    report.extend(fillers[..lead].iter().map(|s| s.to_string()));
    if sentences.is_empty() {
        report.push(NEGATIVE_FINDING.to_string());
    }
    report.extend(sentences.iter().cloned());
    report.extend(fillers[lead..].iter().map(|s| s.to_string()));

    Ok(MedicalCase {
        case_id: format!("{stream}-{index:06}"),
        images,
        frame_labels: frame_polyps.iter().map(Option::is_some).collect(),
        frame_polyps,
        report,
        sentences,
        sentence_attributes: attributes,
        polyp_positive: num_polyps > 0,
        fingerprint: None,
    })
}

/// Generates `cfg.num_cases` cases, ordered by index.
pub fn generate_corpus(
    cfg: &GeneratorConfig,
    schema: &AttributeSchema,
) -> Result<Vec<MedicalCase>> {
    let world = World::new(cfg, schema)?;
    (0..cfg.num_cases)
        .map(|i| generate_case(i, cfg, schema, &world, "case"))
        .collect()
}

/// Cases from a separate sub-stream over the same world, for held-out use.
pub fn generate_heldout(
    cfg: &GeneratorConfig,
    schema: &AttributeSchema,
    num_cases: usize,
) -> Result<Vec<MedicalCase>> {
    let world = World::new(cfg, schema)?;
    (0..num_cases)
        .map(|i| generate_case(i, cfg, schema, &world, "heldout"))
        .collect()
}

pub fn write_corpus(path: &Path, cases: &[MedicalCase]) -> Result<()> {
    crate::json::write_lines(path, cases)
}

pub fn read_corpus(path: &Path) -> Result<Vec<MedicalCase>> {
    crate::json::read_lines(path)
}

/// Schema sidecar written next to a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub version: String,
    pub schema: AttributeSchema,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub num_cases: usize,
    pub num_positive: usize,
    pub num_multi_polyp: usize,
    pub positive_rate: f64,
    /// Among positive cases.
    pub multi_polyp_fraction: f64,
    pub mean_frames_per_case: f64,
    /// Fraction of frames in positive cases that show a polyp.
    pub polyp_frame_prevalence: f64,
}

pub fn corpus_stats(cases: &[MedicalCase]) -> Result<StatsReport> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("corpus_stats"));
    }
    let n = cases.len();
    let positives: Vec<&MedicalCase> = cases.iter().filter(|c| c.polyp_positive).collect();
    let multi = positives.iter().filter(|c| c.num_polyps() > 1).count();
    let frames: usize = cases.iter().map(|c| c.num_frames()).sum();
    let pos_frames: usize = positives.iter().map(|c| c.num_frames()).sum();
    let polyp_frames: usize = positives
        .iter()
        .map(|c| c.frame_labels.iter().filter(|&&l| l).count())
        .sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(StatsReport {
        num_cases: n,
        num_positive: positives.len(),
        num_multi_polyp: multi,
        positive_rate: ratio(positives.len(), n),
        multi_polyp_fraction: ratio(multi, positives.len()),
        mean_frames_per_case: ratio(frames, n),
        polyp_frame_prevalence: ratio(polyp_frames, pos_frames),
    })
}
