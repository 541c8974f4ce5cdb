//! Component ablations scored on the malignancy task.
//!
//! A variant is a `+`-joined set of flags: `SP` (single-polyp attunement),
//! `MP` (multi-polyp unification), `MC` (attribute soft targets instead of
//! one-hot) and `CA` (cross-attention instead of plain averaging). `BASE` is
//! the cleansing-stage model alone.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, malignancy_task, Setting};
use crate::model::Model;
use crate::pipeline::{
    initial_model, run_stage1, stage2_train, stage3_train, Corpus, FilteredFrameSet, PipelineConfig,
};
use crate::records::generate_corpus;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub single_polyp: bool,
    pub multi_polyp: bool,
    pub morphology: bool,
    pub cross_attention: bool,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut v = Variant {
            name: s.to_string(),
            single_polyp: false,
            multi_polyp: false,
            morphology: false,
            cross_attention: false,
        };
        if s != "BASE" {
            for flag in s.split('+') {
                let slot = match flag {
                    "SP" => &mut v.single_polyp,
                    "MP" => &mut v.multi_polyp,
                    "MC" => &mut v.morphology,
                    "CA" => &mut v.cross_attention,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown variant flag `{flag}` in `{s}`"
                        )))
                    }
                };
                if *slot {
                    return Err(Error::Config(format!("flag `{flag}` repeated in `{s}`")));
                }
                *slot = true;
            }
        }
        if v.cross_attention && !v.multi_polyp {
            return Err(Error::Config(format!("`{s}`: CA needs MP")));
        }
        if v.morphology && !(v.single_polyp || v.multi_polyp) {
            return Err(Error::Config(format!("`{s}`: MC needs SP or MP")));
        }
        Ok(v)
    }
}

pub fn parse_variants<S: AsRef<str>>(names: &[S]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Err(Error::EmptyInput("ablation variants"));
    }
    names.iter().map(|n| n.as_ref().parse()).collect()
}

/// Trains the stages a variant enables on top of the cleansing model.
pub fn train_variant(
    corpus: &Corpus,
    filtered: &FilteredFrameSet,
    base: &Model,
    cfg: &PipelineConfig,
    v: &Variant,
) -> Result<Model> {
    let mut model = base.clone();
    if v.single_polyp {
        let mut c = cfg.stage2.clone();
        c.morphology_targets = v.morphology;
        model = stage2_train(corpus, filtered, &model, &c)?
            .checkpoint
            .model();
    }
    if v.multi_polyp {
        let mut c = cfg.stage3.clone();
        c.morphology_targets = v.morphology;
        c.cross_attention = v.cross_attention;
        model = stage3_train(corpus, filtered, &model, &cfg.model, &c)?
            .checkpoint
            .model();
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub setting: String,
    pub auroc: f64,
    pub aupr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    /// Zero-shot first, then one entry per few-shot ratio.
    pub scores: Vec<Score>,
}

impl AblationRow {
    pub fn zero_shot_auroc(&self) -> f64 {
        self.scores[0].auroc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn rows_for<'a>(&'a self, variant: &'a str) -> impl Iterator<Item = &'a AblationRow> + 'a {
        self.rows.iter().filter(move |r| r.variant.name == variant)
    }

    /// Seeds on which `a` scores a strictly higher zero-shot AUROC than `b`.
    pub fn wins(&self, a: &str, b: &str) -> usize {
        self.seeds
            .iter()
            .filter(|&&s| {
                let get = |n: &str| {
                    self.rows_for(n)
                        .find(|r| r.seed == s)
                        .map(AblationRow::zero_shot_auroc)
                };
                matches!((get(a), get(b)), (Some(x), Some(y)) if x > y)
            })
            .count()
    }

    /// Seed-averaged table, one row per variant in first-seen order.
    pub fn to_markdown(&self) -> String {
        let mut names: Vec<&Variant> = Vec::new();
        for r in &self.rows {
            if !names.iter().any(|v| v.name == r.variant.name) {
                names.push(&r.variant);
            }
        }
        let settings: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.scores.iter().map(|s| s.setting.as_str()).collect())
            .unwrap_or_default();
        let mut out = String::from("| Variant | SP | MP | MC | CA |");
        for metric in ["AUROC", "AUPR"] {
            for s in &settings {
                let _ = write!(out, " {metric} {s} |");
            }
        }
        out.push_str("\n|---|---|---|---|---|");
        out.push_str(&"---|".repeat(2 * settings.len()));
        out.push('\n');
        let mark = |b: bool| if b { "✓" } else { "" };
        for v in names {
            let rows: Vec<&AblationRow> = self.rows_for(&v.name).collect();
            let _ = write!(
                out,
                "| {} | {} | {} | {} | {} |",
                v.name,
                mark(v.single_polyp),
                mark(v.multi_polyp),
                mark(v.morphology),
                mark(v.cross_attention)
            );
            for pick in [|s: &Score| s.auroc, |s: &Score| s.aupr] {
                for k in 0..settings.len() {
                    let mean =
                        rows.iter().map(|r| pick(&r.scores[k])).sum::<f64>() / rows.len() as f64;
                    let _ = write!(out, " {:.2} |", 100.0 * mean);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and scores every variant for every seed in `run.ablation.seeds`.
/// The cleansing stage is shared by all variants of one seed.
pub fn run_ablation(run: &RunConfig, variants: &[Variant]) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::EmptyInput("ablation variants"));
    }
    let schema = run.schema()?;
    let mut settings = vec![Setting::ZeroShot];
    for &r in &run.ablation.few_shot_ratios {
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!(
                "few-shot ratio must lie in (0, 1), got {r}"
            )));
        }
        settings.push(Setting::FewShot(r));
    }
    let mut rows = Vec::new();
    for &seed in &run.ablation.seeds {
        let rc = run.with_seed(seed).resolved();
        rc.validate()?;
        let corpus = Corpus::parse(generate_corpus(&rc.generator, &schema)?, &schema)?;
        let pipeline = run.with_seed(seed).pipeline();
        let init = initial_model(&corpus, &pipeline);
        let (_, filtered, round2) = run_stage1(&corpus, &init, &pipeline)?;
        let base = round2.checkpoint.model();
        let task = malignancy_task(
            &rc.generator,
            &schema,
            rc.eval.malignancy_positives,
            rc.eval.malignancy_negatives,
            rc.eval.seed,
        )?;
        for v in variants {
            log::info!("ablation seed {seed}: {}", v.name);
            let model = train_variant(&corpus, &filtered, &base, &pipeline, v)?;
            let scores = settings
                .iter()
                .map(|&s| {
                    let m = evaluate(&model, &task, s, pipeline.stage3.temperature, &rc.eval)?;
                    Ok(Score {
                        setting: m.setting,
                        auroc: m.auroc,
                        aupr: m.aupr,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(AblationRow {
                variant: v.clone(),
                seed,
                scores,
            });
        }
    }
    Ok(AblationReport {
        fingerprint: None,
        seeds: run.ablation.seeds.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_table_variants() {
        let v: Variant = "SP+MP+MC+CA".parse().unwrap();
        assert!(v.single_polyp && v.multi_polyp && v.morphology && v.cross_attention);
        let b: Variant = "BASE".parse().unwrap();
        assert!(!b.single_polyp && !b.morphology);
        assert!("SP+XX".parse::<Variant>().is_err());
        assert!("SP+CA".parse::<Variant>().is_err());
        assert!("MC".parse::<Variant>().is_err());
        assert!("SP+SP".parse::<Variant>().is_err());
        assert!(parse_variants::<&str>(&[]).is_err());
    }

    #[test]
    fn markdown_has_one_line_per_variant() {
        let v: Variant = "SP".parse().unwrap();
        let row = |seed, auroc| AblationRow {
            variant: v.clone(),
            seed,
            scores: vec![Score {
                setting: "zero-shot".into(),
                auroc,
                aupr: 0.5,
            }],
        };
        let r = AblationReport {
            fingerprint: None,
            seeds: vec![0, 1],
            rows: vec![row(0, 0.6), row(1, 0.8)],
        };
        let md = r.to_markdown();
        assert_eq!(md.lines().count(), 3);
        assert!(md
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("| SP | ✓ |  |  |  | 70.00 | 50.00 |"));
    }
}
