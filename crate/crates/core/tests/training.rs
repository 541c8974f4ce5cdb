mod common;

use endoalign::model::{Model, StageTag};
use endoalign::pipeline::{
    filter_summary, initial_model, prevalence_filter, retained_count, run_all, run_stage1,
    score_corpus, stage1_round1, stage2_train, stage3_train, FilteredFrameSet, PipelineConfig,
    TrainingConfig,
};
use endoalign::records::{sample_attributes, GeneratorConfig, World};
use endoalign::schema::AttributeSchema;
use endoalign::seed::stream_rng;

fn stage(n: u8, epochs: usize, lr: f64) -> TrainingConfig {
    TrainingConfig {
        epochs,
        warmup_epochs: 2.min(epochs),
        learning_rate: lr,
        seed: 40 + u64::from(n),
        ..TrainingConfig::stage(n)
    }
}

fn pipeline(epochs: usize) -> PipelineConfig {
    PipelineConfig {
        stage1: TrainingConfig {
            prevalence_estimate: Some(0.15),
            ..stage(1, epochs, 2e-3)
        },
        stage2: stage(2, epochs, 5e-4),
        stage3: stage(3, epochs, 5e-4),
        seed: 3,
        ..PipelineConfig::default()
    }
}

fn generator(num_cases: usize, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        num_cases,
        seed,
        ..Default::default()
    }
}

#[test]
fn run_all_smoke() {
    let corpus = common::corpus(&generator(20, 1));
    let out = run_all(&corpus, &pipeline(2)).unwrap();
    let tags: Vec<StageTag> = out.checkpoints.iter().map(|c| c.stage).collect();
    assert_eq!(
        tags,
        [
            StageTag::Stage1Round1,
            StageTag::Stage1Round2,
            StageTag::Stage2,
            StageTag::Stage3
        ]
    );
    for c in &out.checkpoints {
        c.validate().unwrap();
    }
    assert!(out
        .checkpoint(StageTag::Stage3)
        .unwrap()
        .cross_attention
        .is_some());
    assert_eq!(out.manifest.stages.len(), 4);
    assert!(out
        .manifest
        .stages
        .iter()
        .all(|s| s.epoch_losses.len() == 2));
}

#[test]
fn same_seed_same_run() {
    let corpus = common::corpus(&generator(30, 2));
    let a = run_all(&corpus, &pipeline(2)).unwrap();
    let b = run_all(&corpus, &pipeline(2)).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.manifest, b.manifest);
    assert_eq!(a.filtered, b.filtered);
    let mut other = pipeline(2);
    other.stage1.seed += 1;
    let c = run_all(&corpus, &other).unwrap();
    assert_ne!(a.checkpoints[0], c.checkpoints[0]);
}

#[test]
fn stage1_loss_approaches_its_floor() {
    // Every frame of a positive case shows a polyp, so the labels are clean.
    let corpus = common::corpus(&GeneratorConfig {
        polyp_frame_prevalence: 1.0,
        ..generator(200, 3)
    });
    let cfg = PipelineConfig::default();
    let init = initial_model(&corpus, &cfg);
    let out = stage1_round1(&corpus, &init, &stage(1, 15, 2e-3)).unwrap();
    let losses = &out.report.epoch_losses;
    let floor = common::stage1_floor(&corpus, 32, 0);
    let (first, last) = (losses[0], *losses.last().unwrap());
    eprintln!("stage 1: first {first:.4} last {last:.4} floor {floor:.4}");
    assert!(last - floor <= 0.5 * (first - floor));
}

#[test]
fn filter_keeps_prevalence_share_per_case() {
    let corpus = common::corpus(&generator(60, 4));
    let init = initial_model(&corpus, &PipelineConfig::default());
    let scores = score_corpus(&init, &corpus, 0.07).unwrap();
    let f = prevalence_filter(&scores, 0.3, &corpus, 9).unwrap();
    for (i, case) in corpus.cases.iter().enumerate() {
        let kept = &f.retained[i];
        let expect = if corpus.is_positive(i) {
            retained_count(0.3, case.num_frames())
        } else {
            1
        };
        assert_eq!(kept.len(), expect);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        if corpus.is_positive(i) {
            let worst_kept = kept
                .iter()
                .map(|&k| scores[i][k])
                .fold(f64::INFINITY, f64::min);
            let best_dropped = (0..case.num_frames())
                .filter(|k| !kept.contains(k))
                .map(|k| scores[i][k])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(worst_kept >= best_dropped);
        }
    }
}

#[test]
fn cleansing_concentrates_polyp_frames() {
    let corpus = common::corpus(&generator(200, 5));
    let cfg = pipeline(15);
    let init = initial_model(&corpus, &cfg);
    let (_, filtered, _) = run_stage1(&corpus, &init, &cfg).unwrap();
    let s = filter_summary(&filtered, &corpus);
    eprintln!("purity {:.3} base rate {:.3}", s.purity, s.base_rate);
    assert!(s.purity >= 2.0 * s.base_rate);
}

/// Mean embedding cosine between two held-out frames drawn with the same
/// attribute vector, minus that between frames with different vectors.
fn attribute_gap(model: &Model, g: &GeneratorConfig) -> f64 {
    let schema = AttributeSchema::default();
    let world = World::new(g, &schema).unwrap();
    let mut rng = stream_rng(g.seed, "attribute-gap", 0);
    let profiles = 60;
    let mut frames = Vec::new();
    for _ in 0..profiles {
        let a = sample_attributes(&schema, 1, &mut rng).unwrap();
        frames.push(world.polyp_frame(&a, &mut rng));
        frames.push(world.polyp_frame(&a, &mut rng));
    }
    let e = model.embed_frames(&frames).unwrap();
    let cos = |i: usize, j: usize| {
        e.row(i)
            .iter()
            .zip(e.row(j))
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let same = (0..profiles).map(|p| cos(2 * p, 2 * p + 1)).sum::<f64>() / profiles as f64;
    let mut diff = 0.0;
    let mut n = 0.0;
    for p in 0..profiles {
        for q in p + 1..profiles {
            diff += cos(2 * p, 2 * q + 1);
            n += 1.0;
        }
    }
    same - diff / n
}

// Soft targets only ask `softmax(S/τ)` to follow attribute overlap, and
// random profiles share about a third of their bits, so the optimum keeps
// different-profile pairs within a few multiples of τ of same-profile
// pairs. One-hot targets push every other pair away.
#[test]
fn attunement_separates_attribute_profiles() {
    let g = generator(300, 6);
    let corpus = common::corpus(&g);
    let cfg = pipeline(10);
    let init = initial_model(&corpus, &cfg);
    let (_, filtered, r2) = run_stage1(&corpus, &init, &cfg).unwrap();
    let before = r2.checkpoint.model();
    let base = attribute_gap(&before, &g);
    for mc in [false, true] {
        let c = TrainingConfig {
            morphology_targets: mc,
            ..stage(2, 60, 1e-3)
        };
        let after = stage2_train(&corpus, &filtered, &before, &c)
            .unwrap()
            .checkpoint
            .model();
        let gap = attribute_gap(&after, &g);
        eprintln!("MC {mc}: attribute gap {base:.3} -> {gap:.3}");
        if mc {
            assert!(gap >= 0.05 && gap > base);
        } else {
            assert!(gap >= 0.1);
        }
    }
}

#[test]
fn unification_reduces_excess_patient_loss() {
    let corpus = common::corpus(&generator(200, 7));
    let filtered = FilteredFrameSet {
        retained: corpus
            .cases
            .iter()
            .map(|c| (0..c.num_frames()).filter(|&k| c.frame_labels[k]).collect())
            .collect(),
        ..FilteredFrameSet::all_frames(&corpus)
    };
    let init = initial_model(&corpus, &PipelineConfig::default());
    for ca in [false, true] {
        let cfg = TrainingConfig {
            cross_attention: ca,
            ..stage(3, 30, 5e-4)
        };
        let out = stage3_train(&corpus, &filtered, &init, &Default::default(), &cfg).unwrap();
        let trained = out.checkpoint.model();
        let mut start = init.clone();
        if ca {
            start.add_cross_attention(0.01, &mut stream_rng(cfg.seed, "attention-init", 0));
        }
        let before = common::patient_excess_loss(&start, &corpus, &filtered, 8, ca);
        let after = common::patient_excess_loss(&trained, &corpus, &filtered, 8, ca);
        eprintln!("CA {ca}: excess loss {before:.4} -> {after:.4}");
        assert!(after <= 0.7 * before);
    }
}
