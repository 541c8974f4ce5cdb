mod common;

use endoalign::eval::stratified_split;
use endoalign::json::format_f64;
use endoalign::metrics::auroc;
use endoalign::objectives::{
    attention_weights, cosine_similarity_matrices, cross_attend, CrossAttentionBlock,
};
use endoalign::pipeline::prompt_probabilities;
use endoalign::records::{sample_attributes, FILLER_SENTENCES};
use endoalign::report::{parse_report, render_polyp_sentence, union_attributes};
use endoalign::schema::{AttributeSchema, AttributeVector};
use endoalign::seed::rng_from;
use endoalign::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0..5.0f64, r * c)
            .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

fn attributes(polyps: usize) -> impl Strategy<Value = AttributeVector> {
    any::<u64>().prop_map(move |s| {
        sample_attributes(&AttributeSchema::default(), polyps, &mut rng_from(s)).unwrap()
    })
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..60usize).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                let last = l.len() - 1;
                l[last] = false;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(m in matrix(6, 6)) {
        let mut tape = Tape::new();
        let v = tape.constant(&m);
        let s = tape.softmax_rows(v).unwrap();
        for row in tape.value(s).chunks(m.cols()) {
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_is_idempotent(m in matrix(6, 6)) {
        prop_assume!(m.data().chunks(m.cols()).all(|r| r.iter().any(|x| x.abs() > 1e-3)));
        let mut tape = Tape::new();
        let v = tape.constant(&m);
        let once = tape.l2_normalize_rows(v).unwrap();
        let twice = tape.l2_normalize_rows(once).unwrap();
        for (a, b) in tape.value(once).iter().zip(tape.value(twice)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for row in tape.value(once).chunks(m.cols()) {
            prop_assert!((row.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_similarities_are_bounded(a in matrix(6, 5), seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let (n, d) = (a.rows(), a.cols());
        let v = common::unit_rows(&mut rng, n, d);
        let t = common::unit_rows(&mut rng, n, d);
        let mut tape = Tape::new();
        let (vv, tv) = (tape.constant(&v), tape.constant(&t));
        let (sv, st) = cosine_similarity_matrices(&mut tape, vv, tv).unwrap();
        for &x in tape.value(sv.scores).iter().chain(tape.value(st.scores)) {
            prop_assert!(x.abs() <= 1.0 + 1e-12);
        }
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(tape.value(sv.scores)[i * n + j], tape.value(st.scores)[j * n + i]);
            }
        }
    }

    #[test]
    fn union_is_commutative_associative_idempotent(
        a in attributes(2), b in attributes(2), c in attributes(3),
    ) {
        let u = |xs: &[&AttributeVector]| union_attributes(&xs.iter().map(|x| (*x).clone()).collect::<Vec<_>>()).unwrap().bits;
        prop_assert_eq!(u(&[&a, &b]), u(&[&b, &a]));
        let ab = union_attributes(&[a.clone(), b.clone()]).unwrap();
        let bc = union_attributes(&[b.clone(), c.clone()]).unwrap();
        prop_assert_eq!(u(&[&ab, &c]), u(&[&a, &bc]));
        prop_assert_eq!(u(&[&a, &a]), a.bits.clone());
    }

    #[test]
    fn auroc_ignores_monotone_transforms((s, l) in scored_labels()) {
        let base = auroc(&s, &l).unwrap();
        let t: Vec<f64> = s.iter().map(|x| (x / 2.0).exp() * 3.0 + 1.0).collect();
        prop_assert_eq!(auroc(&t, &l).unwrap(), base);
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        prop_assert!((auroc(&s, &flipped).unwrap() - (1.0 - base)).abs() < 1e-12);
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auroc(&neg, &l).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    // Small temperatures saturate the probabilities to exactly 0 or 1 and
    // create ties, so the range stops where that cannot happen.
    #[test]
    fn zero_shot_auroc_ignores_temperature(
        seed in any::<u64>(), n in 4..40usize, tau_a in 0.2..2.0f64, tau_b in 0.2..2.0f64,
    ) {
        let mut rng = rng_from(seed);
        let v = common::unit_rows(&mut rng, n, 6);
        let prompts = common::unit_rows(&mut rng, 2, 6);
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let a = auroc(&prompt_probabilities(&v, &prompts, tau_a), &labels).unwrap();
        let b = auroc(&prompt_probabilities(&v, &prompts, tau_b), &labels).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rendered_findings_parse_back(
        findings in prop::collection::vec(attributes(1), 0..4),
        fillers in prop::collection::vec(0..FILLER_SENTENCES.len(), 0..3),
    ) {
        let schema = AttributeSchema::default();
        let mut raw: Vec<String> = fillers.iter().map(|&f| FILLER_SENTENCES[f].to_string()).collect();
        let lead = raw.len();
        raw.extend(findings.iter().enumerate().map(|(i, a)| render_polyp_sentence(&schema, i + 1, a)));
        let parsed = parse_report(&raw, &schema).unwrap();
        prop_assert_eq!(parsed.polyp_sentences.len(), findings.len());
        for (p, a) in parsed.polyp_sentences.iter().zip(&findings) {
            prop_assert_eq!(&p.attributes, a);
        }
        prop_assert_eq!(&parsed.discarded[..], &raw[..lead]);
    }

    #[test]
    fn identity_attention_stays_in_convex_hull(q in matrix(3, 4), seed in any::<u64>(), l in 1..6usize) {
        let d = q.cols();
        let kv = common::random_tensor(&mut rng_from(seed), l, d, 3.0);
        let block = CrossAttentionBlock::identity(d);
        let mut tape = Tape::new();
        let vars = block.bind(&mut tape);
        let (qv, kvv) = (tape.constant(&q), tape.constant(&kv));
        let out = cross_attend(&mut tape, &vars, qv, kvv).unwrap();
        let alpha = attention_weights(&block, &q, &kv).unwrap();
        for (i, row) in tape.value(out).chunks(d).enumerate() {
            prop_assert!(alpha.row(i).iter().all(|&a| a >= 0.0));
            prop_assert!((alpha.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (k, &x) in row.iter().enumerate() {
                let col = (0..l).map(|j| kv.get(j, k));
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn stratified_split_partitions(labels in prop::collection::vec(any::<bool>(), 1..80), r in 0.05..0.95f64, seed in any::<u64>()) {
        let (train, test) = stratified_split(&labels, r, seed);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for class in [false, true] {
            let n = labels.iter().filter(|&&l| l == class).count();
            let m = train.iter().filter(|&&i| labels[i] == class).count();
            if n >= 2 {
                prop_assert!(m >= 1 && m < n);
            } else {
                prop_assert_eq!(m, n);
            }
        }
    }

    #[test]
    fn json_floats_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let back: f64 = format_f64(x).parse().unwrap();
        prop_assert_eq!(back.to_bits(), x.to_bits());
    }
}
