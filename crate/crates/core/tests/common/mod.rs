//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use endoalign::seed::Rng;
use endoalign::tensor::{Tape, Tensor, Var};
use rand::Rng as _;

pub fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn unit_rows(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = random_tensor(rng, rows, cols, 1.0);
    for r in t.data_mut().chunks_mut(cols) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    t
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone)]
enum Node {
    Leaf(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    MeanRows(usize),
    Slice(usize, usize, usize),
    Stack(Vec<usize>),
    Normalize(usize),
    Softmax(usize),
}

/// A random expression over the tape's differentiable ops, replayable on
/// perturbed leaves.
#[derive(Debug, Clone)]
pub struct Program {
    pub leaves: Vec<Tensor>,
    nodes: Vec<Node>,
    shapes: Vec<(usize, usize)>,
    /// Scalar readout: soft cross-entropy against these targets, else a
    /// weighted sum with these weights.
    readout: Readout,
}

#[derive(Debug, Clone)]
enum Readout {
    Weighted(Tensor),
    CrossEntropy(Tensor, f64),
}

impl Program {
    pub fn random(rng: &mut Rng) -> Self {
        let mut p = Program {
            leaves: Vec::new(),
            nodes: Vec::new(),
            shapes: Vec::new(),
            readout: Readout::Weighted(Tensor::scalar(0.0)),
        };
        let r = rng.random_range(2..=4);
        let c = rng.random_range(2..=4);
        p.leaf(rng, r, c);
        let ops = rng.random_range(3..=8);
        for _ in 0..ops {
            let a = p.nodes.len() - 1;
            let (r, c) = p.shapes[a];
            let node = match rng.random_range(0..12) {
                0 => {
                    let k = rng.random_range(2..=4);
                    let b = p.leaf(rng, c, k);
                    (Node::MatMul(a, b), (r, k))
                }
                1 => (Node::Transpose(a), (c, r)),
                2 => {
                    let b = p.leaf(rng, r, c);
                    (Node::Add(a, b), (r, c))
                }
                3 => {
                    let b = p.leaf(rng, 1, c);
                    (Node::AddRow(a, b), (r, c))
                }
                4 => {
                    let b = p.leaf(rng, r, c);
                    (Node::Mul(a, b), (r, c))
                }
                5 => (Node::Scale(a, rng.random_range(-2.0..2.0)), (r, c)),
                6 => (Node::Tanh(a), (r, c)),
                7 if r > 1 => (Node::MeanRows(a), (1, c)),
                8 if r > 1 => {
                    let s = rng.random_range(0..r);
                    let e = rng.random_range(s + 1..=r);
                    (Node::Slice(a, s, e), (e - s, c))
                }
                9 if r < 6 => {
                    let k = rng.random_range(1..=2);
                    let b = p.leaf(rng, k, c);
                    (Node::Stack(vec![a, b]), (r + p.shapes[b].0, c))
                }
                10 => (Node::Normalize(a), (r, c)),
                _ => (Node::Softmax(a), (r, c)),
            };
            p.nodes.push(node.0);
            p.shapes.push(node.1);
        }
        let (r, c) = *p.shapes.last().unwrap();
        p.readout = if rng.random_bool(0.3) {
            let mut t = random_tensor(rng, r, c, 1.0);
            for row in t.data_mut().chunks_mut(c) {
                row.iter_mut().for_each(|x| *x = x.abs() + 0.05);
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            Readout::CrossEntropy(t, rng.random_range(0.2..1.5))
        } else {
            Readout::Weighted(random_tensor(rng, r, c, 1.0))
        };
        p
    }

    fn leaf(&mut self, rng: &mut Rng, r: usize, c: usize) -> usize {
        self.leaves.push(random_tensor(rng, r, c, 1.0));
        self.nodes.push(Node::Leaf(self.leaves.len() - 1));
        self.shapes.push((r, c));
        self.nodes.len() - 1
    }

    /// Builds the program on a fresh tape; returns leaf vars and the loss.
    pub fn build(&self, leaves: &[Tensor]) -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let mut vals: Vec<Var> = Vec::new();
        let mut leaf_vars = Vec::new();
        for node in &self.nodes {
            let v = match node {
                Node::Leaf(i) => {
                    let v = tape.leaf(&leaves[*i].clone().with_grad(true));
                    leaf_vars.push(v);
                    v
                }
                Node::MatMul(a, b) => tape.matmul(vals[*a], vals[*b]).unwrap(),
                Node::Transpose(a) => tape.transpose(vals[*a]).unwrap(),
                Node::Add(a, b) => tape.add(vals[*a], vals[*b]).unwrap(),
                Node::AddRow(a, b) => tape.add_row(vals[*a], vals[*b]).unwrap(),
                Node::Mul(a, b) => tape.mul(vals[*a], vals[*b]).unwrap(),
                Node::Scale(a, c) => tape.scale(vals[*a], *c),
                Node::Tanh(a) => tape.tanh(vals[*a]),
                Node::MeanRows(a) => tape.mean_rows(vals[*a]).unwrap(),
                Node::Slice(a, s, e) => tape.slice_rows(vals[*a], *s, *e).unwrap(),
                Node::Stack(parts) => {
                    let vs: Vec<Var> = parts.iter().map(|&i| vals[i]).collect();
                    tape.stack_rows(&vs).unwrap()
                }
                Node::Normalize(a) => tape.l2_normalize_rows(vals[*a]).unwrap(),
                Node::Softmax(a) => tape.softmax_rows(vals[*a]).unwrap(),
            };
            vals.push(v);
        }
        let out = *vals.last().unwrap();
        let loss = match &self.readout {
            Readout::Weighted(w) => {
                let w = tape.constant(w);
                let m = tape.mul(out, w).unwrap();
                tape.sum(m)
            }
            Readout::CrossEntropy(t, tau) => tape.soft_cross_entropy(out, t, *tau).unwrap(),
        };
        (tape, leaf_vars, loss)
    }

    pub fn loss(&self, leaves: &[Tensor]) -> f64 {
        let (tape, _, loss) = self.build(leaves);
        tape.scalar_value(loss)
    }

    /// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-6)` between the tape
    /// gradient and central differences with step `h`, over all leaves.
    /// The floor sits above difference round-off (about `1e-16 / h`), so a
    /// graph whose loss is constant compares as equal.
    pub fn gradient_error(&self, h: f64) -> f64 {
        let (mut tape, vars, loss) = self.build(&self.leaves);
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for (v, leaf) in vars.iter().zip(&self.leaves) {
            match tape.grad(*v) {
                Some(g) => analytic.extend_from_slice(g),
                None => analytic.extend(std::iter::repeat_n(0.0, leaf.len())),
            }
        }
        let mut numeric = Vec::new();
        let mut work = self.leaves.clone();
        for li in 0..work.len() {
            for k in 0..work[li].len() {
                let x = work[li].data()[k];
                work[li].data_mut()[k] = x + h;
                let up = self.loss(&work);
                work[li].data_mut()[k] = x - h;
                let down = self.loss(&work);
                work[li].data_mut()[k] = x;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-6)
    }
}

// ------------------------------------------------------------- contrastive

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE over a square similarity matrix, written from the
/// definition: mean over rows and over columns of `−s_ii/τ + log Σ exp(s/τ)`.
pub fn info_nce(s: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        rows += -s[i][i] / tau + lse((0..n).map(|j| s[i][j] / tau));
        cols += -s[i][i] / tau + lse((0..n).map(|j| s[j][i] / tau));
    }
    0.5 * (rows / n as f64 + cols / n as f64)
}

/// Soft-target version: `½ mean_i Σ_j −yv_ij log softmax(S_i·/τ)_j` plus
/// the same over columns of `S` with targets `yt`.
pub fn soft_info_nce(s: &[Vec<f64>], yv: &[Vec<f64>], yt: &[Vec<f64>], tau: f64) -> f64 {
    let n = s.len();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        let lr = lse((0..n).map(|j| s[i][j] / tau));
        let lc = lse((0..n).map(|j| s[j][i] / tau));
        for j in 0..n {
            rows -= yv[i][j] * (s[i][j] / tau - lr);
            cols -= yt[i][j] * (s[j][i] / tau - lc);
        }
    }
    0.5 * (rows / n as f64 + cols / n as f64)
}

// ----------------------------------------------------------------- metrics

/// Fraction of (positive, negative) pairs ranked correctly, ties counting
/// one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut good = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                good += 1.0;
            } else if scores[i] == scores[j] {
                good += 0.5;
            }
        }
    }
    good / pairs
}

/// Average precision: sum over distinct thresholds of recall gain times
/// precision, counting by brute force at each threshold.
pub fn aupr_thresholds(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let p = labels.iter().filter(|&&l| l).count();
    let mut prev_tp = 0usize;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s >= t && **l)
            .count();
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s >= t && !**l)
            .count();
        ap += (tp - prev_tp) as f64 * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    ap / p as f64
}

// --------------------------------------------------------- cross-attention

fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|i| {
            let mut s = 0.0;
            for (j, xj) in x.iter().enumerate() {
                s += w.get(i, j) * xj;
            }
            s
        })
        .collect()
}

/// Loop implementation: for each query `q`, weights
/// `softmax_j((W_Q q)·(W_K kv_j)/√d)` and output `Σ_j α_j W_V kv_j`.
pub fn attend_loops(
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    queries: &Tensor,
    kv: &Tensor,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = w_q.rows();
    let keys: Vec<Vec<f64>> = (0..kv.rows()).map(|j| mat_vec(w_k, kv.row(j))).collect();
    let values: Vec<Vec<f64>> = (0..kv.rows()).map(|j| mat_vec(w_v, kv.row(j))).collect();
    let mut alphas = Vec::new();
    let mut outs = Vec::new();
    for i in 0..queries.rows() {
        let q = mat_vec(w_q, queries.row(i));
        let logits: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let z = lse(logits.iter().copied());
        let alpha: Vec<f64> = logits.iter().map(|l| (l - z).exp()).collect();
        let mut out = vec![0.0; d];
        for (a, v) in alpha.iter().zip(&values) {
            out.iter_mut().zip(v).for_each(|(o, x)| *o += a * x);
        }
        alphas.push(alpha);
        outs.push(out);
    }
    (alphas, outs)
}

/// Row `i` of `W x_i` for every row of `x`, summing in index order.
pub fn project_rows(w: &Tensor, x: &Tensor) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|i| mat_vec(w, x.row(i))).collect()
}

// ------------------------------------------------------------ shared checks

use endoalign::model::{build_vocabulary, Model, ModelConfig};
use endoalign::objectives::{
    cosine_similarity_matrices, detection_loss, morph_loss, morphology_targets, CrossAttentionBlock,
};
use endoalign::pipeline::{patient_embeddings, patient_loss, Corpus, FilteredFrameSet};
use endoalign::records::{generate_corpus, GeneratorConfig};
use endoalign::schema::AttributeSchema;
use endoalign::seed::stream_rng;

pub fn corpus(cfg: &GeneratorConfig) -> Corpus {
    let schema = AttributeSchema::default();
    Corpus::parse(generate_corpus(cfg, &schema).unwrap(), &schema).unwrap()
}

/// Every case positive with exactly one polyp.
pub fn single_polyp_corpus(num_cases: usize, seed: u64) -> Corpus {
    corpus(&GeneratorConfig {
        num_cases,
        polyp_positive_rate: 1.0,
        multi_polyp_fraction: 0.0,
        seed,
        ..Default::default()
    })
}

/// Largest `|patient-level loss − single-polyp loss|` over batches of
/// single-polyp cases with one kept frame each and identity attention.
pub fn reduction_gap(seed: u64, batches: usize, morphology: bool) -> f64 {
    let corpus = single_polyp_corpus(8 * batches, seed);
    let mut model = Model::init(
        corpus.image_dim(),
        corpus.vocabulary(),
        &ModelConfig::default(),
        seed,
    );
    model.cross_attention = Some(CrossAttentionBlock::identity(model.embed_dim()));
    let mut filtered = FilteredFrameSet::all_frames(&corpus);
    let mut rng = stream_rng(seed, "reduction-frames", 0);
    for (kept, case) in filtered.retained.iter_mut().zip(&corpus.cases) {
        *kept = vec![rng.random_range(0..case.num_frames())];
    }
    let tau = 0.07;
    let mut worst = 0.0f64;
    for b in 0..batches {
        let batch: Vec<usize> = (8 * b..8 * (b + 1)).collect();

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let patients =
            patient_embeddings(&model, &mut tape, &vars, &corpus, &filtered, &batch, true).unwrap();
        let l3 = patient_loss(&mut tape, &patients, morphology, tau).unwrap();
        let l3 = tape.scalar_value(l3);

        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let frames: Vec<&[f64]> = batch
            .iter()
            .map(|&i| corpus.cases[i].images[filtered.retained[i][0]].as_slice())
            .collect();
        let texts: Vec<&str> = batch
            .iter()
            .map(|&i| corpus.reports[i].polyp_sentences[0].text.as_str())
            .collect();
        let x = tape.constant(&model.vision.frames_tensor(&frames).unwrap());
        let v = model.vision.forward(&mut tape, &vars.vision, x).unwrap();
        let t = model.text.forward(&mut tape, &vars.text, &texts).unwrap();
        let (sv, st) = cosine_similarity_matrices(&mut tape, v, t).unwrap();
        let l2 = if morphology {
            let attrs: Vec<_> = batch
                .iter()
                .map(|&i| corpus.reports[i].polyp_sentences[0].attributes.clone())
                .collect();
            let (mv, mt) = morphology_targets(&attrs, &attrs).unwrap();
            morph_loss(&mut tape, &sv, &st, &mv, &mt, tau).unwrap()
        } else {
            detection_loss(&mut tape, &sv, &st, tau).unwrap()
        };
        worst = worst.max((l3 - tape.scalar_value(l2)).abs());
    }
    worst
}

/// Largest `|library − oracle|` symmetric InfoNCE over random unit batches.
pub fn info_nce_gap(seed: u64, trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..trials {
        let mut rng = stream_rng(seed, "info-nce", k);
        let n = rng.random_range(2..=16);
        let d = rng.random_range(2..=12);
        let v = unit_rows(&mut rng, n, d);
        let t = unit_rows(&mut rng, n, d);
        let mut tape = Tape::new();
        let (vv, tv) = (tape.constant(&v), tape.constant(&t));
        let (sv, st) = cosine_similarity_matrices(&mut tape, vv, tv).unwrap();
        let l = detection_loss(&mut tape, &sv, &st, 0.07).unwrap();
        let s: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| v.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        worst = worst.max((tape.scalar_value(l) - info_nce(&s, 0.07)).abs());
    }
    worst
}

/// Whether one-hot targets through the soft-target loss reproduce the
/// detection loss bit for bit on every trial.
pub fn one_hot_matches_detection(seed: u64, trials: u64) -> bool {
    use endoalign::objectives::TargetMatrix;
    (0..trials).all(|k| {
        let mut rng = stream_rng(seed, "one-hot", k);
        let n = rng.random_range(2..=16);
        let v = unit_rows(&mut rng, n, 8);
        let t = unit_rows(&mut rng, n, 8);
        let mut tape = Tape::new();
        let (vv, tv) = (tape.constant(&v), tape.constant(&t));
        let (sv, st) = cosine_similarity_matrices(&mut tape, vv, tv).unwrap();
        let a = detection_loss(&mut tape, &sv, &st, 0.07).unwrap();
        let y = TargetMatrix::one_hot(n);
        let b = morph_loss(&mut tape, &sv, &st, &y, &y, 0.07).unwrap();
        tape.scalar_value(a).to_bits() == tape.scalar_value(b).to_bits()
    })
}

/// Random score/label instance with at least one of each class; roughly
/// half the instances draw scores from a small grid to force ties.
pub fn metric_instance(seed: u64, k: u64) -> (Vec<f64>, Vec<bool>) {
    let mut rng = stream_rng(seed, "metric-instance", k);
    let n = rng.random_range(2..=200);
    let tied = rng.random_bool(0.5);
    let levels = rng.random_range(2..=6);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[n - 1] = false;
    let scores = (0..n)
        .map(|_| {
            if tied {
                f64::from(rng.random_range(0..levels)) / f64::from(levels)
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    (scores, labels)
}

/// A model with a perturbed attention block, for serialization checks.
pub fn model_with_attention(seed: u64) -> Model {
    let vocab = build_vocabulary(["Polyp 1: size-class=small; color=pale."]);
    let mut m = Model::init(40, vocab, &ModelConfig::default(), seed);
    m.add_cross_attention(0.3, &mut stream_rng(seed, "ca", 0));
    m
}

/// Expected lowest achievable stage-1 epoch loss: within a batch every
/// frame of a class scores the same against its class's sentence, so a
/// row can do no better than `log n_c`, with `n_c` its class count.
pub fn stage1_floor(corpus: &Corpus, batch_size: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let mut items: Vec<bool> = (0..corpus.len()).map(|i| corpus.is_positive(i)).collect();
    let mut rng = stream_rng(seed, "floor", 0);
    let trials = 200;
    let mut total = 0.0;
    for _ in 0..trials {
        items.shuffle(&mut rng);
        let batches: Vec<&[bool]> = items.chunks(batch_size).filter(|b| b.len() >= 2).collect();
        let mut epoch = 0.0;
        for b in &batches {
            let n = b.len() as f64;
            let pos = b.iter().filter(|&&x| x).count() as f64;
            let neg = n - pos;
            let term = |c: f64| if c > 0.0 { c / n * c.ln() } else { 0.0 };
            epoch += term(pos) + term(neg);
        }
        total += epoch / batches.len() as f64;
    }
    total / trials as f64
}

/// Mean over batches of patient-level loss minus the entropy of its
/// targets, which is the part training can remove.
pub fn patient_excess_loss(
    model: &Model,
    corpus: &Corpus,
    filtered: &FilteredFrameSet,
    batch_size: usize,
    use_attention: bool,
) -> f64 {
    use endoalign::report::union_attributes;
    let items: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.is_positive(i) && !filtered.retained[i].is_empty())
        .collect();
    let mut total = 0.0;
    let mut count = 0;
    for batch in items.chunks(batch_size).filter(|b| b.len() >= 2) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let patients = patient_embeddings(
            model,
            &mut tape,
            &vars,
            corpus,
            filtered,
            batch,
            use_attention,
        )
        .unwrap();
        let loss = patient_loss(&mut tape, &patients, true, 0.07).unwrap();
        let unions: Vec<_> = batch
            .iter()
            .map(|&i| {
                let attrs: Vec<_> = corpus.reports[i]
                    .polyp_sentences
                    .iter()
                    .map(|p| p.attributes.clone())
                    .collect();
                union_attributes(&attrs).unwrap()
            })
            .collect();
        let mut entropy = 0.0;
        for a in &unions {
            let row: Vec<f64> = unions.iter().map(|b| a.cosine(b).unwrap()).collect();
            let s: f64 = row.iter().sum();
            entropy -= row
                .iter()
                .map(|x| x / s)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
        }
        total += tape.scalar_value(loss) - entropy / unions.len() as f64;
        count += 1;
    }
    total / count as f64
}

/// Cases whose parsed findings differ from the generator's ground truth,
/// over `n` generated cases.
pub fn parse_mismatches(n: usize, seed: u64) -> usize {
    use endoalign::report::parse_case;
    let schema = AttributeSchema::default();
    let cfg = GeneratorConfig {
        num_cases: n,
        image_dim: schema.total_bits(),
        frames_per_case_range: (3, 3),
        filler_sentences: 3,
        seed,
        ..Default::default()
    };
    generate_corpus(&cfg, &schema)
        .unwrap()
        .iter()
        .filter(|c| {
            let Ok(p) = parse_case(c, &schema) else {
                return true;
            };
            let attrs: Vec<_> = p.polyp_sentences.iter().map(|s| &s.attributes).collect();
            let texts: Vec<_> = p.polyp_sentences.iter().map(|s| &s.text).collect();
            attrs != c.sentence_attributes.iter().collect::<Vec<_>>()
                || texts != c.sentences.iter().collect::<Vec<_>>()
                || p.discarded.len() + c.sentences.len() != c.report.len()
        })
        .count()
}
