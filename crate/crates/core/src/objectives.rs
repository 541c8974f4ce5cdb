//! Contrastive objectives for the three training stages.
//!
//! All three losses share one shape: the mean of two soft cross-entropies,
//! image-to-text and text-to-image, over an `N × N` cosine-similarity
//! matrix. They differ only in their targets:
//!
//! * detection: one-hot diagonal targets,
//! * morphology: cosine similarity of the attribute vectors, row-normalized,
//! * union: the same as morphology, over per-patient OR-combined attributes
//!   and patient embeddings pooled after cross-attention.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::union_attributes;
use crate::schema::AttributeVector;
use crate::seed::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Allowed deviation from unit norm for rows entering a cosine similarity.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

#[derive(Debug, Clone, Copy)]
pub struct SimilarityMatrix {
    pub scores: Var,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetKind {
    OneHot,
    MorphologySoft,
    UnionSoft,
}

/// Row-stochastic `N × N` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub values: Tensor,
    pub kind: TargetKind,
}

impl TargetMatrix {
    pub fn one_hot(n: usize) -> Self {
        Self {
            values: Tensor::identity(n),
            kind: TargetKind::OneHot,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_unit_rows(tape: &Tape, v: Var) -> Result<()> {
    let shape = tape.shape(v);
    let m = shape.get(1).copied().unwrap_or(0);
    for (i, row) in tape.value(v).chunks(m.max(1)).enumerate() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Normalization { row: i, norm });
        }
    }
    Ok(())
}

/// `S(v→t) = V Tᵀ` and `S(t→v) = S(v→t)ᵀ` for unit-norm rows.
pub fn cosine_similarity_matrices(
    tape: &mut Tape,
    images: Var,
    texts: Var,
) -> Result<(SimilarityMatrix, SimilarityMatrix)> {
    if tape.shape(images) != tape.shape(texts) {
        return Err(Error::shape(
            "cosine_similarity_matrices",
            tape.shape(images),
            tape.shape(texts),
        ));
    }
    check_unit_rows(tape, images)?;
    check_unit_rows(tape, texts)?;
    let tt = tape.transpose(texts)?;
    let sv = tape.matmul(images, tt)?;
    let st = tape.transpose(sv)?;
    Ok((
        SimilarityMatrix {
            scores: sv,
            direction: Direction::ImageToText,
        },
        SimilarityMatrix {
            scores: st,
            direction: Direction::TextToImage,
        },
    ))
}

fn batch_size(tape: &Tape, s: &SimilarityMatrix) -> Result<usize> {
    match tape.shape(s.scores) {
        [n, m] if n == m => Ok(*n),
        other => Err(Error::Rank {
            op: "contrastive loss",
            shape: other.to_vec(),
        }),
    }
}

/// `½ [CE(S(v→t), M(v→t)) + CE(S(t→v), M(t→v))]`.
pub fn symmetric_loss(
    tape: &mut Tape,
    sv: &SimilarityMatrix,
    st: &SimilarityMatrix,
    mv: &TargetMatrix,
    mt: &TargetMatrix,
    temperature: f64,
) -> Result<Var> {
    let n = batch_size(tape, sv)?;
    if batch_size(tape, st)? != n {
        return Err(Error::shape(
            "contrastive loss",
            tape.shape(sv.scores),
            tape.shape(st.scores),
        ));
    }
    if n == 0 {
        return Err(Error::DegenerateBatch { n });
    }
    if n == 1 {
        log::warn!("contrastive loss on a batch of one has no negatives; loss is zero");
    }
    let a = tape.soft_cross_entropy(sv.scores, &mv.values, temperature)?;
    let b = tape.soft_cross_entropy(st.scores, &mt.values, temperature)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// Image/text matching loss with one-hot diagonal targets.
pub fn detection_loss(
    tape: &mut Tape,
    sv: &SimilarityMatrix,
    st: &SimilarityMatrix,
    temperature: f64,
) -> Result<Var> {
    let n = batch_size(tape, sv)?;
    let y = TargetMatrix::one_hot(n);
    symmetric_loss(tape, sv, st, &y, &y, temperature)
}

fn cosine_targets(
    rows: &[AttributeVector],
    cols: &[AttributeVector],
    kind: TargetKind,
) -> Result<TargetMatrix> {
    let n = rows.len();
    let mut values = vec![0.0; n * n];
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in cols.iter().enumerate() {
            values[i * n + j] = a.cosine(b)?;
        }
        let sum: f64 = values[i * n..(i + 1) * n].iter().sum();
        if !(sum > 0.0) {
            return Err(Error::InvalidAttribute(format!(
                "row {i} shares no attribute with any column"
            )));
        }
        values[i * n..(i + 1) * n]
            .iter_mut()
            .for_each(|x| *x /= sum);
    }
    Ok(TargetMatrix {
        values: Tensor::new(vec![n, n], values)?,
        kind,
    })
}

/// Soft targets from multi-hot attribute cosines, L1-normalized per row.
pub fn morphology_targets(
    image_attrs: &[AttributeVector],
    text_attrs: &[AttributeVector],
) -> Result<(TargetMatrix, TargetMatrix)> {
    check_attrs(image_attrs, text_attrs)?;
    Ok((
        cosine_targets(image_attrs, text_attrs, TargetKind::MorphologySoft)?,
        cosine_targets(text_attrs, image_attrs, TargetKind::MorphologySoft)?,
    ))
}

fn check_attrs(a: &[AttributeVector], b: &[AttributeVector]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("morphology_targets", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::DegenerateBatch { n: 0 });
    }
    let version = &a[0].schema_version;
    if a.iter().chain(b).any(|v| &v.schema_version != version) {
        return Err(Error::Schema("mixed schema versions in batch".into()));
    }
    if let Some(i) = a.iter().chain(b).position(AttributeVector::is_zero) {
        return Err(Error::InvalidAttribute(format!("vector {i} is all zero")));
    }
    Ok(())
}

pub fn morph_loss(
    tape: &mut Tape,
    sv: &SimilarityMatrix,
    st: &SimilarityMatrix,
    mv: &TargetMatrix,
    mt: &TargetMatrix,
    temperature: f64,
) -> Result<Var> {
    symmetric_loss(tape, sv, st, mv, mt, temperature)
}

/// Single-head attention projections, each `d × d`, applied to column
/// vectors (`W x`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionBlock {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttentionVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
}

impl CrossAttentionBlock {
    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Tensor::identity(d),
            w_k: Tensor::identity(d),
            w_v: Tensor::identity(d),
        }
    }

    /// Identity plus uniform noise in `[-noise, noise]`.
    pub fn near_identity(d: usize, noise: f64, rng: &mut Rng) -> Self {
        let mut perturb = |mut t: Tensor| {
            if noise > 0.0 {
                t.data_mut()
                    .iter_mut()
                    .for_each(|x| *x += rng.random_range(-noise..noise));
            }
            t
        };
        Self {
            w_q: perturb(Tensor::identity(d)),
            w_k: perturb(Tensor::identity(d)),
            w_v: perturb(Tensor::identity(d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> CrossAttentionVars {
        CrossAttentionVars {
            w_q: tape.leaf(&self.w_q),
            w_k: tape.leaf(&self.w_k),
            w_v: tape.leaf(&self.w_v),
        }
    }

    pub fn write_grads(&mut self, tape: &Tape, vars: &CrossAttentionVars) -> Result<()> {
        tape.write_grad(vars.w_q, &mut self.w_q)?;
        tape.write_grad(vars.w_k, &mut self.w_k)?;
        tape.write_grad(vars.w_v, &mut self.w_v)
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
    }

    pub fn params(&self) -> [&Tensor; 3] {
        [&self.w_q, &self.w_k, &self.w_v]
    }
}

/// Each query row attends over all key/value rows:
/// `α = softmax((Q W_Qᵀ)(KV W_Kᵀ)ᵀ / √d)`, output `α (KV W_Vᵀ)`.
pub fn cross_attend(
    tape: &mut Tape,
    block: &CrossAttentionVars,
    queries: Var,
    keys_values: Var,
) -> Result<Var> {
    let [l, d] = *tape.shape(keys_values) else {
        return Err(Error::Rank {
            op: "cross_attend",
            shape: tape.shape(keys_values).to_vec(),
        });
    };
    if l == 0 {
        return Err(Error::EmptyAttendee);
    }
    if tape.shape(queries).get(1) != Some(&d) || tape.shape(block.w_q) != [d, d] {
        return Err(Error::shape(
            "cross_attend",
            tape.shape(queries),
            tape.shape(keys_values),
        ));
    }
    let wq_t = tape.transpose(block.w_q)?;
    let wk_t = tape.transpose(block.w_k)?;
    let wv_t = tape.transpose(block.w_v)?;
    let q = tape.matmul(queries, wq_t)?;
    let k = tape.matmul(keys_values, wk_t)?;
    let v = tape.matmul(keys_values, wv_t)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let alpha = tape.softmax_rows(logits)?;
    tape.matmul(alpha, v)
}

/// Attention weights alone, for inspection.
pub fn attention_weights(
    block: &CrossAttentionBlock,
    queries: &Tensor,
    keys_values: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let wq = tape.constant(&block.w_q);
    let wk = tape.constant(&block.w_k);
    let q = tape.constant(queries);
    let kv = tape.constant(keys_values);
    let d = block.dim();
    let wq_t = tape.transpose(wq)?;
    let wk_t = tape.transpose(wk)?;
    let q = tape.matmul(q, wq_t)?;
    let k = tape.matmul(kv, wk_t)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let alpha = tape.softmax_rows(logits)?;
    Ok(tape.tensor(alpha))
}

/// Patient-level pair of `1 × d` unit embeddings plus OR-combined attributes.
#[derive(Debug, Clone)]
pub struct PatientEmbedding {
    pub v_hat: Var,
    pub t_hat: Var,
    pub union_attributes: AttributeVector,
}

fn mean_normalized(tape: &mut Tape, rows: Var) -> Result<Var> {
    let m = tape.mean_rows(rows)?;
    tape.l2_normalize_rows(m).map_err(|e| match e {
        Error::DegenerateRow { .. } => Error::DegenerateAggregate,
        other => other,
    })
}

pub fn aggregate_patient(
    tape: &mut Tape,
    attended_v: Var,
    attended_t: Var,
    attrs: &[AttributeVector],
) -> Result<PatientEmbedding> {
    if tape.shape(attended_v).first() == Some(&0) || tape.shape(attended_t).first() == Some(&0) {
        return Err(Error::EmptyInput("aggregate_patient"));
    }
    Ok(PatientEmbedding {
        v_hat: mean_normalized(tape, attended_v)?,
        t_hat: mean_normalized(tape, attended_t)?,
        union_attributes: union_attributes(attrs)?,
    })
}

/// Patient-level loss over stacked `V̂`, `T̂` with union-attribute targets.
pub fn union_loss(tape: &mut Tape, patients: &[PatientEmbedding], temperature: f64) -> Result<Var> {
    if patients.len() < 2 {
        return Err(Error::DegenerateBatch { n: patients.len() });
    }
    let vs: Vec<Var> = patients.iter().map(|p| p.v_hat).collect();
    let ts: Vec<Var> = patients.iter().map(|p| p.t_hat).collect();
    let v_hat = tape.stack_rows(&vs)?;
    let t_hat = tape.stack_rows(&ts)?;
    let (sv, st) = cosine_similarity_matrices(tape, v_hat, t_hat)?;
    let unions: Vec<AttributeVector> = patients
        .iter()
        .map(|p| p.union_attributes.clone())
        .collect();
    check_attrs(&unions, &unions)?;
    let mv = cosine_targets(&unions, &unions, TargetKind::UnionSoft)?;
    let mt = mv.clone();
    symmetric_loss(tape, &sv, &st, &mv, &mt, temperature)
}
