//! Small trainable image and text encoders into a shared embedding space.
//!
//! The image encoder is `normalize(tanh(x W1 + b1) W2 + b2)`. The text
//! encoder averages token embeddings (bag of tokens) and applies one affine
//! projection before normalization, so word order never matters.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sorted token list; index 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = sentences
            .into_iter()
            .flat_map(|s| tokenize(s.as_ref()))
            .collect();
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(set.into_iter().filter(|t| t != UNK_TOKEN));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, token: &str) -> usize {
        self.tokens[1..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map(|i| i + 1)
            .unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn uniform_tensor(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Rows of an embedding matrix, normalized unless stated otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub matrix: Tensor,
    pub normalized: bool,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct VisionVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl VisionEncoder {
    pub fn init(input_dim: usize, hidden_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        let k1 = 1.0 / (input_dim as f64).sqrt();
        let k2 = 1.0 / (hidden_dim as f64).sqrt();
        Self {
            w1: uniform_tensor(input_dim, hidden_dim, k1, rng),
            b1: uniform_tensor(1, hidden_dim, k1, rng),
            w2: uniform_tensor(hidden_dim, embed_dim, k2, rng),
            b2: uniform_tensor(1, embed_dim, k2, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> VisionVars {
        VisionVars {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    /// Stacks frames into an `N × p` constant, checking their dimension.
    pub fn frames_tensor<F: AsRef<[f64]>>(&self, frames: &[F]) -> Result<Tensor> {
        let p = self.input_dim();
        if let Some(f) = frames.iter().find(|f| f.as_ref().len() != p) {
            return Err(Error::shape("encode_images", &[p], &[f.as_ref().len()]));
        }
        Tensor::from_rows(frames)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &VisionVars, frames: Var) -> Result<Var> {
        let h = tape.matmul(frames, vars.w1)?;
        let h = tape.add_row(h, vars.b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, vars.w2)?;
        let o = tape.add_row(o, vars.b2)?;
        tape.l2_normalize_rows(o)
    }

    pub fn write_grads(&mut self, tape: &Tape, vars: &VisionVars) -> Result<()> {
        tape.write_grad(vars.w1, &mut self.w1)?;
        tape.write_grad(vars.b1, &mut self.b1)?;
        tape.write_grad(vars.w2, &mut self.w2)?;
        tape.write_grad(vars.b2, &mut self.b2)
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub vocabulary: Vocabulary,
    pub embedding: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct TextVars {
    embedding: Var,
    proj_w: Var,
    proj_b: Var,
}

impl TextEncoder {
    pub fn init(
        vocabulary: Vocabulary,
        hidden_dim: usize,
        embed_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let v = vocabulary.len();
        Self {
            embedding: uniform_tensor(v, hidden_dim, 1.0, rng),
            proj_w: uniform_tensor(hidden_dim, embed_dim, k, rng),
            proj_b: uniform_tensor(1, embed_dim, k, rng),
            vocabulary,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.proj_w.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> TextVars {
        TextVars {
            embedding: tape.leaf(&self.embedding),
            proj_w: tape.leaf(&self.proj_w),
            proj_b: tape.leaf(&self.proj_b),
        }
    }

    /// `N × |V|` matrix whose row `i` holds token frequencies of sentence `i`.
    pub fn bag_matrix<S: AsRef<str>>(&self, sentences: &[S]) -> Result<Tensor> {
        let v = self.vocabulary.len();
        let mut data = vec![0.0; sentences.len() * v];
        for (i, s) in sentences.iter().enumerate() {
            let tokens = tokenize(s.as_ref());
            if tokens.is_empty() {
                return Err(Error::EmptyText { index: i });
            }
            let w = 1.0 / tokens.len() as f64;
            for t in tokens {
                data[i * v + self.vocabulary.index(&t)] += w;
            }
        }
        Tensor::new(vec![sentences.len(), v], data)
    }

    pub fn forward<S: AsRef<str>>(
        &self,
        tape: &mut Tape,
        vars: &TextVars,
        sentences: &[S],
    ) -> Result<Var> {
        if sentences.is_empty() {
            return Err(Error::EmptyInput("encode_texts"));
        }
        let bag = tape.constant(&self.bag_matrix(sentences)?);
        let pooled = tape.matmul(bag, vars.embedding)?;
        let o = tape.matmul(pooled, vars.proj_w)?;
        let o = tape.add_row(o, vars.proj_b)?;
        tape.l2_normalize_rows(o)
    }

    pub fn write_grads(&mut self, tape: &Tape, vars: &TextVars) -> Result<()> {
        tape.write_grad(vars.embedding, &mut self.embedding)?;
        tape.write_grad(vars.proj_w, &mut self.proj_w)?;
        tape.write_grad(vars.proj_b, &mut self.proj_b)
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.embedding, &mut self.proj_w, &mut self.proj_b]
    }

    pub fn params(&self) -> [&Tensor; 3] {
        [&self.embedding, &self.proj_w, &self.proj_b]
    }
}

/// Inference-only image encoding.
pub fn encode_images<F: AsRef<[f64]>>(enc: &VisionEncoder, frames: &[F]) -> Result<EmbeddingBatch> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("encode_images"));
    }
    let mut tape = Tape::new();
    let vars = enc.bind(&mut tape);
    let x = tape.constant(&enc.frames_tensor(frames)?);
    let out = enc.forward(&mut tape, &vars, x)?;
    Ok(EmbeddingBatch {
        matrix: tape.tensor(out),
        normalized: true,
    })
}

/// Inference-only text encoding.
pub fn encode_texts<S: AsRef<str>>(enc: &TextEncoder, sentences: &[S]) -> Result<EmbeddingBatch> {
    let mut tape = Tape::new();
    let vars = enc.bind(&mut tape);
    let out = enc.forward(&mut tape, &vars, sentences)?;
    Ok(EmbeddingBatch {
        matrix: tape.tensor(out),
        normalized: true,
    })
}
