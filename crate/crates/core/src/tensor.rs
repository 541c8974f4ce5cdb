//! Dense row-major `f64` tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tensor`] is a plain value: shape, data and an optional gradient buffer.
//! Differentiation happens on a [`Tape`]: tensors are bound to it as leaves,
//! every operation appends a node, and [`Tape::backward`] walks the nodes in
//! reverse insertion order. A tape is built fresh for every forward pass.
//!
//! ```
//! use endoalign::tensor::{Tape, Tensor};
//!
//! let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad(true);
//! let mut tape = Tape::new();
//! let xv = tape.leaf(&x);
//! let sq = tape.mul(xv, xv).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(xv).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows whose Euclidean norm falls below this are rejected by
/// [`Tape::l2_normalize_rows`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Tolerance on target-row sums accepted by [`Tape::soft_cross_entropy`].
pub const TARGET_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds an `n × m` matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("from_rows"));
        }
        let m = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * m);
        for r in rows {
            let r = r.as_ref();
            if r.len() != m {
                return Err(Error::shape("from_rows", &[m], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), m], data)
    }

    /// A `1 × m` row.
    pub fn row_vector(data: Vec<f64>) -> Self {
        let m = data.len();
        Self {
            shape: vec![1, m],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.cols();
        &self.data[i * m..(i + 1) * m]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n, m] => Ok((*n, *m)),
            _ => Err(Error::Rank {
                op,
                shape: self.shape.clone(),
            }),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sum(Var),
    MeanRows(Var),
    SliceRows(Var, usize),
    StackRows(Vec<Var>),
    NormalizeRows(Var, Vec<f64>),
    SoftmaxRows(Var),
    SoftCrossEntropy {
        scores: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
        temperature: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [n, m] => Ok((*n, *m)),
        _ => Err(Error::Rank {
            op,
            shape: shape.to_vec(),
        }),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Binds a tensor to the tape, inheriting its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Binds a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Adds the gradient held for `v` into the tensor's own buffer.
    pub fn write_grad(&self, v: Var, into: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => into.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// Clears all node gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a), "transpose")?;
        let out = transpose_raw(self.value(a), m, n);
        let rg = self.needs(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds a `1 × m` row to every row of an `n × m` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "add_row")?;
        let (r, m2) = dims2(self.shape(row), "add_row")?;
        if r != 1 || m != m2 {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let bias = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += bias[j];
            }
        }
        let rg = self.needs(&[a, row]);
        Ok(self.push(vec![n, m], out, Op::AddRow(a, row), rg))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.needs(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    /// Column means of an `n × m` matrix, as a `1 × m` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "mean_rows")?;
        if n == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let v = self.value(a);
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += v[i * m + j];
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.needs(&[a]);
        Ok(self.push(vec![1, m], out, Op::MeanRows(a), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "slice_rows")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_rows", &[n, m], &[start, end]));
        }
        let out = self.value(a)[start * m..end * m].to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(vec![end - start, m], out, Op::SliceRows(a, start), rg))
    }

    /// Concatenates matrices with equal column counts along the row axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("stack_rows"));
        }
        let (_, m) = dims2(self.shape(parts[0]), "stack_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, mp) = dims2(self.shape(p), "stack_rows")?;
            if mp != m {
                return Err(Error::shape(
                    "stack_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.needs(parts);
        Ok(self.push(vec![rows, m], out, Op::StackRows(parts.to_vec()), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "l2_normalize_rows")?;
        let v = self.value(a);
        let mut out = vec![0.0; n * m];
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &v[i * m..(i + 1) * m];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    op: "l2_normalize_rows",
                });
            }
            if norm < NORM_EPSILON {
                return Err(Error::DegenerateRow { row: i });
            }
            for j in 0..m {
                out[i * m + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(vec![n, m], out, Op::NormalizeRows(a, norms), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = dims2(self.shape(a), "softmax_rows")?;
        let v = self.value(a);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            softmax_into(&v[i * m..(i + 1) * m], 1.0, &mut out[i * m..(i + 1) * m]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(vec![n, m], out, Op::SoftmaxRows(a), rg))
    }

    /// Mean over rows of the cross-entropy between each target row and the
    /// softmax of the matching score row divided by `temperature`.
    pub fn soft_cross_entropy(
        &mut self,
        scores: Var,
        targets: &Tensor,
        temperature: f64,
    ) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let (n, m) = dims2(self.shape(scores), "soft_cross_entropy")?;
        if targets.shape() != [n, m] {
            return Err(Error::shape(
                "soft_cross_entropy",
                self.shape(scores),
                targets.shape(),
            ));
        }
        if n == 0 {
            return Err(Error::EmptyInput("soft_cross_entropy"));
        }
        let s = self.value(scores);
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "soft_cross_entropy",
            });
        }
        let t = targets.data();
        for i in 0..n {
            let row = &t[i * m..(i + 1) * m];
            let sum: f64 = row.iter().sum();
            if row.iter().any(|x| *x < 0.0 || !x.is_finite())
                || (sum - 1.0).abs() > TARGET_SUM_TOLERANCE
            {
                return Err(Error::TargetNormalization { row: i, sum });
            }
        }
        let mut probs = vec![0.0; n * m];
        let mut total = 0.0;
        for i in 0..n {
            let row = &s[i * m..(i + 1) * m];
            let lse = log_sum_exp(row, temperature);
            let mut ce = 0.0;
            for j in 0..m {
                let log_p = row[j] / temperature - lse;
                probs[i * m + j] = log_p.exp();
                let w = t[i * m + j];
                if w != 0.0 {
                    ce -= w * log_p;
                }
            }
            total += ce;
        }
        let loss = total / n as f64;
        let rg = self.needs(&[scores]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftCrossEntropy {
                scores,
                targets: t.to_vec(),
                probs,
                temperature,
            },
            rg,
        ))
    }

    /// Accumulates d(loss)/d(node) into every `requires_grad` ancestor of a
    /// scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: self.node(loss).shape.clone(),
            });
        }
        self.backward_done = true;
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            accumulate(&mut self.nodes[id].grad, &g);
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    accumulate(&mut grads[a.0], &matmul_raw(g, &bt, m, n, k));
                }
                if wants(b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    accumulate(&mut grads[b.0], &matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                accumulate(&mut grads[a.0], &transpose_raw(g, n, m));
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, row) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(row) {
                    let m = self.shape(*row)[1];
                    let mut colsum = vec![0.0; m];
                    for (idx, x) in g.iter().enumerate() {
                        colsum[idx % m] += x;
                    }
                    accumulate(&mut grads[row.0], &colsum);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a.0], &ga);
                }
                if wants(b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&node.value)
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                accumulate(&mut grads[a.0], &ga);
            }
            Op::MeanRows(a) => {
                let n = self.shape(*a)[0];
                let inv = 1.0 / n as f64;
                let ga: Vec<f64> = (0..n).flat_map(|_| g.iter().map(|x| x * inv)).collect();
                accumulate(&mut grads[a.0], &ga);
            }
            Op::SliceRows(a, start) => {
                let m = self.shape(*a)[1];
                let mut ga = vec![0.0; self.value(*a).len()];
                ga[start * m..start * m + g.len()].copy_from_slice(g);
                accumulate(&mut grads[a.0], &ga);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(p) {
                        accumulate(&mut grads[p.0], &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::NormalizeRows(a, norms) => {
                let m = node.shape[1];
                let y = &node.value;
                let mut ga = vec![0.0; y.len()];
                for (i, norm) in norms.iter().enumerate() {
                    let r = i * m..(i + 1) * m;
                    let dot: f64 = g[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in r {
                        ga[j] = (g[j] - y[j] * dot) / norm;
                    }
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::SoftmaxRows(a) => {
                let m = node.shape[1];
                let y = &node.value;
                let mut ga = vec![0.0; y.len()];
                for i in 0..node.shape[0] {
                    let r = i * m..(i + 1) * m;
                    let dot: f64 = g[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in r {
                        ga[j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate(&mut grads[a.0], &ga);
            }
            Op::SoftCrossEntropy {
                scores,
                targets,
                probs,
                temperature,
            } => {
                let (n, m) = (self.shape(*scores)[0], self.shape(*scores)[1]);
                let coef = g[0] / (n as f64 * temperature);
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    let r = i * m..(i + 1) * m;
                    let mass: f64 = targets[r.clone()].iter().sum();
                    for j in r {
                        ga[j] = coef * (probs[j] * mass - targets[j]);
                    }
                }
                accumulate(&mut grads[scores.0], &ga);
            }
        }
    }
}

/// `log Σ_j exp(row[j] / temperature)`, stabilized by the row maximum.
pub fn log_sum_exp(row: &[f64], temperature: f64) -> f64 {
    let max = row
        .iter()
        .map(|x| x / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|x| (x / temperature - max).exp()).sum();
    max + s.ln()
}

fn softmax_into(row: &[f64], temperature: f64, out: &mut [f64]) {
    let max = row
        .iter()
        .map(|x| x / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x / temperature - max).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Plain matrix product without a tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}
