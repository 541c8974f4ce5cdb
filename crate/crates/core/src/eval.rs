//! Downstream evaluation: zero-shot prompt scoring, frozen-feature linear
//! probes and embedding export.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::format_f64;
use crate::metrics::{aupr, auroc};
use crate::model::{Model, BENIGN_PROMPT, MALIGNANT_PROMPT};
use crate::pipeline::prompt_probabilities;
use crate::records::{sample_attributes, GeneratorConfig, World};
use crate::report::{NEGATIVE_SENTENCE, POSITIVE_SENTENCE};
use crate::schema::{AttributeSchema, MALIGNANCY_ASPECT, MALIGNANT_VALUE};
use crate::seed::stream_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Detection,
    Malignancy,
}

impl TaskKind {
    /// Positive and negative zero-shot prompts.
    pub fn prompts(self) -> (&'static str, &'static str) {
        match self {
            TaskKind::Detection => (POSITIVE_SENTENCE, NEGATIVE_SENTENCE),
            TaskKind::Malignancy => (MALIGNANT_PROMPT, BENIGN_PROMPT),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Detection => "detection",
            TaskKind::Malignancy => "malignancy",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" => Ok(TaskKind::Detection),
            "malignancy" => Ok(TaskKind::Malignancy),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting {
    ZeroShot,
    /// Linear probe trained on this fraction of each class.
    FewShot(f64),
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::ZeroShot => f.write_str("zero-shot"),
            Setting::FewShot(r) => write!(f, "few-shot:{r}"),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "zero-shot" {
            return Ok(Setting::ZeroShot);
        }
        let ratio = s
            .strip_prefix("few-shot:")
            .and_then(|r| r.parse::<f64>().ok())
            .ok_or_else(|| Error::Config(format!("unknown setting `{s}`")))?;
        if ratio > 0.0 && ratio < 1.0 {
            Ok(Setting::FewShot(ratio))
        } else {
            Err(Error::Config(format!(
                "train ratio must lie in (0, 1), got {ratio}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub frame: Vec<f64>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub kind: TaskKind,
    pub items: Vec<EvalItem>,
    pub prompt_pos: String,
    pub prompt_neg: String,
}

impl EvalTask {
    pub fn labels(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn frames(&self) -> Vec<&[f64]> {
        self.items.iter().map(|i| i.frame.as_slice()).collect()
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.items.iter().filter(|i| i.label).count();
        (pos, self.items.len() - pos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub detection_positives: usize,
    pub detection_negatives: usize,
    pub malignancy_positives: usize,
    pub malignancy_negatives: usize,
    pub probe_steps: usize,
    pub probe_learning_rate: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            detection_positives: 608,
            detection_negatives: 2308,
            malignancy_positives: 68,
            malignancy_negatives: 16,
            probe_steps: 500,
            probe_learning_rate: 0.1,
            seed: 0,
        }
    }
}

fn task_items(
    kind: TaskKind,
    positives: usize,
    negatives: usize,
    seed: u64,
    mut frame: impl FnMut(bool, &mut crate::seed::Rng) -> Result<Vec<f64>>,
) -> Result<Vec<EvalItem>> {
    let stream = format!("eval-{kind}");
    (0..negatives + positives)
        .map(|i| {
            let label = i >= negatives;
            let mut rng = stream_rng(seed, &stream, i as u64);
            Ok(EvalItem {
                id: format!("{kind}-{i:06}"),
                frame: frame(label, &mut rng)?,
                label,
            })
        })
        .collect()
}

fn polyp_count(gen: &GeneratorConfig, rng: &mut crate::seed::Rng) -> usize {
    if rng.random::<f64>() < gen.multi_polyp_fraction {
        2
    } else {
        1
    }
}

/// Normal frames against polyp frames, drawn from the generator's geometry.
pub fn detection_task(
    gen: &GeneratorConfig,
    schema: &AttributeSchema,
    positives: usize,
    negatives: usize,
    seed: u64,
) -> Result<EvalTask> {
    let world = World::new(gen, schema)?;
    let items = task_items(
        TaskKind::Detection,
        positives,
        negatives,
        seed,
        |label, rng| {
            if label {
                let n = polyp_count(gen, rng);
                Ok(world.polyp_frame(&sample_attributes(schema, n, rng)?, rng))
            } else {
                Ok(world.normal_frame(rng))
            }
        },
    )?;
    let (p, n) = TaskKind::Detection.prompts();
    Ok(EvalTask {
        kind: TaskKind::Detection,
        items,
        prompt_pos: p.into(),
        prompt_neg: n.into(),
    })
}

/// Polyp frames labelled by the malignancy aspect: positive when it takes
/// the malignant value, negative for any other value.
pub fn malignancy_task(
    gen: &GeneratorConfig,
    schema: &AttributeSchema,
    positives: usize,
    negatives: usize,
    seed: u64,
) -> Result<EvalTask> {
    let world = World::new(gen, schema)?;
    let aspect = schema
        .aspect_index(MALIGNANCY_ASPECT)
        .ok_or_else(|| Error::Schema(format!("schema lacks the `{MALIGNANCY_ASPECT}` aspect")))?;
    let malignant = schema
        .value_index(aspect, MALIGNANT_VALUE)
        .ok_or_else(|| Error::Schema(format!("`{MALIGNANCY_ASPECT}` lacks `{MALIGNANT_VALUE}`")))?;
    let others: Vec<usize> = (0..schema.aspects[aspect].values.len())
        .filter(|&v| v != malignant)
        .collect();
    if others.is_empty() {
        return Err(Error::Schema(format!(
            "`{MALIGNANCY_ASPECT}` needs a non-malignant value"
        )));
    }
    let offset = schema.offsets()[aspect];
    let items = task_items(
        TaskKind::Malignancy,
        positives,
        negatives,
        seed,
        |label, rng| {
            let n = polyp_count(gen, rng);
            let mut attrs = sample_attributes(schema, n, rng)?;
            let value = if label {
                malignant
            } else {
                others[rng.random_range(0..others.len())]
            };
            for v in 0..schema.aspects[aspect].values.len() {
                attrs.bits[offset + v] = u8::from(v == value);
            }
            Ok(world.polyp_frame(&attrs, rng))
        },
    )?;
    let (p, n) = TaskKind::Malignancy.prompts();
    Ok(EvalTask {
        kind: TaskKind::Malignancy,
        items,
        prompt_pos: p.into(),
        prompt_neg: n.into(),
    })
}

pub fn build_task(
    kind: TaskKind,
    gen: &GeneratorConfig,
    schema: &AttributeSchema,
    cfg: &EvalConfig,
) -> Result<EvalTask> {
    match kind {
        TaskKind::Detection => detection_task(
            gen,
            schema,
            cfg.detection_positives,
            cfg.detection_negatives,
            cfg.seed,
        ),
        TaskKind::Malignancy => malignancy_task(
            gen,
            schema,
            cfg.malignancy_positives,
            cfg.malignancy_negatives,
            cfg.seed,
        ),
    }
}

/// Positive-prompt probability per item.
pub fn zero_shot_scores(model: &Model, task: &EvalTask, temperature: f64) -> Result<Vec<f64>> {
    let v = model.embed_frames(&task.frames())?;
    let t = model.embed_texts(&[task.prompt_pos.as_str(), task.prompt_neg.as_str()])?;
    Ok(prompt_probabilities(&v, &t, temperature))
}

/// Held-out scores from a linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeScores {
    pub held_out: Vec<usize>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Per class, `round(ratio · n)` items (at least one, leaving at least one)
/// go to the training split.
pub fn stratified_split(labels: &[bool], ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, class) in [false, true].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut stream_rng(seed, "split", c as u64));
        let n = idx.len();
        let m = if n < 2 {
            n
        } else {
            ((ratio * n as f64).round() as usize).clamp(1, n - 1)
        };
        train.extend_from_slice(&idx[..m]);
        test.extend_from_slice(&idx[m..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression by full-batch gradient descent from zero weights.
/// Returns `(weights, bias)`.
pub fn fit_logistic(
    features: &Tensor,
    labels: &[bool],
    steps: usize,
    learning_rate: f64,
) -> (Vec<f64>, f64) {
    let (n, d) = (features.rows(), features.cols());
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut gw = vec![0.0; d];
    for _ in 0..steps {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let x = features.row(i);
            let z = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let r = sigmoid(z) - f64::from(u8::from(y));
            gw.iter_mut().zip(x).for_each(|(g, a)| *g += r * a);
            gb += r;
        }
        let scale = learning_rate / n as f64;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= scale * g);
        b -= scale * gb;
    }
    (w, b)
}

/// Per-dimension mean and standard deviation over the training rows; a
/// constant dimension keeps scale 1.
fn standardizer(embeddings: &Tensor, train: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = embeddings.cols();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        mean.iter_mut()
            .zip(embeddings.row(i))
            .for_each(|(m, x)| *m += x / n);
    }
    let mut var = vec![0.0; d];
    for &i in train {
        var.iter_mut()
            .zip(embeddings.row(i).iter().zip(&mean))
            .for_each(|(v, (x, m))| *v += (x - m) * (x - m) / n);
    }
    let scale = var
        .into_iter()
        .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

/// Frozen-encoder linear probe; scores the held-out items.
///
/// Features are standardized with training-split statistics, which keeps
/// the score an affine function of the embedding.
///
/// A class missing from the training split leaves nothing to separate, so
/// every held-out item gets the training split's positive rate.
pub fn few_shot_probe(
    model: &Model,
    task: &EvalTask,
    train_ratio: f64,
    seed: u64,
    steps: usize,
    learning_rate: f64,
) -> Result<ProbeScores> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Config(format!(
            "train ratio must lie in (0, 1), got {train_ratio}"
        )));
    }
    let labels = task.labels();
    let embeddings = model.embed_frames(&task.frames())?;
    probe_embeddings(
        &embeddings,
        &labels,
        train_ratio,
        seed,
        steps,
        learning_rate,
    )
}

pub fn probe_embeddings(
    embeddings: &Tensor,
    labels: &[bool],
    train_ratio: f64,
    seed: u64,
    steps: usize,
    learning_rate: f64,
) -> Result<ProbeScores> {
    if embeddings.rows() != labels.len() {
        return Err(Error::shape("probe", embeddings.shape(), &[labels.len()]));
    }
    let (train, test) = stratified_split(labels, train_ratio, seed);
    let train_labels: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
    let test_labels: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
    let positives = train_labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == train_labels.len() {
        log::warn!(
            "degenerate probe split: training split holds one class; using the majority score"
        );
        let rate = if train_labels.is_empty() {
            0.5
        } else {
            positives as f64 / train_labels.len() as f64
        };
        return Ok(ProbeScores {
            scores: vec![rate; test.len()],
            held_out: test,
            labels: test_labels,
        });
    }
    let (mean, scale) = standardizer(embeddings, &train);
    let standardize = |i: usize| -> Vec<f64> {
        embeddings
            .row(i)
            .iter()
            .zip(mean.iter().zip(&scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    };
    let rows: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
    let features = Tensor::from_rows(&rows)?;
    let (w, b) = fit_logistic(&features, &train_labels, steps, learning_rate);
    let scores = test
        .iter()
        .map(|&i| {
            let z = standardize(i)
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + b;
            sigmoid(z)
        })
        .collect();
    Ok(ProbeScores {
        held_out: test,
        scores,
        labels: test_labels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub setting: String,
    pub auroc: f64,
    pub aupr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl MetricReport {
    pub fn from_scores(
        task: TaskKind,
        setting: Setting,
        scores: &[f64],
        labels: &[bool],
    ) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&l| l).count();
        Ok(Self {
            task,
            setting: setting.to_string(),
            auroc: auroc(scores, labels)?,
            aupr: aupr(scores, labels)?,
            n_pos,
            n_neg: labels.len() - n_pos,
            fingerprint: None,
        })
    }
}

/// Scores `task` under `setting` and summarizes the result.
pub fn evaluate(
    model: &Model,
    task: &EvalTask,
    setting: Setting,
    temperature: f64,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    match setting {
        Setting::ZeroShot => {
            let scores = zero_shot_scores(model, task, temperature)?;
            MetricReport::from_scores(task.kind, setting, &scores, &task.labels())
        }
        Setting::FewShot(ratio) => {
            let p = few_shot_probe(
                model,
                task,
                ratio,
                cfg.seed,
                cfg.probe_steps,
                cfg.probe_learning_rate,
            )?;
            MetricReport::from_scores(task.kind, setting, &p.scores, &p.labels)
        }
    }
}

/// CSV with `item_id,label,e0..e{d-1}`; floats carry 17 significant digits.
pub fn export_embeddings(model: &Model, items: &[EvalItem]) -> Result<String> {
    let frames: Vec<&[f64]> = items.iter().map(|i| i.frame.as_slice()).collect();
    let emb = model.embed_frames(&frames)?;
    let d = model.embed_dim();
    let mut out = String::from("item_id,label");
    for k in 0..d {
        out.push_str(&format!(",e{k}"));
    }
    out.push('\n');
    for (r, item) in items.iter().enumerate() {
        if item.id.contains([',', '"', '\n', '\r']) {
            return Err(Error::Config(format!(
                "item id `{}` is not CSV-safe",
                item.id
            )));
        }
        out.push_str(&item.id);
        out.push_str(if item.label { ",1" } else { ",0" });
        for &x in emb.row(r) {
            out.push(',');
            out.push_str(&format_f64(x));
        }
        out.push('\n');
    }
    Ok(out)
}

/// One parsed row of an embedding CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: bool,
    pub values: Vec<f64>,
}

pub fn parse_embeddings_csv(text: &str) -> Result<Vec<EmbeddingRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput("embedding csv"))?;
    let width = header.split(',').count();
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(Error::Config(format!(
                    "row has {} fields, header {width}",
                    fields.len()
                )));
            }
            let values = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad float `{f}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EmbeddingRow {
                id: fields[0].to_string(),
                label: fields[1] == "1",
                values,
            })
        })
        .collect()
}
