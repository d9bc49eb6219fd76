//! Frozen-encoder linear probe and binary classification metrics.

use std::fmt::Write as _;

use crate::gradcheck::Differentiable;
use crate::model::{self, ModelParams, PositionTables, ViTConfig};
use crate::par::{self, Execution};
use crate::patch::{patchify, ImageGray};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Mean-pooled encoder output over the full, unmasked token set.
pub fn extract_features(
    params: &ModelParams<Tensor<f32>>,
    cfg: &ViTConfig,
    pos: &PositionTables<f32>,
    img: &ImageGray,
) -> Result<Vec<f64>> {
    params.check_config(cfg)?;
    let mut tape = Tape::<f32>::no_grad();
    let vars = model::bind(&mut tape, params, false);
    let patches = tape.constant(patchify(img, &cfg.patch)?);
    let enc_pos = tape.constant_ref(&pos.enc);
    let all: Vec<usize> = (0..cfg.patch.num_tokens()).collect();
    let out = model::encode_tokens(&mut tape, &vars, cfg, patches, enc_pos, &all)?;
    let out = tape.value(out);
    let n = out.outer() as f64;
    let d = out.last_dim();
    let mut feat = vec![0f64; d];
    for row in out.data().chunks(d) {
        for (f, &v) in feat.iter_mut().zip(row) {
            *f += v as f64;
        }
    }
    Ok(feat.into_iter().map(|v| v / n).collect())
}

pub fn extract_all(
    params: &ModelParams<Tensor<f32>>,
    cfg: &ViTConfig,
    images: &[&ImageGray],
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let pos = PositionTables::new(cfg)?;
    par::map_slice(exec, images, |img| extract_features(params, cfg, &pos, img))
        .into_iter()
        .collect()
}

/// Per-feature z-scoring fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::contract("cannot standardize zero samples"))?;
        let (n, d) = (features.len() as f64, first.len());
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for f in features {
            for ((s, v), m) in std.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        // Constant features map to zero instead of dividing by zero.
        let std = std.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// Logistic-regression head over encoder features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

impl ProbeHead {
    pub fn zeros(dim: usize) -> Self {
        ProbeHead {
            weight: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    /// Probability of the positive class.
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy and its gradient `(∂/∂w, ∂/∂b)`.
pub fn cross_entropy(head: &ProbeHead, features: &[Vec<f64>], labels: &[bool]) -> (f64, Vec<f64>, f64) {
    let n = features.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; head.weight.len()];
    let mut gb = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let z = head.logit(x);
        // -[y log σ(z) + (1-y) log(1-σ(z))] = softplus(z) - y·z
        loss += softplus(z) - if y { z } else { 0.0 };
        let r = sigmoid(z) - if y { 1.0 } else { 0.0 };
        for (g, v) in gw.iter_mut().zip(x) {
            *g += r * v / n;
        }
        gb += r / n;
    }
    (loss / n, gw, gb)
}

/// Full-batch gradient descent from a zero head. Returns the head and the
/// loss before each step (plus the final loss).
pub fn train_probe(
    features: &[Vec<f64>],
    labels: &[bool],
    steps: usize,
    lr: f64,
) -> Result<(ProbeHead, Vec<f64>)> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::contract("probe needs one label per feature vector"));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::config("probe training needs both classes"));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::contract("feature vectors differ in length"));
    }
    let mut head = ProbeHead::zeros(dim);
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, gw, gb) = cross_entropy(&head, features, labels);
        losses.push(loss);
        for (w, g) in head.weight.iter_mut().zip(gw) {
            *w -= lr * g;
        }
        head.bias -= lr * gb;
    }
    losses.push(cross_entropy(&head, features, labels).0);
    Ok((head, losses))
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y).count();
    (pos, labels.len() - pos)
}

/// Mann-Whitney AUROC: the fraction of (positive, negative) pairs where the
/// positive scores higher, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::contract("auroc needs one label per score"));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::contract("auroc is undefined without both classes"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "auroc" });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the pair count, so ties stay integral.
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let (gp, gn) = class_counts(&order[i..j].iter().map(|&k| labels[k]).collect::<Vec<_>>());
        twice += 2 * gp as u128 * neg_below + gp as u128 * gn as u128;
        neg_below += gn as u128;
        i = j;
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// F1 and accuracy with predictions `score >= threshold`. F1 is 0 when there
/// are no true positives (including when nothing is predicted positive).
pub fn f1_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::contract("f1 needs one label per score"));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let f1 = if tp == 0 {
        0.0
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fn_) as f64;
        2.0 * precision * recall / (precision + recall)
    };
    Ok((f1, (tp + tn) as f64 / scores.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub split: String,
    pub auroc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub n: usize,
}

impl ProbeReport {
    pub fn evaluate(split: &str, scores: &[f64], labels: &[bool]) -> Result<Self> {
        let (f1, accuracy) = f1_accuracy(scores, labels, 0.5)?;
        Ok(ProbeReport {
            split: split.to_string(),
            auroc: auroc(scores, labels)?,
            f1,
            accuracy,
            n: scores.len(),
        })
    }
}

/// CSV with header `split,auroc,f1,accuracy,n`.
pub fn reports_csv(reports: &[ProbeReport]) -> String {
    let mut out = String::from("split,auroc,f1,accuracy,n\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{},{},{}", r.split, r.auroc, r.f1, r.accuracy, r.n);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings { steps: 2000, lr: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub head: ProbeHead,
    pub standardizer: Standardizer,
    pub train: ProbeReport,
    pub eval: ProbeReport,
    pub losses: Vec<f64>,
}

/// Extracts features for both splits, standardizes with training
/// statistics, trains the head, and reports both splits.
pub fn run_probe(
    params: &ModelParams<Tensor<f32>>,
    cfg: &ViTConfig,
    train: (&[&ImageGray], &[bool]),
    eval: (&[&ImageGray], &[bool]),
    settings: ProbeSettings,
    exec: Execution,
) -> Result<ProbeOutcome> {
    let train_raw = extract_all(params, cfg, train.0, exec)?;
    let eval_raw = extract_all(params, cfg, eval.0, exec)?;
    let standardizer = Standardizer::fit(&train_raw)?;
    let xs: Vec<Vec<f64>> = train_raw.iter().map(|f| standardizer.apply(f)).collect();
    let es: Vec<Vec<f64>> = eval_raw.iter().map(|f| standardizer.apply(f)).collect();
    let (head, losses) = train_probe(&xs, train.1, settings.steps, settings.lr)?;
    let score = |set: &[Vec<f64>]| set.iter().map(|x| head.score(x)).collect::<Vec<_>>();
    Ok(ProbeOutcome {
        train: ProbeReport::evaluate("train", &score(&xs), train.1)?,
        eval: ProbeReport::evaluate("eval", &score(&es), eval.1)?,
        head,
        standardizer,
        losses,
    })
}

/// Cross-entropy of a random head on random features, as a gradient-check case.
pub struct CrossEntropyCase {
    inputs: Vec<Tensor<f64>>,
    features: Vec<Vec<f64>>,
    labels: Vec<bool>,
}

impl CrossEntropyCase {
    pub fn random(seed: u64) -> Self {
        use rand::Rng as _;
        let mut r = rng::from_seed(seed ^ 0xce);
        let features: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..5).map(|_| r.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels = (0..12).map(|i| i % 3 == 0).collect();
        let inputs = vec![
            Tensor::uniform(&[5], -1.0, 1.0, &mut r),
            Tensor::uniform(&[1], -0.5, 0.5, &mut r),
        ];
        CrossEntropyCase { inputs, features, labels }
    }

    fn head(inputs: &[Tensor<f64>]) -> ProbeHead {
        ProbeHead {
            weight: inputs[0].data().to_vec(),
            bias: inputs[1].item(),
        }
    }
}

impl Differentiable for CrossEntropyCase {
    fn name(&self) -> &str {
        "probe_cross_entropy"
    }

    fn inputs(&self) -> &[Tensor<f64>] {
        &self.inputs
    }

    fn loss(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        Ok(cross_entropy(&Self::head(inputs), &self.features, &self.labels).0)
    }

    fn gradient(&self, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
        let (_, gw, gb) = cross_entropy(&Self::head(inputs), &self.features, &self.labels);
        Ok(vec![Tensor::new(vec![gw.len()], gw)?, Tensor::scalar(gb)])
    }
}
