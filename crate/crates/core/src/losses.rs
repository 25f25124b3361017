//! Label-smoothed cross-entropy, triplet loss with hard mining, and their
//! weighted total.
//!
//! Labels are zero-based class indices throughout the crate.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, VjpRule};
use crate::tensor::Tensor;

/// Added under the square root of every pairwise distance.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mining {
    /// Hardest positive and hardest negative per anchor.
    #[default]
    BatchHard,
    /// Every (anchor, positive, negative) triple in the batch.
    AllPairs,
}

/// Orientation of the triplet hinge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TripletForm {
    /// `max(d(a,p) - d(a,n) + margin, 0)`.
    #[default]
    Standard,
    /// `-max(d(a,n) - d(a,p) - margin, 0)`. For inspection only; it is
    /// unbounded below as a training objective.
    AsPrinted,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Triplet weight.
    pub alpha: f64,
    /// Cross-entropy weight.
    pub beta: f64,
    /// Label smoothing degree.
    pub gamma: f64,
    pub margin: f64,
    pub mining: Mining,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 1.0, gamma: 0.1, margin: 1.2, mining: Mining::BatchHard }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("loss weights alpha and beta must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("smoothing gamma must be in [0, 1), got {}", self.gamma)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Smoothed target distribution entry for class `j` of a sample labelled `label`.
pub fn smoothed_target(label: usize, j: usize, classes: usize, gamma: f64) -> f64 {
    let base = gamma / classes as f64;
    if j == label {
        1.0 - gamma + base
    } else {
        base
    }
}

struct Lsce {
    labels: Vec<usize>,
    gamma: f64,
    softmax: Vec<f64>,
}

impl VjpRule for Lsce {
    fn name(&self) -> &'static str {
        "lsce"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = inputs[0].shape();
        let (b, k) = (s[0], s[1]);
        let scale = grad.item() / b as f64;
        let mut out = vec![0.0; b * k];
        for (i, &label) in self.labels.iter().enumerate() {
            for j in 0..k {
                out[i * k + j] = scale * (self.softmax[i * k + j] - smoothed_target(label, j, k, self.gamma));
            }
        }
        vec![Some(Tensor::from_parts(s.to_vec(), out))]
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch { op: "labels", lhs: vec![batch], rhs: vec![labels.len()] });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Batch mean of `-sum_j q_j log softmax(z)_j` with smoothed targets `q`.
pub fn lsce_loss(tape: &mut Tape, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 {
        return Err(Error::InvalidShape { shape: s, reason: "logits must be [batch, classes]".into() });
    }
    let (b, k) = (s[0], s[1]);
    if k < 2 && gamma > 0.0 {
        return Err(Error::Config(format!("label smoothing needs at least 2 classes, got {k}")));
    }
    check_labels(labels, b, k)?;
    let z = tape.value(logits).data();
    let mut softmax = vec![0.0; b * k];
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &z[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for j in 0..k {
            let logp = row[j] - lse;
            softmax[i * k + j] = logp.exp();
            total -= smoothed_target(label, j, k, gamma) * logp;
        }
    }
    let value = Tensor::scalar(total / b as f64);
    Ok(tape.record(value, &[logits], Lsce { labels: labels.to_vec(), gamma, softmax }))
}

struct PairwiseDistances;

impl VjpRule for PairwiseDistances {
    fn name(&self) -> &'static str {
        "pairwise_distances"
    }
    fn vjp(&self, inputs: &[&Tensor], dist: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = inputs[0].shape();
        let (b, d) = (s[0], s[1]);
        let (x, dm, g) = (inputs[0].data(), dist.data(), grad.data());
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..b {
                let c = g[i * b + j] / dm[i * b + j];
                if c == 0.0 || i == j {
                    continue;
                }
                for t in 0..d {
                    let diff = x[i * d + t] - x[j * d + t];
                    out[i * d + t] += c * diff;
                    out[j * d + t] -= c * diff;
                }
            }
        }
        vec![Some(Tensor::from_parts(s.to_vec(), out))]
    }
}

/// Euclidean distance matrix `[b, d] -> [b, b]`, `sqrt(|x_i - x_j|^2 + eps)`.
pub fn pairwise_distances(tape: &mut Tape, emb: Var) -> Result<Var> {
    let s = tape.shape(emb).to_vec();
    if s.len() != 2 {
        return Err(Error::InvalidShape { shape: s, reason: "embeddings must be [batch, dim]".into() });
    }
    let (b, d) = (s[0], s[1]);
    let x = tape.value(emb).data();
    let mut out = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let sq: f64 = (0..d).map(|t| (x[i * d + t] - x[j * d + t]).powi(2)).sum();
            out[i * b + j] = (sq + DIST_EPS).sqrt();
        }
    }
    Ok(tape.record(Tensor::from_parts(vec![b, b], out), &[emb], PairwiseDistances))
}

/// Selected triples: `(anchor, positive, negative)`.
struct Hinges {
    b: usize,
    active: Vec<(usize, usize, usize)>,
    count: usize,
}

impl VjpRule for Hinges {
    fn name(&self) -> &'static str {
        "triplet_hinge"
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        // both hinge orientations share this gradient on active terms
        let w = grad.item() / self.count as f64;
        let mut out = vec![0.0; self.b * self.b];
        for &(a, p, n) in &self.active {
            out[a * self.b + p] += w;
            out[a * self.b + n] -= w;
        }
        vec![Some(Tensor::from_parts(vec![self.b, self.b], out))]
    }
}

/// Checks that each identity has a positive and that negatives exist.
pub fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&identity, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::TripletBatch { identity, reason: "has fewer than 2 instances" });
    }
    if counts.len() < 2 {
        let identity = labels.first().copied().unwrap_or(0);
        return Err(Error::TripletBatch { identity, reason: "has no negatives in the batch" });
    }
    Ok(())
}

/// `max(d_ap - d_an + margin, 0)`.
pub fn triplet_hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

fn hinge_term(form: TripletForm, d_ap: f64, d_an: f64, margin: f64) -> f64 {
    match form {
        TripletForm::Standard => triplet_hinge(d_ap, d_an, margin),
        TripletForm::AsPrinted => -(d_an - d_ap - margin).max(0.0),
    }
}

/// Mean triplet hinge over the anchors (batch-hard) or over all triples.
pub fn triplet_loss(tape: &mut Tape, emb: Var, labels: &[usize], margin: f64, mining: Mining) -> Result<Var> {
    triplet_loss_with_form(tape, emb, labels, margin, mining, TripletForm::Standard)
}

pub fn triplet_loss_with_form(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    margin: f64,
    mining: Mining,
    form: TripletForm,
) -> Result<Var> {
    let b = tape.shape(emb)[0];
    if labels.len() != b {
        return Err(Error::ShapeMismatch { op: "labels", lhs: vec![b], rhs: vec![labels.len()] });
    }
    check_triplet_batch(labels)?;
    let dist = pairwise_distances(tape, emb)?;
    let d = tape.value(dist).data();
    let mut total = 0.0;
    let mut active = Vec::new();
    let mut count = 0usize;
    let mut visit = |a: usize, p: usize, n: usize, total: &mut f64| {
        let term = hinge_term(form, d[a * b + p], d[a * b + n], margin);
        if term != 0.0 {
            active.push((a, p, n));
        }
        *total += term;
        count += 1;
    };
    for a in 0..b {
        let positives = (0..b).filter(|&j| j != a && labels[j] == labels[a]);
        let negatives = (0..b).filter(|&j| labels[j] != labels[a]);
        match mining {
            Mining::BatchHard => {
                // first index wins ties
                let p = positives.fold(None, |best: Option<usize>, j| match best {
                    Some(k) if d[a * b + k] >= d[a * b + j] => Some(k),
                    _ => Some(j),
                });
                let n = negatives.fold(None, |best: Option<usize>, j| match best {
                    Some(k) if d[a * b + k] <= d[a * b + j] => Some(k),
                    _ => Some(j),
                });
                visit(a, p.expect("checked"), n.expect("checked"), &mut total);
            }
            Mining::AllPairs => {
                let negatives: Vec<usize> = negatives.collect();
                for p in positives {
                    for &n in &negatives {
                        visit(a, p, n, &mut total);
                    }
                }
            }
        }
    }
    let value = Tensor::scalar(total / count as f64);
    Ok(tape.record(value, &[dist], Hinges { b, active, count }))
}

/// `alpha * triplet + beta * lsce`.
pub fn total_loss(tape: &mut Tape, triplet: Var, lsce: Var, alpha: f64, beta: f64) -> Result<Var> {
    let t = tape.scale(triplet, alpha);
    let l = tape.scale(lsce, beta);
    tape.add(t, l)
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(triplet: f64, lsce: f64, alpha: f64, beta: f64) -> f64 {
    alpha * triplet + beta * lsce
}
