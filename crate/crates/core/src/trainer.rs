//! SGD training with linear warmup, step decay and identity-balanced
//! batches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, RankingMetrics};
use crate::losses::{lsce_loss, total_loss, triplet_loss, LossConfig};
use crate::network::Model;
use crate::nn::{apply_stats_updates, Ctx, Mode, BN_MOMENTUM};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How the learning rate falls after the hold phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Decay {
    /// Multiply by 0.1 per step.
    #[default]
    Tenfold,
    /// Multiply by 0.9 per step.
    TenPercent,
}

impl Decay {
    pub fn factor(self) -> f64 {
        match self {
            Self::Tenfold => 0.1,
            Self::TenPercent => 0.9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Tenfold => "tenfold",
            Self::TenPercent => "ten_percent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Tenfold, Self::TenPercent].into_iter().find(|d| d.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_lr: f64,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// First epoch of the decay phase.
    pub decay_start: usize,
    pub decay_every: usize,
    pub decay: Decay,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity per batch.
    pub k: usize,
    pub flip_prob: f64,
    /// Evaluate on probe/gallery every this many epochs; 0 evaluates only
    /// after the last epoch.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            warmup_lr: 0.001,
            base_lr: 0.01,
            warmup_epochs: 10,
            decay_start: 30,
            decay_every: 20,
            decay: Decay::Tenfold,
            momentum: 0.9,
            weight_decay: 5e-4,
            p: 8,
            k: 4,
            flip_prob: 0.5,
            eval_every: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!("need p >= 2 and k >= 2, got p={} k={}", self.p, self.k)));
        }
        if self.decay_every == 0 || self.warmup_epochs > self.decay_start {
            return Err(Error::Config("decay_every must be >= 1 and warmup must end by decay_start".into()));
        }
        if !(self.base_lr >= 0.0 && self.warmup_lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates, momentum and weight decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch` (zero-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.warmup_lr + (self.base_lr - self.warmup_lr) * epoch as f64 / self.warmup_epochs as f64
        } else if epoch < self.decay_start {
            self.base_lr
        } else {
            let steps = (epoch - self.decay_start) / self.decay_every;
            self.base_lr * self.decay.factor().powi(steps as i32)
        }
    }
}

/// `p` identities with `k` images each, grouped by identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PkBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Image indices for one epoch of P x K batches.
///
/// Each identity's images are shuffled and cut into groups of `k` (an
/// identity with fewer than `k` images is padded by resampling). Batches
/// then take `p` distinct identities, preferring those with the most
/// unused groups, until fewer than `p` identities remain.
pub fn pk_epoch(labels: &[usize], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Config(format!("P={p} identities per batch but only {} available", by_id.len())));
    }
    let mut groups: Vec<(usize, Vec<Vec<usize>>)> = Vec::new();
    for (&id, idx) in &by_id {
        let mut idx = idx.clone();
        idx.shuffle(rng);
        while idx.len() < k {
            let extra = idx[rng.gen_range(0..idx.len())];
            idx.push(extra);
        }
        let chunks = idx.chunks_exact(k).map(<[usize]>::to_vec).collect();
        groups.push((id, chunks));
    }
    let mut batches = Vec::new();
    loop {
        let mut open: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].1.is_empty()).collect();
        if open.len() < p {
            break;
        }
        open.shuffle(rng);
        open.sort_by_key(|&g| std::cmp::Reverse(groups[g].1.len()));
        let mut batch = Vec::with_capacity(p * k);
        for &g in &open[..p] {
            batch.extend(groups[g].1.pop().expect("open group"));
        }
        batches.push(batch);
    }
    Ok(batches)
}

fn flip_horizontal(img: &mut [f64], h: usize, w: usize, c: usize) {
    for r in 0..h {
        let row = &mut img[r * w * c..(r + 1) * w * c];
        for col in 0..w / 2 {
            for ch in 0..c {
                row.swap(col * c + ch, (w - 1 - col) * c + ch);
            }
        }
    }
}

/// Gathers a batch and flips each image with probability `flip_prob`.
pub fn assemble_batch(split: &Split, indices: &[usize], flip_prob: f64, rng: &mut impl Rng) -> Result<PkBatch> {
    let mut images = split.gather(indices)?;
    let s = images.shape().to_vec();
    let per = s[1] * s[2] * s[3];
    for img in images.data_mut().chunks_mut(per) {
        if rng.gen::<f64>() < flip_prob {
            flip_horizontal(img, s[1], s[2], s[3]);
        }
    }
    Ok(PkBatch { images, labels: indices.iter().map(|&i| split.labels[i]).collect() })
}

/// SGD with momentum; weight decay only touches parameters flagged for it.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = store.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        Self { momentum, weight_decay, velocity }
    }

    /// `v = m v + g + wd p; p -= lr v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        for ((param, v), g) in store.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let wd = if param.decay { self.weight_decay } else { 0.0 };
            let p = param.value.data_mut();
            for ((p, v), g) in p.iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = self.momentum * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub triplet: f64,
    pub lsce: f64,
}

/// One forward/backward pass in training mode. Returns the losses and the
/// gradient of every parameter; running BN statistics are updated.
pub fn compute_gradients(
    model: &mut Model,
    batch: &PkBatch,
    loss: &LossConfig,
    step: usize,
) -> Result<(StepLosses, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.store, Mode::Train);
    let x = ctx.tape.constant(batch.images.clone());
    let out = model.forward(&mut ctx, x)?;
    let trip = triplet_loss(ctx.tape, out.gmp, &batch.labels, loss.margin, loss.mining)?;
    let ce = lsce_loss(ctx.tape, out.logits, &batch.labels, loss.gamma)?;
    let total = total_loss(ctx.tape, trip, ce, loss.alpha, loss.beta)?;
    let Ctx { vars, updates, .. } = ctx;
    let losses = StepLosses {
        total: tape.value(total).item(),
        triplet: tape.value(trip).item(),
        lsce: tape.value(ce).item(),
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    tape.backward(total)?;
    let grads = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect::<Vec<_>>();
    if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss { step });
    }
    apply_stats_updates(&mut model.store, &updates, BN_MOMENTUM);
    Ok((losses, grads))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub triplet: f64,
    pub lsce: f64,
}

pub const LOG_HEADER: &str = "epoch\tlr\tloss_total\tloss_triplet\tloss_lsce";

impl EpochLog {
    /// Tab-separated; floats use the shortest exact representation.
    pub fn line(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.epoch, self.lr, self.total, self.triplet, self.lsce)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return None;
        }
        Some(Self {
            epoch: f[0].parse().ok()?,
            lr: f[1].parse().ok()?,
            total: f[2].parse().ok()?,
            triplet: f[3].parse().ok()?,
            lsce: f[4].parse().ok()?,
        })
    }
}

/// Where training writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct Artifacts<'a> {
    pub dir: &'a Path,
    /// Copied into every checkpoint.
    pub manifest: Vec<(String, String)>,
}

pub const LOG_FILE: &str = "train_log.tsv";
pub const EVAL_FILE: &str = "eval_log.tsv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.hsgc";
pub const BEST_CHECKPOINT: &str = "best.hsgc";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub evals: Vec<(usize, RankingMetrics)>,
    /// Epoch and metrics of the best mAP seen.
    pub best: (usize, RankingMetrics),
    pub final_metrics: RankingMetrics,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for e in &self.log {
            let _ = writeln!(s, "{}", e.line());
        }
        s
    }
}

/// Retrieval metrics of the model's GMP features on the probe/gallery split.
pub fn evaluate_model(model: &Model, data: &Dataset) -> Result<RankingMetrics> {
    let probe = model.extract_features(&data.probe.images, 64)?;
    let gallery = model.extract_features(&data.gallery.images, 64)?;
    evaluate(&probe, &data.probe.labels, &gallery, &data.gallery.labels, 10)
}

pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
    artifacts: Option<&Artifacts<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss.validate()?;
    let img = data.train.images.shape();
    if (img[1], img[2]) != model.input_hw() {
        return Err(Error::Config(format!(
            "dataset images are {}x{}, model expects {:?}",
            img[1],
            img[2],
            model.input_hw()
        )));
    }
    if data.num_train_classes() > model.config().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} training identities, classifier has {} classes",
            data.num_train_classes(),
            model.config().num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut evals = Vec::new();
    let mut best: Option<(usize, RankingMetrics)> = None;
    let mut step = 0usize;
    let write_log = |log: &[EpochLog]| -> Result<()> {
        if let Some(a) = artifacts {
            let mut s = format!("{LOG_HEADER}\n");
            for e in log {
                let _ = writeln!(s, "{}", e.line());
            }
            fs::write(a.dir.join(LOG_FILE), s)?;
        }
        Ok(())
    };
    let save = |model: &Model, name: &str, epoch: usize| -> Result<()> {
        if let Some(a) = artifacts {
            let mut manifest = a.manifest.clone();
            manifest.push(("epoch".into(), epoch.to_string()));
            model.to_checkpoint(manifest).write(&a.dir.join(name))?;
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let batches = pk_epoch(&data.train.labels, cfg.p, cfg.k, &mut rng)?;
        let mut sums = StepLosses { total: 0.0, triplet: 0.0, lsce: 0.0 };
        for indices in &batches {
            let batch = assemble_batch(&data.train, indices, cfg.flip_prob, &mut rng)?;
            let (losses, grads) = compute_gradients(model, &batch, loss, step)?;
            sgd.step(&mut model.store, &grads, lr);
            sums.total += losses.total;
            sums.triplet += losses.triplet;
            sums.lsce += losses.lsce;
            step += 1;
        }
        let n = batches.len().max(1) as f64;
        log.push(EpochLog { epoch, lr, total: sums.total / n, triplet: sums.triplet / n, lsce: sums.lsce / n });
        write_log(&log)?;

        let last = epoch + 1 == cfg.epochs;
        if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            let metrics = evaluate_model(model, data)?;
            if best.as_ref().is_none_or(|(_, b)| metrics.map > b.map) {
                save(model, BEST_CHECKPOINT, epoch)?;
                best = Some((epoch, metrics.clone()));
            }
            evals.push((epoch, metrics));
        }
    }
    let final_metrics = match evals.last() {
        Some((_, m)) => m.clone(),
        None => evaluate_model(model, data)?,
    };
    save(model, FINAL_CHECKPOINT, cfg.epochs.saturating_sub(1))?;
    if let Some(a) = artifacts {
        let mut s = String::from("epoch\tmAP\tcmc@1\tcmc@5\tcmc@10\n");
        for (e, m) in &evals {
            let _ = writeln!(s, "{e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", m.map, m.cmc_at(1), m.cmc_at(5), m.cmc_at(10));
        }
        fs::write(a.dir.join(EVAL_FILE), s)?;
    }
    let best = best.unwrap_or((0, final_metrics.clone()));
    Ok(TrainOutcome { log, evals, best, final_metrics })
}
