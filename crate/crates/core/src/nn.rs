//! Layer building blocks shared by the similarity-graph module and the
//! backbone: batch normalization, convolution, pooling and resampling.
//!
//! Feature maps are `[batch, height, width, channels]`.

use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tape::{Tape, Var, VjpRule};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are reported for the trainer.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch-norm statistics to use for one call.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    Batch,
    Running { mean: &'a Tensor, var: &'a Tensor },
}

/// Per-channel statistics observed on a training batch.
#[derive(Clone, Debug)]
pub struct ObservedStats {
    pub mean: Tensor,
    /// Unbiased variance, as folded into the running estimate.
    pub var: Tensor,
}

fn channel_layout(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

struct BnNormalize {
    inv_std: Vec<f64>,
}

impl VjpRule for BnNormalize {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn vjp(&self, inputs: &[&Tensor], xhat: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let (rows, c) = channel_layout(inputs[0].shape());
        let (g, xh) = (grad.data(), xhat.data());
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                sum_g[ch] += g[r * c + ch];
                sum_gx[ch] += g[r * c + ch] * xh[r * c + ch];
            }
        }
        let m = rows as f64;
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                out[i] = self.inv_std[ch] / m * (m * g[i] - sum_g[ch] - xh[i] * sum_gx[ch]);
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), out))]
    }
}

/// Normalizes each channel (last axis) over every other axis using batch
/// statistics.
pub fn bn_normalize_batch(tape: &mut Tape, x: Var) -> Result<(Var, ObservedStats)> {
    let shape = tape.shape(x).to_vec();
    let (rows, c) = channel_layout(&shape);
    if rows < 2 {
        return Err(Error::BatchTooSmall(rows));
    }
    let data = tape.value(x).data();
    let mut mean = vec![0.0; c];
    for r in 0..rows {
        for ch in 0..c {
            mean[ch] += data[r * c + ch];
        }
    }
    mean.iter_mut().for_each(|v| *v /= rows as f64);
    let mut var = vec![0.0; c];
    for r in 0..rows {
        for ch in 0..c {
            let d = data[r * c + ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    let biased: Vec<f64> = var.iter().map(|v| v / rows as f64).collect();
    let unbiased: Vec<f64> = var.iter().map(|v| v / (rows - 1) as f64).collect();
    let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        for ch in 0..c {
            out[r * c + ch] = (data[r * c + ch] - mean[ch]) * inv_std[ch];
        }
    }
    let stats = ObservedStats {
        mean: Tensor::from_parts(vec![c], mean),
        var: Tensor::from_parts(vec![c], unbiased),
    };
    let v = tape.record(Tensor::from_parts(shape, out), &[x], BnNormalize { inv_std });
    Ok((v, stats))
}

/// `gamma * normalize(x) + beta`, per channel.
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: BnStats<'_>,
) -> Result<(Var, Option<ObservedStats>)> {
    let (xhat, observed) = match stats {
        BnStats::Batch => {
            let (v, s) = bn_normalize_batch(tape, x)?;
            (v, Some(s))
        }
        BnStats::Running { mean, var } => {
            let shift = tape.constant(mean.clone());
            let inv = tape.constant(var.map(|v| 1.0 / (v + BN_EPS).sqrt()));
            let centered = tape.sub(x, shift)?;
            (tape.mul(centered, inv)?, None)
        }
    };
    let scaled = tape.mul(xhat, gamma)?;
    Ok((tape.add(scaled, beta)?, observed))
}

/// Handles of one batch-norm layer inside a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BnLayer {
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, gamma_init: f64) -> Self {
        let full = |v| Tensor::full(&[channels], v).expect("channels >= 1");
        Self {
            gamma: store.add_param(format!("{prefix}.gamma"), full(gamma_init), false),
            beta: store.add_param(format!("{prefix}.beta"), full(0.0), false),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), full(0.0)),
            running_var: store.add_buffer(format!("{prefix}.running_var"), full(1.0)),
        }
    }
}

/// Statistics update queued by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatsUpdate {
    pub layer: BnLayer,
    pub observed: ObservedStats,
}

/// One forward evaluation: tape, parameter bindings and mode.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub vars: Vec<Var>,
    pub mode: Mode,
    pub updates: Vec<StatsUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        let vars = store.bind(tape);
        Self { tape, store, vars, mode, updates: Vec::new() }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn batch_norm(&mut self, x: Var, layer: BnLayer) -> Result<Var> {
        let stats = match self.mode {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Running {
                mean: self.store.buffer(layer.running_mean),
                var: self.store.buffer(layer.running_var),
            },
        };
        let (gamma, beta) = (self.var(layer.gamma), self.var(layer.beta));
        let (y, observed) = batch_norm(self.tape, x, gamma, beta, stats)?;
        if let Some(observed) = observed {
            self.updates.push(StatsUpdate { layer, observed });
        }
        Ok(y)
    }
}

/// Folds observed batch statistics into the running estimates.
pub fn apply_stats_updates(store: &mut ParamStore, updates: &[StatsUpdate], momentum: f64) {
    for u in updates {
        let blend = |running: &mut Tensor, observed: &Tensor| {
            for (r, o) in running.data_mut().iter_mut().zip(observed.data()) {
                *r = (1.0 - momentum) * *r + momentum * o;
            }
        };
        blend(store.buffer_mut(u.layer.running_mean), &u.observed.mean);
        blend(store.buffer_mut(u.layer.running_var), &u.observed.var);
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Visits every (output position, kernel tap, input position) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvGeom { n, h, w, k, stride, pad, ho, wo, .. } = *self;
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let out_pos = (b * ho + oy) * wo + ox;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_pos = (b * h + iy as usize) * w + ix as usize;
                            f(out_pos, ky * k + kx, in_pos);
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: ConvGeom,
}

impl VjpRule for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
        let ConvGeom { cin, cout, k, .. } = self.geom;
        let (x, wt, g) = (inputs[0].data(), inputs[1].data(), grad.data());
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; wt.len()]);
        self.geom.for_each_tap(|out_pos, tap, in_pos| {
            let xs = &x[in_pos * cin..(in_pos + 1) * cin];
            for co in 0..cout {
                let go = g[out_pos * cout + co];
                if go == 0.0 {
                    continue;
                }
                let wo = (co * k * k + tap) * cin;
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[in_pos * cin..(in_pos + 1) * cin];
                    for (d, &wv) in dxs.iter_mut().zip(&wt[wo..wo + cin]) {
                        *d += go * wv;
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    for (d, &xv) in dw[wo..wo + cin].iter_mut().zip(xs) {
                        *d += go * xv;
                    }
                }
            }
        });
        vec![
            dx.map(|d| Tensor::from_parts(inputs[0].shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(inputs[1].shape().to_vec(), d)),
        ]
    }
}

/// Square convolution without bias. `x: [n, h, w, cin]`,
/// `weight: [cout, k, k, cin]`, zero padding `pad`.
pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
    let (sx, sw) = (tape.shape(x).to_vec(), tape.shape(weight).to_vec());
    if sx.len() != 4 || sw.len() != 4 || sw[1] != sw[2] || sw[3] != sx[3] || stride == 0 {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
    }
    let (n, h, w, cin) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, k) = (sw[0], sw[1]);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let geom = ConvGeom { n, h, w, cin, cout, k, stride, pad, ho, wo };
    let (xd, wd) = (tape.value(x).data(), tape.value(weight).data());
    let mut out = vec![0.0; n * ho * wo * cout];
    geom.for_each_tap(|out_pos, tap, in_pos| {
        let xs = &xd[in_pos * cin..(in_pos + 1) * cin];
        for co in 0..cout {
            let wo = (co * k * k + tap) * cin;
            let dot: f64 = xs.iter().zip(&wd[wo..wo + cin]).map(|(a, b)| a * b).sum();
            out[out_pos * cout + co] += dot;
        }
    });
    Ok(tape.record(Tensor::from_parts(vec![n, ho, wo, cout], out), &[x, weight], Conv2d { geom }))
}

struct GlobalMaxPool {
    argmax: Vec<usize>,
}

impl VjpRule for GlobalMaxPool {
    fn name(&self) -> &'static str {
        "global_max_pool"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let mut out = vec![0.0; inputs[0].numel()];
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            out[src] += g;
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), out))]
    }
}

/// `[n, h, w, c] -> [n, c]`, maximum over spatial positions.
pub fn global_max_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidShape { shape, reason: "global max pool expects [n, h, w, c]".into() });
    }
    let (n, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
    let data = tape.value(x).data();
    let mut out = vec![f64::NEG_INFINITY; n * c];
    let mut argmax = vec![0; n * c];
    for b in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                let i = (b * hw + p) * c + ch;
                if data[i] > out[b * c + ch] {
                    out[b * c + ch] = data[i];
                    argmax[b * c + ch] = i;
                }
            }
        }
    }
    Ok(tape.record(Tensor::from_parts(vec![n, c], out), &[x], GlobalMaxPool { argmax }))
}

struct AvgPoolDown {
    factor: usize,
}

impl VjpRule for AvgPoolDown {
    fn name(&self) -> &'static str {
        "avg_pool_down"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = inputs[0].shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let f = self.factor;
        let (ho, wo) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let g = grad.data();
        let mut out = vec![0.0; inputs[0].numel()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let src = ((b * ho + y / f) * wo + x / f) * c;
                    let dst = ((b * h + y) * w + x) * c;
                    for ch in 0..c {
                        out[dst + ch] = g[src + ch] * inv;
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(s.to_vec(), out))]
    }
}

/// Non-overlapping `factor x factor` average pooling of `[n, h, w, c]`.
pub fn avg_pool_down(tape: &mut Tape, x: Var, factor: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || factor == 0 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(Error::InvalidShape {
            shape: s,
            reason: format!("cannot average-pool by {factor}"),
        });
    }
    if factor == 1 {
        return Ok(x);
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / factor, w / factor);
    let data = tape.value(x).data();
    let mut out = vec![0.0; n * ho * wo * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((b * ho + y / factor) * wo + xx / factor) * c;
                let src = ((b * h + y) * w + xx) * c;
                for ch in 0..c {
                    out[dst + ch] += data[src + ch];
                }
            }
        }
    }
    let inv = 1.0 / (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(tape.record(Tensor::from_parts(vec![n, ho, wo, c], out), &[x], AvgPoolDown { factor }))
}

struct UpsampleNearest {
    factor: usize,
}

impl VjpRule for UpsampleNearest {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }
    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = out.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let f = self.factor;
        let (hi, wi) = (h / f, w / f);
        let g = grad.data();
        let mut acc = vec![0.0; inputs[0].numel()];
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let dst = ((b * hi + y / f) * wi + x / f) * c;
                    let src = ((b * h + y) * w + x) * c;
                    for ch in 0..c {
                        acc[dst + ch] += g[src + ch];
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), acc))]
    }
}

/// Nearest-neighbour up-sampling of `[n, h, w, c]` by an integer factor.
pub fn upsample_nearest(tape: &mut Tape, x: Var, factor: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || factor == 0 {
        return Err(Error::InvalidShape { shape: s, reason: format!("cannot up-sample by {factor}") });
    }
    if factor == 1 {
        return Ok(x);
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * factor, w * factor);
    let data = tape.value(x).data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let src = ((b * h + y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&data[src..src + c]);
            }
        }
    }
    Ok(tape.record(Tensor::from_parts(vec![n, ho, wo, c], out), &[x], UpsampleNearest { factor }))
}
