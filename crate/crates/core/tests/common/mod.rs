//! Explicit-loop reference implementations, written independently of the
//! library's tape operations.

#![allow(dead_code)]

use hsgnet_core::hsgm::Hsgm;
use hsgnet_core::params::ParamStore;
use hsgnet_core::Tensor;

pub const EPS: f64 = 1e-5;

/// `[n][h][w][c]` view over a flat buffer.
pub struct Map4<'a> {
    pub data: &'a [f64],
    pub dims: [usize; 4],
}

impl Map4<'_> {
    pub fn at(&self, b: usize, i: usize, j: usize, m: usize) -> f64 {
        let [_, h, w, c] = self.dims;
        self.data[((b * h + i) * w + j) * c + m]
    }
}

pub fn spatial_neighbors(h: usize, w: usize, window: usize, i: usize, j: usize) -> Vec<(usize, usize)> {
    let r = (window / 2) as isize;
    let mut out = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            let (a, b) = (i as isize + di, j as isize + dj);
            if (di, dj) != (0, 0) && a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                out.push((a as usize, b as usize));
            }
        }
    }
    out
}

pub fn channel_neighbors(c: usize, window: usize, stride: usize, m: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for t in 1..=window / 2 {
        let off = t * stride;
        if m >= off {
            out.push(m - off);
        }
        if m + off < c {
            out.push(m + off);
        }
    }
    out.sort_unstable();
    out
}

/// Edge weights of node `i` over `nbrs`, plain softmax without shifting.
pub fn softmax_edges(v: &[f64], nbrs: &[usize]) -> Vec<f64> {
    let z: f64 = nbrs.iter().map(|&j| v[j].exp()).sum();
    nbrs.iter().map(|&j| v[j].exp() / z).collect()
}

/// `u_i = v_i + sum_j e_ij v_j` over the given neighbour lists.
pub fn aggregate(v: &[f64], nbrs: &[Vec<usize>]) -> Vec<f64> {
    let mut u = v.to_vec();
    for (i, nb) in nbrs.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let e = softmax_edges(v, nb);
        for (k, &j) in nb.iter().enumerate() {
            u[i] += e[k] * v[j];
        }
    }
    u
}

pub fn channel_squeeze(x: &Map4, b: usize) -> Vec<Vec<f64>> {
    let [_, h, w, c] = x.dims;
    let mut s = vec![vec![0.0; w]; h];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for m in 0..c {
                acc += x.at(b, i, j, m);
            }
            s[i][j] = acc / c as f64;
        }
    }
    s
}

pub fn spatial_squeeze(x: &Map4, b: usize) -> Vec<f64> {
    let [_, h, w, c] = x.dims;
    let mut v = vec![0.0; c];
    for (m, vm) in v.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..h {
            for j in 0..w {
                acc += x.at(b, i, j, m);
            }
        }
        *vm = acc / (h * w) as f64;
    }
    v
}

/// Stride-1 average over the `k x k` window starting at each position,
/// counting only cells inside the map.
pub fn pool(s: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let (h, w) = (s.len(), s[0].len());
    let mut out = vec![vec![0.0; w]; h];
    for i in 0..h {
        for j in 0..w {
            let (mut acc, mut n) = (0.0, 0usize);
            for a in i..(i + k).min(h) {
                for b in j..(j + k).min(w) {
                    acc += s[a][b];
                    n += 1;
                }
            }
            out[i][j] = acc / n as f64;
        }
    }
    out
}

/// `A_ms` for sample `b`, flattened row-major `[h * w]`.
pub fn spatial_branch(x: &Map4, b: usize, scales: &[usize], thetas: &[Vec<f64>], window: usize) -> Vec<f64> {
    let [_, h, w, _] = x.dims;
    let s = channel_squeeze(x, b);
    let nbrs: Vec<Vec<usize>> = (0..h * w)
        .map(|n| spatial_neighbors(h, w, window, n / w, n % w).into_iter().map(|(a, c)| a * w + c).collect())
        .collect();
    let mut a = vec![0.0; h * w];
    for (k, theta) in scales.iter().zip(thetas) {
        let p = pool(&s, *k);
        let v: Vec<f64> = p.iter().flatten().copied().collect();
        let u = aggregate(&v, &nbrs);
        for n in 0..h * w {
            a[n] += theta[n] * u[n];
        }
    }
    a
}

pub fn channel_branch(x: &Map4, b: usize, delta: &[f64], window: usize, stride: usize) -> Vec<f64> {
    let c = x.dims[3];
    let v = spatial_squeeze(x, b);
    let nbrs: Vec<Vec<usize>> = (0..c).map(|m| channel_neighbors(c, window, stride, m)).collect();
    let u = aggregate(&v, &nbrs);
    (0..c).map(|m| delta[m] * u[m]).collect()
}

pub enum Norm<'a> {
    /// Batch statistics with biased variance.
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// `LeakyReLU(BN(A_ms * A_c))` for the whole batch, flat `[n, h, w, c]`.
#[allow(clippy::too_many_arguments)]
pub fn enhance(
    a_ms: &[Vec<f64>],
    a_c: &[Vec<f64>],
    dims: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    norm: Norm,
    slope: f64,
) -> Vec<f64> {
    let [n, h, w, c] = dims;
    let mut m = vec![0.0; n * h * w * c];
    for b in 0..n {
        for p in 0..h * w {
            for ch in 0..c {
                m[(b * h * w + p) * c + ch] = a_ms[b][p] * a_c[b][ch];
            }
        }
    }
    let count = (n * h * w) as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match norm {
        Norm::Running { mean, var } => (mean.to_vec(), var.to_vec()),
        Norm::Batch => (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..n * h * w).map(|r| m[r * c + ch]).collect();
                let mu = vals.iter().sum::<f64>() / count;
                let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
                (mu, var)
            })
            .unzip(),
    };
    for (idx, v) in m.iter_mut().enumerate() {
        let ch = idx % c;
        let y = gamma[ch] * (*v - mean[ch]) / (var[ch] + EPS).sqrt() + beta[ch];
        *v = if y >= 0.0 { y } else { slope * y };
    }
    m
}

/// Full stripe-concat HSGM in eval mode: for each level, the residual
/// branch of every stripe plus the input, then the mean over levels.
pub fn hsgm_eval(module: &Hsgm, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let cfg = module.config();
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let nb = cfg.graph.neighbors;
    let full = Map4 { data: x.data(), dims: [n, h, w, c] };
    let mut out = vec![0.0; n * h * w * c];
    for (split, pieces) in cfg.splits.iter().zip(module.levels()) {
        let ph = h / split;
        for (p, params) in pieces.iter().enumerate() {
            let mut piece = Vec::with_capacity(n * ph * w * c);
            for b in 0..n {
                for i in p * ph..(p + 1) * ph {
                    for j in 0..w {
                        for m in 0..c {
                            piece.push(full.at(b, i, j, m));
                        }
                    }
                }
            }
            let pm = Map4 { data: &piece, dims: [n, ph, w, c] };
            let thetas: Vec<Vec<f64>> = params.thetas.iter().map(|&t| store.param(t).data().to_vec()).collect();
            let delta = store.param(params.delta).data();
            let a_ms: Vec<Vec<f64>> =
                (0..n).map(|b| spatial_branch(&pm, b, &cfg.scales, &thetas, nb.spatial_window)).collect();
            let a_c: Vec<Vec<f64>> =
                (0..n).map(|b| channel_branch(&pm, b, delta, nb.channel_window, nb.channel_stride)).collect();
            let o = enhance(
                &a_ms,
                &a_c,
                [n, ph, w, c],
                store.param(params.bn.gamma).data(),
                store.param(params.bn.beta).data(),
                Norm::Running {
                    mean: store.buffer(params.bn.running_mean).data(),
                    var: store.buffer(params.bn.running_var).data(),
                },
                cfg.graph.leaky_slope,
            );
            for b in 0..n {
                for i in 0..ph {
                    for j in 0..w {
                        for m in 0..c {
                            let src = ((b * ph + i) * w + j) * c + m;
                            let dst = ((b * h + p * ph + i) * w + j) * c + m;
                            out[dst] += o[src] + full.data[dst];
                        }
                    }
                }
            }
        }
    }
    let levels = cfg.splits.len() as f64;
    out.iter().map(|v| v / levels).collect()
}

/// Average precision and first-hit rank from an explicit O(n^2) ranking.
pub fn brute_force_metrics(
    probe: &[Vec<f64>],
    probe_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
    max_rank: usize,
) -> (f64, Vec<f64>, usize) {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut ap_sum = 0.0;
    let mut hits = vec![0usize; max_rank];
    let mut valid = 0;
    for (q, &ql) in probe.iter().zip(probe_labels) {
        let sims: Vec<f64> = gallery.iter().map(|g| cos(q, g)).collect();
        // selection sort: highest similarity first, lower index on ties
        let mut used = vec![false; gallery.len()];
        let mut order = Vec::new();
        for _ in 0..gallery.len() {
            let mut best: Option<usize> = None;
            for j in 0..gallery.len() {
                if used[j] {
                    continue;
                }
                if best.map_or(true, |b| sims[j] > sims[b]) {
                    best = Some(j);
                }
            }
            used[best.unwrap()] = true;
            order.push(best.unwrap());
        }
        let relevant = gallery_labels.iter().filter(|&&l| l == ql).count();
        if relevant == 0 {
            continue;
        }
        valid += 1;
        let mut ap = 0.0;
        for (pos, &g) in order.iter().enumerate() {
            if gallery_labels[g] != ql {
                continue;
            }
            let upto = order[..=pos].iter().filter(|&&x| gallery_labels[x] == ql).count();
            ap += upto as f64 / (pos + 1) as f64;
        }
        ap_sum += ap / relevant as f64;
        let first = order.iter().position(|&g| gallery_labels[g] == ql).unwrap();
        for (r, h) in hits.iter_mut().enumerate() {
            if first <= r {
                *h += 1;
            }
        }
    }
    let denom = valid.max(1) as f64;
    let map = if valid == 0 { 0.0 } else { ap_sum / denom };
    (map, hits.iter().map(|&h| h as f64 / denom).collect(), probe.len() - valid)
}

pub mod compare {
    use hsgnet_core::graph::{self, GraphSettings, NeighborSpec};
    use hsgnet_core::hsgm::{Hsgm, HsgmConfig};
    use hsgnet_core::nn::{BnStats, Mode};
    use hsgnet_core::{Tape, Tensor};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).unwrap()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Largest deviation from the reference for each branch.
    #[derive(Debug, Default, Clone, Copy)]
    pub struct Errors {
        pub spatial: f64,
        pub channel: f64,
        pub fuse_eval: f64,
        pub fuse_train: f64,
        pub hsgm: f64,
    }

    impl Errors {
        pub fn max(&self) -> f64 {
            [self.spatial, self.channel, self.fuse_eval, self.fuse_train, self.hsgm].into_iter().fold(0.0, f64::max)
        }
    }

    /// Random `[n, h, w, c]` input and neighbour settings; every branch and
    /// the full module against the explicit loops.
    pub fn errors_for(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Errors {
        let [n, h, w, c] = dims;
        let neighbors = NeighborSpec {
            spatial_window: [3, 5][rng.gen_range(0..2)],
            channel_window: [3, 5][rng.gen_range(0..2)],
            channel_stride: rng.gen_range(1..3),
        };
        let settings = GraphSettings { neighbors, ..Default::default() };
        let scales: Vec<usize> = vec![1, 2, 3];
        let x = rand_tensor(rng, &dims, -2.0, 2.0);
        let xm = Map4 { data: x.data(), dims };
        let thetas: Vec<Tensor> = scales.iter().map(|_| rand_tensor(rng, &[h * w], -1.5, 1.5)).collect();
        let delta = rand_tensor(rng, &[c], -1.5, 1.5);
        let gamma = rand_tensor(rng, &[c], -2.0, 2.0);
        let beta = rand_tensor(rng, &[c], -1.0, 1.0);
        let mean = rand_tensor(rng, &[c], -0.5, 0.5);
        let var = rand_tensor(rng, &[c], 0.2, 2.0);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tv: Vec<_> = thetas.iter().map(|t| tape.constant(t.clone())).collect();
        let dv = tape.constant(delta.clone());
        let gv = tape.constant(gamma.clone());
        let bv = tape.constant(beta.clone());
        let a_ms = graph::spatial_branch(&mut tape, xv, &settings, &scales, &tv).unwrap();
        let a_c = graph::channel_branch(&mut tape, xv, &settings, dv).unwrap();
        let stats = BnStats::Running { mean: &mean, var: &var };
        let (fused_eval, _) =
            graph::fuse_and_enhance(&mut tape, a_ms, a_c, xv, gv, bv, stats, settings.leaky_slope).unwrap();

        let theta_vecs: Vec<Vec<f64>> = thetas.iter().map(|t| t.data().to_vec()).collect();
        let ref_ms: Vec<Vec<f64>> =
            (0..n).map(|b| spatial_branch(&xm, b, &scales, &theta_vecs, neighbors.spatial_window)).collect();
        let ref_c: Vec<Vec<f64>> = (0..n)
            .map(|b| channel_branch(&xm, b, delta.data(), neighbors.channel_window, neighbors.channel_stride))
            .collect();
        let mut errors = Errors {
            spatial: max_diff(tape.value(a_ms).data(), &ref_ms.concat()),
            channel: max_diff(tape.value(a_c).data(), &ref_c.concat()),
            ..Default::default()
        };
        let with_residual = |o: Vec<f64>| -> Vec<f64> { o.iter().zip(x.data()).map(|(a, b)| a + b).collect() };
        let ref_eval = enhance(
            &ref_ms,
            &ref_c,
            dims,
            gamma.data(),
            beta.data(),
            Norm::Running { mean: mean.data(), var: var.data() },
            settings.leaky_slope,
        );
        errors.fuse_eval = max_diff(tape.value(fused_eval).data(), &with_residual(ref_eval));
        if n * h * w >= 2 {
            let (fused_train, _) =
                graph::fuse_and_enhance(&mut tape, a_ms, a_c, xv, gv, bv, BnStats::Batch, settings.leaky_slope)
                    .unwrap();
            let ref_train = enhance(&ref_ms, &ref_c, dims, gamma.data(), beta.data(), Norm::Batch, settings.leaky_slope);
            errors.fuse_train = max_diff(tape.value(fused_train).data(), &with_residual(ref_train));
        }

        if h % 4 == 0 {
            let cfg = HsgmConfig { graph: settings, ..Default::default() };
            let (module, mut store) = Hsgm::standalone(cfg, h, w, c).unwrap();
            for p in store.params_mut() {
                let shape = p.value.shape().to_vec();
                p.value = rand_tensor(rng, &shape, -1.5, 1.5);
            }
            for level in module.levels() {
                for piece in level {
                    *store.buffer_mut(piece.bn.running_mean) = rand_tensor(rng, &[c], -0.5, 0.5);
                    *store.buffer_mut(piece.bn.running_var) = rand_tensor(rng, &[c], 0.2, 2.0);
                }
            }
            let y = module.forward_tensor(&store, &x, Mode::Eval).unwrap();
            errors.hsgm = max_diff(y.data(), &hsgm_eval(&module, &store, &x));
        }
        errors
    }
}
