//! Hierarchical similarity graph module.
//!
//! The input map is copied once per hierarchy level and cut into
//! `splits[level]` horizontal stripes. Every stripe runs through its own
//! spatial/channel similarity graph pipeline with independent parameters,
//! and the processed levels are merged back into a map of the input shape.

use crate::error::{Error, Result};
use crate::graph::{self, GraphSettings};
use crate::nn::{self, BnLayer, BnStats, Ctx, Mode, StatsUpdate};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// Stripes are concatenated back to full height and the levels are
    /// averaged elementwise.
    #[default]
    StripeConcat,
    /// Level `l` works on the input average-pooled by `2^l`; levels are
    /// merged coarse to fine by nearest up-sampling by two and adding.
    Pyramid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsgmConfig {
    /// Pooling windows of the spatial branch.
    pub scales: Vec<usize>,
    /// Stripe count per hierarchy level.
    pub splits: Vec<usize>,
    pub graph: GraphSettings,
    pub aggregation: Aggregation,
}

impl Default for HsgmConfig {
    fn default() -> Self {
        Self {
            scales: vec![1, 2, 3],
            splits: vec![1, 2, 4],
            graph: GraphSettings::default(),
            aggregation: Aggregation::default(),
        }
    }
}

impl HsgmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config(format!("scales must be nonempty and >= 1, got {:?}", self.scales)));
        }
        if self.splits.is_empty() || self.splits[0] == 0 || self.splits.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!(
                "hierarchy splits must be positive and strictly increasing, got {:?}",
                self.splits
            )));
        }
        self.graph.neighbors.validate()
    }

    /// Input down-sampling factor of a level.
    pub fn level_factor(&self, level: usize) -> usize {
        match self.aggregation {
            Aggregation::StripeConcat => 1,
            Aggregation::Pyramid => 1 << level,
        }
    }

    /// Checks the configuration against an `h x w` input.
    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        for (level, &split) in self.splits.iter().enumerate() {
            let f = self.level_factor(level);
            if h % (split * f) != 0 {
                return Err(Error::Indivisible { height: h, split: split * f });
            }
            if w % f != 0 {
                return Err(Error::Config(format!("width {w} is not divisible by pyramid factor {f}")));
            }
        }
        Ok(())
    }

    /// `(height, width)` of each piece, per level.
    pub fn piece_dims(&self, h: usize, w: usize) -> Result<Vec<Vec<(usize, usize)>>> {
        self.validate_for(h, w)?;
        Ok(self
            .splits
            .iter()
            .enumerate()
            .map(|(level, &split)| {
                let f = self.level_factor(level);
                vec![(h / f / split, w / f); split]
            })
            .collect())
    }
}

/// Cuts `[n, h, w, c]` into `splits[l]` equal horizontal stripes per level.
pub fn hierarchical_divide(x: &Tensor, splits: &[usize]) -> Result<Vec<Vec<Tensor>>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape { shape: s.to_vec(), reason: "expected [n, h, w, c]".into() });
    }
    let (n, h, row) = (s[0], s[1], s[2] * s[3]);
    splits
        .iter()
        .map(|&split| {
            if split == 0 || h % split != 0 {
                return Err(Error::Indivisible { height: h, split });
            }
            let ph = h / split;
            Ok((0..split)
                .map(|p| {
                    let mut data = Vec::with_capacity(n * ph * row);
                    for b in 0..n {
                        let start = (b * h + p * ph) * row;
                        data.extend_from_slice(&x.data()[start..start + ph * row]);
                    }
                    Tensor::from_parts(vec![n, ph, s[2], s[3]], data)
                })
                .collect())
        })
        .collect()
}

/// Parameters of one stripe.
#[derive(Clone, Debug)]
pub struct PieceParams {
    /// One node-weight vector per scale.
    pub thetas: Vec<ParamId>,
    pub delta: ParamId,
    pub bn: BnLayer,
}

#[derive(Clone, Debug)]
pub struct Hsgm {
    cfg: HsgmConfig,
    h: usize,
    w: usize,
    c: usize,
    levels: Vec<Vec<PieceParams>>,
}

impl Hsgm {
    /// Allocates the per-piece parameters for an `h x w x c` input. Node
    /// and channel weights start at one, BN scale and shift at zero.
    pub fn register(cfg: HsgmConfig, h: usize, w: usize, c: usize, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let dims = cfg.piece_dims(h, w)?;
        let ones = |len: usize| Tensor::ones(&[len]).expect("len >= 1");
        let levels = dims
            .iter()
            .enumerate()
            .map(|(level, pieces)| {
                pieces
                    .iter()
                    .enumerate()
                    .map(|(p, &(ph, pw))| {
                        let name = format!("{prefix}.l{level}.p{p}");
                        PieceParams {
                            thetas: cfg
                                .scales
                                .iter()
                                .map(|k| store.add_param(format!("{name}.theta_k{k}"), ones(ph * pw), false))
                                .collect(),
                            delta: store.add_param(format!("{name}.delta"), ones(c), false),
                            bn: BnLayer::register(store, &format!("{name}.bn"), c, 0.0),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { cfg, h, w, c, levels })
    }

    /// A module with its own parameter store.
    pub fn standalone(cfg: HsgmConfig, h: usize, w: usize, c: usize) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let m = Self::register(cfg, h, w, c, &mut store, "hsgm")?;
        Ok((m, store))
    }

    pub fn config(&self) -> &HsgmConfig {
        &self.cfg
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn levels(&self) -> &[Vec<PieceParams>] {
        &self.levels
    }

    /// Every parameter handle owned by the module.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.levels
            .iter()
            .flatten()
            .flat_map(|p| p.thetas.iter().copied().chain([p.delta, p.bn.gamma, p.bn.beta]))
            .collect()
    }

    /// Runs one stripe through the similarity graphs; returns the residual
    /// branch `LeakyReLU(BN(A_ms * A_c))` without the skip connection.
    fn piece_branch(&self, ctx: &mut Ctx<'_>, piece: Var, params: &PieceParams) -> Result<Var> {
        let thetas: Vec<Var> = params.thetas.iter().map(|&id| ctx.var(id)).collect();
        let settings = self.cfg.graph;
        let a_ms = graph::spatial_branch(ctx.tape, piece, &settings, &self.cfg.scales, &thetas)?;
        let a_c = graph::channel_branch(ctx.tape, piece, &settings, ctx.var(params.delta))?;
        let stats = match ctx.mode {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Running {
                mean: ctx.store.buffer(params.bn.running_mean),
                var: ctx.store.buffer(params.bn.running_var),
            },
        };
        let (gamma, beta) = (ctx.var(params.bn.gamma), ctx.var(params.bn.beta));
        let (o, observed) = graph::enhance(ctx.tape, a_ms, a_c, piece, gamma, beta, stats, settings.leaky_slope)?;
        if let Some(observed) = observed {
            ctx.updates.push(StatsUpdate { layer: params.bn, observed });
        }
        Ok(o)
    }

    /// Applies the module to `x: [n, h, w, c]`; the output has the same shape.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 4 || s[1..] != [self.h, self.w, self.c] {
            return Err(Error::ShapeMismatch {
                op: "hsgm",
                lhs: s,
                rhs: vec![self.h, self.w, self.c],
            });
        }
        let levels = self.levels.len();
        match self.cfg.aggregation {
            Aggregation::StripeConcat => {
                // mean over levels of (O_l + X) == X + mean_l O_l
                let mut acc: Option<Var> = None;
                for pieces in &self.levels {
                    let ph = self.h / pieces.len();
                    let mut outs = Vec::with_capacity(pieces.len());
                    for (p, params) in pieces.iter().enumerate() {
                        let piece = ctx.tape.slice_axis(x, 1, p * ph, ph)?;
                        outs.push(self.piece_branch(ctx, piece, params)?);
                    }
                    let level = ctx.tape.concat(&outs, 1)?;
                    assert_eq!(ctx.tape.shape(level), s.as_slice(), "level output drifted from input shape");
                    acc = Some(match acc {
                        None => level,
                        Some(a) => ctx.tape.add(a, level)?,
                    });
                }
                let mean = ctx.tape.scale(acc.expect("at least one level"), 1.0 / levels as f64);
                ctx.tape.add(x, mean)
            }
            Aggregation::Pyramid => {
                let mut processed = Vec::with_capacity(levels);
                for (level, pieces) in self.levels.iter().enumerate() {
                    let pooled = nn::avg_pool_down(ctx.tape, x, self.cfg.level_factor(level))?;
                    let ph = ctx.tape.shape(pooled)[1] / pieces.len();
                    let mut outs = Vec::with_capacity(pieces.len());
                    for (p, params) in pieces.iter().enumerate() {
                        let piece = ctx.tape.slice_axis(pooled, 1, p * ph, ph)?;
                        let o = self.piece_branch(ctx, piece, params)?;
                        outs.push(ctx.tape.add(o, piece)?);
                    }
                    processed.push(ctx.tape.concat(&outs, 1)?);
                }
                let mut agg = processed.pop().expect("at least one level");
                while let Some(finer) = processed.pop() {
                    let up = nn::upsample_nearest(ctx.tape, agg, 2)?;
                    assert_eq!(ctx.tape.shape(up), ctx.tape.shape(finer), "pyramid levels out of step");
                    agg = ctx.tape.add(up, finer)?;
                }
                Ok(ctx.tape.scale(agg, 1.0 / levels as f64))
            }
        }
    }

    /// Forward pass on plain tensors.
    pub fn forward_tensor(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, mode);
        let xv = ctx.tape.constant(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Parameter count of one stripe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PieceCount {
    pub node_weights: usize,
    pub channel_weights: usize,
    pub bn_affine: usize,
}

impl PieceCount {
    pub fn total(&self) -> usize {
        self.node_weights + self.channel_weights + self.bn_affine
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub pieces: Vec<Vec<PieceCount>>,
    pub total: usize,
}

/// Closed-form parameter count for an `h x w x c` input:
/// per stripe of `ph x pw` nodes, `|scales| * ph * pw + c + 2c`.
pub fn count_params(cfg: &HsgmConfig, c: usize, h: usize, w: usize) -> Result<ParamCount> {
    let pieces: Vec<Vec<PieceCount>> = cfg
        .piece_dims(h, w)?
        .into_iter()
        .map(|level| {
            level
                .into_iter()
                .map(|(ph, pw)| PieceCount {
                    node_weights: cfg.scales.len() * ph * pw,
                    channel_weights: c,
                    bn_affine: 2 * c,
                })
                .collect()
        })
        .collect();
    let total = pieces.iter().flatten().map(PieceCount::total).sum();
    Ok(ParamCount { pieces, total })
}

/// Rough multiply-add count of one forward pass on a single `h x w x c` map.
pub fn estimate_flops(cfg: &HsgmConfig, c: usize, h: usize, w: usize) -> Result<u64> {
    let dims = cfg.piece_dims(h, w)?;
    let settings = &cfg.graph.neighbors;
    let mut total = 0u64;
    for (level, pieces) in dims.iter().enumerate() {
        let f = cfg.level_factor(level) as u64;
        if f > 1 {
            total += (h * w * c) as u64;
        }
        for &(ph, pw) in pieces {
            let d = (ph * pw) as u64;
            let cc = c as u64;
            let spatial_nb: u64 = graph::Neighborhood::spatial(ph, pw, settings.spatial_window)
                .edge_count() as u64;
            let channel_nb: u64 =
                graph::Neighborhood::channel(c, settings.channel_window, settings.channel_stride).edge_count() as u64;
            total += d * cc; // channel squeeze
            for &k in &cfg.scales {
                let k = k as u64;
                total += if k > 1 { d * k * k } else { 0 }; // pooling
                total += 3 * spatial_nb + 3 * d; // edges, aggregation, reweighting
            }
            total += d * cc + 3 * channel_nb + 3 * cc; // channel branch
            total += 5 * d * cc; // outer product, BN, activation, residual
        }
        total += (h * w * c) as u64; // level merge
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divide_heights() {
        let x = Tensor::from_fn(&[1, 4, 2, 3], |i| i as f64).unwrap();
        let levels = hierarchical_divide(&x, &[1, 2, 4]).unwrap();
        let heights: Vec<Vec<usize>> = levels.iter().map(|l| l.iter().map(|p| p.shape()[1]).collect()).collect();
        assert_eq!(heights, vec![vec![4], vec![2, 2], vec![1, 1, 1, 1]]);
        assert_eq!(levels[0][0], x);
        for level in &levels {
            let joined: Vec<f64> = level.iter().flat_map(|p| p.data().to_vec()).collect();
            assert_eq!(joined, x.data());
        }
        let err = hierarchical_divide(&x, &[3]).unwrap_err().to_string();
        assert!(err.contains('4') && err.contains('3'), "{err}");
    }

    #[test]
    fn seven_piece_sets_by_default() {
        let (m, store) = Hsgm::standalone(HsgmConfig::default(), 8, 4, 4).unwrap();
        assert_eq!(m.levels().iter().map(Vec::len).sum::<usize>(), 7);
        assert_eq!(store.num_scalars(), count_params(&HsgmConfig::default(), 4, 8, 4).unwrap().total);
    }

    #[test]
    fn count_example() {
        let cfg = HsgmConfig { scales: vec![1], splits: vec![1], ..Default::default() };
        let count = count_params(&cfg, 4, 2, 2).unwrap();
        assert_eq!(count.total, 16);
        let wide = count_params(&cfg, 4, 2, 4).unwrap();
        assert_eq!(wide.pieces[0][0].node_weights, 8);
        assert_eq!(wide.pieces[0][0].channel_weights + wide.pieces[0][0].bn_affine, 12);
    }

    #[test]
    fn config_validation() {
        let bad = HsgmConfig { splits: vec![2, 2], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = HsgmConfig { scales: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(matches!(
            HsgmConfig::default().validate_for(6, 4),
            Err(Error::Indivisible { height: 6, split: 4 })
        ));
        let pyramid = HsgmConfig { aggregation: Aggregation::Pyramid, ..Default::default() };
        assert!(pyramid.validate_for(8, 4).is_err());
        assert!(pyramid.validate_for(16, 4).is_ok());
    }

    #[test]
    fn identity_at_init() {
        let (m, store) = Hsgm::standalone(HsgmConfig::default(), 4, 3, 5).unwrap();
        let x = Tensor::from_fn(&[2, 4, 3, 5], |i| ((i * 7919) % 113) as f64 / 17.0 - 3.0).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(m.forward_tensor(&store, &x, mode).unwrap(), x);
        }
    }

    #[test]
    fn pyramid_keeps_shape() {
        let cfg = HsgmConfig { aggregation: Aggregation::Pyramid, ..Default::default() };
        let (m, mut store) = Hsgm::standalone(cfg, 16, 4, 3).unwrap();
        for p in store.params_mut() {
            if p.name.ends_with("gamma") {
                p.value = Tensor::full(p.value.shape(), 0.5).unwrap();
            }
        }
        let x = Tensor::from_fn(&[2, 16, 4, 3], |i| (i as f64 * 0.37).sin()).unwrap();
        let y = m.forward_tensor(&store, &x, Mode::Train).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}
