//! Four-stage convolutional backbone with an optional HSGM insertion,
//! global max pooling and a CBR head feeding a bias-free classifier.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hsgm::{Hsgm, HsgmConfig};
use crate::io::Checkpoint;
use crate::nn::{self, BnLayer, Ctx, Mode};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Where the HSGM sits: after backbone stage 1..4, or nowhere.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum HsgmStage {
    None,
    S1,
    S2,
    #[default]
    S3,
    S4,
}

impl HsgmStage {
    pub const ALL: [HsgmStage; 5] = [Self::None, Self::S1, Self::S2, Self::S3, Self::S4];

    /// Zero-based index of the stage the module follows.
    pub fn after_stage(self) -> Option<usize> {
        match self {
            Self::None => None,
            Self::S1 => Some(0),
            Self::S2 => Some(1),
            Self::S3 => Some(2),
            Self::S4 => Some(3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
            Self::S4 => "S4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 4],
    /// The last stride must be 1.
    pub stage_strides: [usize; 4],
    pub hsgm_stage: HsgmStage,
    /// Width of the CBR output.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            stage_strides: [2, 2, 2, 1],
            hsgm_stage: HsgmStage::S3,
            feature_dim: 128,
            num_classes: 16,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_strides[3] != 1 {
            return Err(Error::Config(format!("last stage stride must be 1, got {}", self.stage_strides[3])));
        }
        if self.stage_strides.contains(&0) || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage strides and channels must be >= 1".into()));
        }
        if self.feature_dim == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("feature_dim, num_classes and in_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial size after each stage for an `h x w` input.
    pub fn stage_dims(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        let mut dims = [(0, 0); 4];
        let (mut h, mut w) = (h, w);
        for (i, &s) in self.stage_strides.iter().enumerate() {
            // 3x3 kernel, padding 1
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
            dims[i] = (h, w);
        }
        dims
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: ParamId,
    bn: BnLayer,
    stride: usize,
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Global-max-pooled backbone feature, `[batch, stage_channels[3]]`;
    /// used for retrieval and the triplet loss.
    pub gmp: Var,
    /// CBR head output, `[batch, feature_dim]`.
    pub cbr: Var,
    /// `[batch, num_classes]`.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub retrieval: Tensor,
    pub embedding: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: BackboneConfig,
    hsgm_cfg: HsgmConfig,
    input_hw: (usize, usize),
    stages: Vec<Stage>,
    hsgm: Option<Hsgm>,
    cbr_weight: ParamId,
    cbr_bn: BnLayer,
    classifier: ParamId,
    pub store: ParamStore,
}

impl Model {
    /// Builds and initializes a model for `input_hw` images.
    ///
    /// Backbone weights are drawn from `seed` before anything else, and the
    /// HSGM consumes no randomness, so the backbone is identical for every
    /// insertion stage.
    pub fn new(cfg: BackboneConfig, hsgm_cfg: HsgmConfig, input_hw: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        hsgm_cfg.validate()?;
        let dims = cfg.stage_dims(input_hw.0, input_hw.1);
        if let Some(i) = cfg.hsgm_stage.after_stage() {
            let (h, w) = dims[i];
            hsgm_cfg.validate_for(h, w).map_err(|e| {
                Error::Config(format!(
                    "HSGM after stage {} sees a {h}x{w} map for {}x{} input: {e}",
                    i + 1,
                    input_hw.0,
                    input_hw.1
                ))
            })?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| dist.sample(&mut rng)).expect("nonempty shape")
        };
        let mut stages = Vec::with_capacity(4);
        let mut cin = cfg.in_channels;
        for (i, (&cout, &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_strides).enumerate() {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let conv = store.add_param(format!("stage{}.conv", i + 1), normal(&[cout, 3, 3, cin], std), true);
            let bn = BnLayer::register(&mut store, &format!("stage{}.bn", i + 1), cout, 1.0);
            stages.push(Stage { conv, bn, stride });
            cin = cout;
        }
        let c4 = cfg.stage_channels[3];
        let cbr_weight = store.add_param("head.cbr.weight", normal(&[c4, cfg.feature_dim], (2.0 / c4 as f64).sqrt()), true);
        let cbr_bn = BnLayer::register(&mut store, "head.cbr.bn", cfg.feature_dim, 1.0);
        let classifier = store.add_param("head.classifier", normal(&[cfg.num_classes, cfg.feature_dim], 0.01), true);
        let hsgm = match cfg.hsgm_stage.after_stage() {
            Some(i) => {
                let (h, w) = dims[i];
                Some(Hsgm::register(hsgm_cfg.clone(), h, w, cfg.stage_channels[i], &mut store, "hsgm")?)
            }
            None => None,
        };
        Ok(Self { cfg, hsgm_cfg, input_hw, stages, hsgm, cbr_weight, cbr_bn, classifier, store })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn hsgm_config(&self) -> &HsgmConfig {
        &self.hsgm_cfg
    }

    pub fn hsgm(&self) -> Option<&Hsgm> {
        self.hsgm.as_ref()
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.input_hw;
        if shape.len() != 4 || shape[1..] != [h, w, self.cfg.in_channels] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: vec![h, w, self.cfg.in_channels],
            });
        }
        Ok(())
    }

    /// `images: [batch, h, w, in_channels]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, images: Var) -> Result<ModelOutput> {
        self.check_input(ctx.tape.shape(images))?;
        let mut x = images;
        for (i, stage) in self.stages.iter().enumerate() {
            let conv = nn::conv2d(ctx.tape, x, ctx.var(stage.conv), stage.stride, 1)?;
            let normed = ctx.batch_norm(conv, stage.bn)?;
            x = ctx.tape.relu(normed);
            if self.cfg.hsgm_stage.after_stage() == Some(i) {
                x = self.hsgm.as_ref().expect("registered with its stage").forward(ctx, x)?;
            }
        }
        let gmp = nn::global_max_pool(ctx.tape, x)?;
        // 1x1 convolution on a 1x1 map is a matrix product
        let proj = ctx.tape.matmul(gmp, ctx.var(self.cbr_weight))?;
        let normed = ctx.batch_norm(proj, self.cbr_bn)?;
        let cbr = ctx.tape.relu(normed);
        let logits = classify(ctx.tape, cbr, ctx.var(self.classifier))?;
        Ok(ModelOutput { gmp, cbr, logits })
    }

    /// Eval-mode features for a batch of images.
    pub fn forward_features(&self, images: &Tensor) -> Result<Features> {
        self.check_input(images.shape())?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval);
        let x = ctx.tape.constant(images.clone());
        let out = self.forward(&mut ctx, x)?;
        Ok(Features {
            retrieval: tape.value(out.gmp).clone(),
            embedding: tape.value(out.cbr).clone(),
        })
    }

    /// Retrieval features computed in chunks of `batch` images.
    pub fn extract_features(&self, images: &Tensor, batch: usize) -> Result<Tensor> {
        let s = images.shape();
        let per = s[1..].iter().product::<usize>();
        let mut out = Vec::new();
        let mut dim = 0;
        for chunk in images.data().chunks(per * batch.max(1)) {
            let n = chunk.len() / per;
            let mut shape = s.to_vec();
            shape[0] = n;
            let f = self.forward_features(&Tensor::new(shape, chunk.to_vec())?)?;
            dim = f.retrieval.shape()[1];
            out.extend_from_slice(f.retrieval.data());
        }
        Tensor::new(vec![s[0], dim], out)
    }
}

impl Model {
    pub fn to_checkpoint(&self, manifest: Vec<(String, String)>) -> Checkpoint {
        let tensors = self.store.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Checkpoint { manifest, tensors }
    }

    /// Restores parameters and BN statistics; names and shapes must match.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let named: HashMap<String, Tensor> = ckpt.tensors.iter().cloned().collect();
        if named.len() != ckpt.tensors.len() {
            return Err(Error::Checkpoint("duplicate tensor names".into()));
        }
        self.store.load_named(&named)
    }
}

/// `logits = x W^T` with `W: [classes, dim]`, no bias.
pub fn classify(tape: &mut Tape, features: Var, weight: Var) -> Result<Var> {
    let wt = tape.transpose(weight)?;
    tape.matmul(features, wt)
}
