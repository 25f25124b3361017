//! `key = value` run configuration. Every key has a default; a file and
//! `--set` overrides are applied on top in order.

use std::fmt;
use std::path::PathBuf;

use hsgnet_core::experiments::ExperimentConfig;
use hsgnet_core::graph::EdgeVariant;
use hsgnet_core::hsgm::Aggregation;
use hsgnet_core::losses::Mining;
use hsgnet_core::network::HsgmStage;
use hsgnet_core::trainer::Decay;

/// Inputs of the `eval` command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalInputs {
    pub checkpoint: Option<PathBuf>,
    pub probe_features: Option<PathBuf>,
    pub probe_labels: Option<PathBuf>,
    pub gallery_features: Option<PathBuf>,
    pub gallery_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub out: PathBuf,
    /// Replaces every per-case gradcheck tolerance when set.
    pub gradcheck_tol: Option<f64>,
    /// Appends a case with a deliberately wrong backward rule.
    pub gradcheck_sabotage: bool,
    /// `(channels, height, width)` of the HSGM input for `params`.
    pub params_dims: (usize, usize, usize),
    pub eval: EvalInputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            out: PathBuf::from("out"),
            gradcheck_tol: None,
            gradcheck_sabotage: false,
            params_dims: (64, 8, 4),
            eval: EvalInputs::default(),
        }
    }
}

/// Where a bad setting came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Set(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: Option<Origin>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.origin {
            Some(Origin::Line(n)) => write!(f, "line {n}: {}", self.message),
            Some(Origin::Set(n)) => write!(f, "--set #{n}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<(), String>;

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse().map_err(|e| format!("{v:?}: {e}"))
}

fn list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|s| num(s.trim())).collect()
}

fn four(v: &str) -> Result<[usize; 4], String> {
    let l = list(v)?;
    l.as_slice().try_into().map_err(|_| format!("expected 4 comma-separated values, got {}", l.len()))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn variant_name(v: EdgeVariant) -> &'static str {
    match v {
        EdgeVariant::NeighborSoftmax => "neighbor_softmax",
        EdgeVariant::AsWritten => "as_written",
    }
}

fn aggregation_name(a: Aggregation) -> &'static str {
    match a {
        Aggregation::StripeConcat => "stripe_concat",
        Aggregation::Pyramid => "pyramid",
    }
}

fn mining_name(m: Mining) -> &'static str {
    match m {
        Mining::BatchHard => "batch_hard",
        Mining::AllPairs => "all_pairs",
    }
}

macro_rules! scalar {
    ($key:literal, $($field:tt).+) => {
        (
            $key,
            (|c: &RunConfig| c.$($field).+.to_string()) as Getter,
            (|c: &mut RunConfig, v: &str| {
                c.$($field).+ = num(v)?;
                Ok(())
            }) as Setter,
        )
    };
}

/// Every recognised key in echo order.
const FIELDS: &[(&str, Getter, Setter)] = &[
    scalar!("seed", experiment.seed),
    ("out", |c| c.out.display().to_string(), |c, v| {
        c.out = PathBuf::from(v);
        Ok(())
    }),
    scalar!("data.train_identities", experiment.data.train_identities),
    scalar!("data.test_identities", experiment.data.test_identities),
    scalar!("data.images_per_identity", experiment.data.images_per_identity),
    scalar!("data.height", experiment.data.height),
    scalar!("data.width", experiment.data.width),
    scalar!("data.parts", experiment.data.parts),
    scalar!("data.illumination", experiment.data.illumination),
    scalar!("data.flip_prob", experiment.data.flip_prob),
    scalar!("data.noise", experiment.data.noise),
    ("backbone.stage_channels", |c| join(&c.experiment.backbone.stage_channels), |c, v| {
        c.experiment.backbone.stage_channels = four(v)?;
        Ok(())
    }),
    ("backbone.stage_strides", |c| join(&c.experiment.backbone.stage_strides), |c, v| {
        c.experiment.backbone.stage_strides = four(v)?;
        Ok(())
    }),
    ("backbone.hsgm_stage", |c| c.experiment.backbone.hsgm_stage.name().into(), |c, v| {
        c.experiment.backbone.hsgm_stage = HsgmStage::parse(v).ok_or_else(|| format!("unknown stage {v:?}, expected none or S1..S4"))?;
        Ok(())
    }),
    scalar!("backbone.feature_dim", experiment.backbone.feature_dim),
    scalar!("backbone.in_channels", experiment.backbone.in_channels),
    ("hsgm.scales", |c| join(&c.experiment.hsgm.scales), |c, v| {
        c.experiment.hsgm.scales = list(v)?;
        Ok(())
    }),
    ("hsgm.splits", |c| join(&c.experiment.hsgm.splits), |c, v| {
        c.experiment.hsgm.splits = list(v)?;
        Ok(())
    }),
    scalar!("hsgm.spatial_window", experiment.hsgm.graph.neighbors.spatial_window),
    scalar!("hsgm.channel_window", experiment.hsgm.graph.neighbors.channel_window),
    scalar!("hsgm.channel_stride", experiment.hsgm.graph.neighbors.channel_stride),
    ("hsgm.edge_variant", |c| variant_name(c.experiment.hsgm.graph.variant).into(), |c, v| {
        c.experiment.hsgm.graph.variant = [EdgeVariant::NeighborSoftmax, EdgeVariant::AsWritten]
            .into_iter()
            .find(|&x| variant_name(x) == v)
            .ok_or_else(|| format!("unknown edge variant {v:?}"))?;
        Ok(())
    }),
    scalar!("hsgm.leaky_slope", experiment.hsgm.graph.leaky_slope),
    ("hsgm.aggregation", |c| aggregation_name(c.experiment.hsgm.aggregation).into(), |c, v| {
        c.experiment.hsgm.aggregation = [Aggregation::StripeConcat, Aggregation::Pyramid]
            .into_iter()
            .find(|&x| aggregation_name(x) == v)
            .ok_or_else(|| format!("unknown aggregation {v:?}"))?;
        Ok(())
    }),
    scalar!("loss.alpha", experiment.loss.alpha),
    scalar!("loss.beta", experiment.loss.beta),
    scalar!("loss.gamma", experiment.loss.gamma),
    scalar!("loss.margin", experiment.loss.margin),
    ("loss.mining", |c| mining_name(c.experiment.loss.mining).into(), |c, v| {
        c.experiment.loss.mining = [Mining::BatchHard, Mining::AllPairs]
            .into_iter()
            .find(|&x| mining_name(x) == v)
            .ok_or_else(|| format!("unknown mining {v:?}"))?;
        Ok(())
    }),
    scalar!("train.epochs", experiment.train.epochs),
    scalar!("train.warmup_lr", experiment.train.warmup_lr),
    scalar!("train.base_lr", experiment.train.base_lr),
    scalar!("train.warmup_epochs", experiment.train.warmup_epochs),
    scalar!("train.decay_start", experiment.train.decay_start),
    scalar!("train.decay_every", experiment.train.decay_every),
    ("train.decay", |c| c.experiment.train.decay.name().into(), |c, v| {
        c.experiment.train.decay = Decay::parse(v).ok_or_else(|| format!("unknown decay {v:?}, expected tenfold or ten_percent"))?;
        Ok(())
    }),
    scalar!("train.momentum", experiment.train.momentum),
    scalar!("train.weight_decay", experiment.train.weight_decay),
    scalar!("train.p", experiment.train.p),
    scalar!("train.k", experiment.train.k),
    scalar!("train.flip_prob", experiment.train.flip_prob),
    scalar!("train.eval_every", experiment.train.eval_every),
    ("gradcheck.tol", |c| c.gradcheck_tol.map(|t| t.to_string()).unwrap_or_else(|| "default".into()), |c, v| {
        c.gradcheck_tol = if v == "default" { None } else { Some(num(v)?) };
        Ok(())
    }),
    ("gradcheck.sabotage", |c| c.gradcheck_sabotage.to_string(), |c, v| {
        c.gradcheck_sabotage = flag(v)?;
        Ok(())
    }),
    scalar!("params.channels", params_dims.0),
    scalar!("params.height", params_dims.1),
    scalar!("params.width", params_dims.2),
    ("eval.checkpoint", |c| show_path(&c.eval.checkpoint), |c, v| {
        c.eval.checkpoint = path(v);
        Ok(())
    }),
    ("eval.probe_features", |c| show_path(&c.eval.probe_features), |c, v| {
        c.eval.probe_features = path(v);
        Ok(())
    }),
    ("eval.probe_labels", |c| show_path(&c.eval.probe_labels), |c, v| {
        c.eval.probe_labels = path(v);
        Ok(())
    }),
    ("eval.gallery_features", |c| show_path(&c.eval.gallery_features), |c, v| {
        c.eval.gallery_features = path(v);
        Ok(())
    }),
    ("eval.gallery_labels", |c| show_path(&c.eval.gallery_labels), |c, v| {
        c.eval.gallery_labels = path(v);
        Ok(())
    }),
];

/// Keys that fix the shape of a trained model.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "data.height",
    "data.width",
    "data.train_identities",
    "backbone.stage_channels",
    "backbone.stage_strides",
    "backbone.hsgm_stage",
    "backbone.feature_dim",
    "backbone.in_channels",
    "hsgm.scales",
    "hsgm.splits",
    "hsgm.aggregation",
];

pub fn keys() -> impl Iterator<Item = &'static str> {
    FIELDS.iter().map(|f| f.0)
}

impl RunConfig {
    /// Sets one key. Unknown keys and bad values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (_, _, setter) = FIELDS.iter().find(|f| f.0 == key).ok_or_else(|| format!("unknown key {key:?}"))?;
        setter(self, value).map_err(|e| format!("{key}: {e}"))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        FIELDS.iter().find(|f| f.0 == key).map(|f| (f.1)(self))
    }

    /// Applies a file's worth of `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |message: String| ConfigError { origin: Some(Origin::Line(i + 1)), message };
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v.trim()).map_err(at)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides from the command line.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        for (i, s) in sets.iter().enumerate() {
            let at = |message: String| ConfigError { origin: Some(Origin::Set(i + 1)), message };
            let (k, v) = s.split_once('=').ok_or_else(|| at(format!("expected key=value, got {s:?}")))?;
            self.set(k.trim(), v.trim()).map_err(at)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        FIELDS.iter().map(|(k, get, _)| format!("{k} = {}\n", get(self))).collect()
    }

    /// `(key, value)` pairs for checkpoint manifests. The output directory
    /// is left out so identical runs give identical checkpoints.
    pub fn manifest(&self) -> Vec<(String, String)> {
        FIELDS.iter().filter(|f| f.0 != "out").map(|(k, get, _)| (k.to_string(), get(self))).collect()
    }

    /// Library-level checks that need no data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.experiment;
        let checks = [e.data.validate(), e.backbone.validate(), e.hsgm.validate(), e.train.validate(), e.loss.validate()];
        for r in checks {
            r.map_err(|err| ConfigError { origin: None, message: err.to_string() })?;
        }
        if let Some(t) = self.gradcheck_tol {
            if !(t > 0.0) {
                return Err(ConfigError { origin: None, message: format!("gradcheck.tol must be positive, got {t}") });
            }
        }
        Ok(())
    }
}
