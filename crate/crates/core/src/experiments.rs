//! Verification battery, insertion-stage and scale ablations, and parameter
//! accounting.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{generate_dataset, Dataset, SyntheticReidSpec};
use crate::error::Result;
use crate::evaluator::RankingMetrics;
use crate::gradcheck::{gradcheck, DEFAULT_STEP, DEFAULT_TOL};
use crate::graph::{self, EdgeVariant, GraphKind, GraphSettings, Neighborhood, NeighborSpec};
use crate::hsgm::{count_params, estimate_flops, Aggregation, Hsgm, HsgmConfig};
use crate::losses::{self, LossConfig, Mining};
use crate::network::{BackboneConfig, HsgmStage, Model};
use crate::nn::{self, BnStats, Ctx, Mode};
use crate::params::ParamStore;
use crate::tape::{Tape, Var, VjpRule};
use crate::tensor::Tensor;
use crate::trainer::{train, Artifacts, TrainConfig, TrainOutcome};

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A named scalar function of some inputs, checked against finite
/// differences.
pub struct GradcheckCase {
    pub group: &'static str,
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub tol: f64,
    pub f: CaseFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseOutcome {
    pub group: &'static str,
    pub name: &'static str,
    pub max_error: f64,
    pub tol: f64,
    /// Set when the case could not be evaluated at all.
    pub error: Option<String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_error < self.tol
    }

    pub fn line(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        match &self.error {
            Some(e) => format!("{status}\t{}/{}\terror: {e}", self.group, self.name),
            None => format!("{status}\t{}/{}\tmax_error={:.3e}\ttol={:.0e}", self.group, self.name, self.max_error, self.tol),
        }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng)).expect("nonempty shape")
}

/// Reduces `y` to `sum(y * w)` with fixed pseudo-random weights, so every
/// output element carries a distinct cotangent.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i * 7919 % 113) as f64 / 56.0) - 1.0)?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn case(
    group: &'static str,
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> GradcheckCase {
    GradcheckCase { group, name, inputs, tol: DEFAULT_TOL, f: Box::new(f) }
}

fn hsgm_case(name: &'static str, cfg: HsgmConfig, dims: [usize; 4], rng: &mut ChaCha8Rng) -> GradcheckCase {
    let [n, h, w, c] = dims;
    let (module, mut store) = Hsgm::standalone(cfg, h, w, c).expect("valid case config");
    // move away from the zero-gamma start so every path carries gradient
    for p in store.params_mut() {
        let noise = randn(rng, p.value.shape());
        p.value = p.value.add(&noise.scale(0.5)).expect("same shape");
    }
    let mut inputs = vec![randn(rng, &[n, h, w, c])];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    case("hsgm", name, inputs, move |tape, v| {
        let mut ctx = Ctx { tape, store: &store, vars: v[1..].to_vec(), mode: Mode::Train, updates: Vec::new() };
        let y = module.forward(&mut ctx, v[0])?;
        project(ctx.tape, y)
    })
}

fn micro_network_case(rng: &mut ChaCha8Rng) -> GradcheckCase {
    let cfg = BackboneConfig {
        stage_channels: [2, 2, 2, 2],
        stage_strides: [2, 1, 1, 1],
        hsgm_stage: HsgmStage::S3,
        feature_dim: 2,
        num_classes: 2,
        in_channels: 3,
    };
    let mut model = Model::new(cfg, HsgmConfig::default(), (8, 8), 11).expect("valid micro config");
    for p in model.store.params_mut().iter_mut().filter(|p| p.name.starts_with("hsgm")) {
        let noise = randn(rng, p.value.shape());
        p.value = p.value.add(&noise.scale(0.5)).expect("same shape");
    }
    let images = randn(rng, &[4, 8, 8, 3]);
    let labels = [0, 0, 1, 1];
    let inputs: Vec<Tensor> = model.store.params().iter().map(|p| p.value.clone()).collect();
    let loss = LossConfig::default();
    let mut c = case("network", "micro_network_total_loss", inputs, move |tape, v| {
        let x = tape.constant(images.clone());
        let mut ctx = Ctx { tape, store: &model.store, vars: v.to_vec(), mode: Mode::Train, updates: Vec::new() };
        let out = model.forward(&mut ctx, x)?;
        let trip = losses::triplet_loss(ctx.tape, out.gmp, &labels, loss.margin, loss.mining)?;
        let ce = losses::lsce_loss(ctx.tape, out.logits, &labels, loss.gamma)?;
        losses::total_loss(ctx.tape, trip, ce, loss.alpha, loss.beta)
    });
    c.tol = 1e-4;
    c
}

/// Every differentiable operation in the crate, on small random inputs.
pub fn gradcheck_battery(seed: u64) -> Vec<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let settings = GraphSettings::default();
    let as_written = GraphSettings { variant: EdgeVariant::AsWritten, ..settings };
    let spatial = Neighborhood::for_kind(GraphKind::Spatial, (3, 4, 1), &NeighborSpec::default());
    let channel = Neighborhood::channel(6, 5, 2);
    let mut cases = vec![
        case("tensor_core", "add_broadcast", vec![randn(r, &[2, 3]), randn(r, &[3])], |t, v| {
            let y = t.add(v[0], v[1])?;
            project(t, y)
        }),
        case("tensor_core", "sub_mul_broadcast", vec![randn(r, &[2, 1, 3]), randn(r, &[4, 1])], |t, v| {
            let d = t.sub(v[0], v[1])?;
            let y = t.mul(d, v[1])?;
            project(t, y)
        }),
        case("tensor_core", "exp_scale", vec![randn(r, &[5])], |t, v| {
            let e = t.exp(v[0]);
            let y = t.scale(e, -1.5);
            project(t, y)
        }),
        case("tensor_core", "leaky_relu_relu", vec![randn(r, &[6])], |t, v| {
            let a = t.leaky_relu(v[0], 0.01);
            let b = t.relu(v[0]);
            let y = t.add(a, b)?;
            project(t, y)
        }),
        case("tensor_core", "matmul_transpose", vec![randn(r, &[3, 4]), randn(r, &[2, 4])], |t, v| {
            let bt = t.transpose(v[1])?;
            let y = t.matmul(v[0], bt)?;
            project(t, y)
        }),
        case("tensor_core", "batched_matmul", vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 2])], |t, v| {
            let y = t.batched_matmul(v[0], v[1])?;
            project(t, y)
        }),
        case("tensor_core", "mean_axis_reshape", vec![randn(r, &[2, 3, 4])], |t, v| {
            let m = t.mean_axis(v[0], 1)?;
            let y = t.reshape(m, &[8])?;
            let s = t.mean(y);
            let p = project(t, y)?;
            t.add(s, p)
        }),
        case("tensor_core", "slice_concat", vec![randn(r, &[2, 4, 3])], |t, v| {
            let a = t.slice_axis(v[0], 1, 0, 1)?;
            let b = t.slice_axis(v[0], 1, 1, 3)?;
            let y = t.concat(&[b, a, b], 1)?;
            project(t, y)
        }),
        case("network", "conv2d_stride2_pad1", vec![randn(r, &[2, 5, 4, 3]), randn(r, &[2, 3, 3, 3])], |t, v| {
            let y = nn::conv2d(t, v[0], v[1], 2, 1)?;
            project(t, y)
        }),
        case("network", "batch_norm_train", vec![randn(r, &[3, 2, 2, 3]), randn(r, &[3]), randn(r, &[3])], |t, v| {
            let (y, _) = nn::batch_norm(t, v[0], v[1], v[2], BnStats::Batch)?;
            project(t, y)
        }),
        {
            let (mean, var) = (randn(r, &[3]), randn(r, &[3]).map(|x| x * x + 0.5));
            case("network", "batch_norm_eval", vec![randn(r, &[2, 2, 2, 3]), randn(r, &[3]), randn(r, &[3])], move |t, v| {
                let (y, _) = nn::batch_norm(t, v[0], v[1], v[2], BnStats::Running { mean: &mean, var: &var })?;
                project(t, y)
            })
        },
        case("network", "global_max_pool", vec![randn(r, &[2, 3, 2, 4])], |t, v| {
            let y = nn::global_max_pool(t, v[0])?;
            project(t, y)
        }),
        case("network", "classify", vec![randn(r, &[3, 4]), randn(r, &[5, 4])], |t, v| {
            let y = crate::network::classify(t, v[0], v[1])?;
            project(t, y)
        }),
        case("hsgm", "avg_pool_down", vec![randn(r, &[1, 4, 4, 2])], |t, v| {
            let y = nn::avg_pool_down(t, v[0], 2)?;
            project(t, y)
        }),
        case("hsgm", "upsample_nearest", vec![randn(r, &[1, 2, 1, 3])], |t, v| {
            let y = nn::upsample_nearest(t, v[0], 2)?;
            project(t, y)
        }),
        case("graph_primitives", "channel_squeeze", vec![randn(r, &[2, 2, 3, 4])], |t, v| {
            let y = graph::channel_squeeze(t, v[0])?;
            project(t, y)
        }),
        case("graph_primitives", "spatial_squeeze", vec![randn(r, &[2, 2, 3, 4])], |t, v| {
            let y = graph::spatial_squeeze(t, v[0])?;
            project(t, y)
        }),
        case("graph_primitives", "avg_pool_clipped_k2", vec![randn(r, &[2, 3, 4])], |t, v| {
            let y = graph::avg_pool_clipped(t, v[0], 2)?;
            project(t, y)
        }),
        case("graph_primitives", "avg_pool_clipped_k3", vec![randn(r, &[1, 4, 3])], |t, v| {
            let y = graph::avg_pool_clipped(t, v[0], 3)?;
            project(t, y)
        }),
        {
            let nb = spatial.clone();
            case("graph_primitives", "edges_spatial_softmax", vec![randn(r, &[2, 12])], move |t, v| {
                let y = graph::build_edges(t, v[0], &nb, EdgeVariant::NeighborSoftmax)?;
                project(t, y)
            })
        },
        {
            let nb = channel.clone();
            case("graph_primitives", "edges_channel_softmax", vec![randn(r, &[2, 6])], move |t, v| {
                let y = graph::build_edges(t, v[0], &nb, EdgeVariant::NeighborSoftmax)?;
                project(t, y)
            })
        },
        {
            let nb = spatial.clone();
            case("graph_primitives", "edges_as_written", vec![randn(r, &[2, 12])], move |t, v| {
                let y = graph::build_edges(t, v[0], &nb, EdgeVariant::AsWritten)?;
                project(t, y)
            })
        },
        case("graph_primitives", "aggregate_nodes", vec![randn(r, &[2, 3, 3]), randn(r, &[2, 3])], |t, v| {
            let y = graph::aggregate_nodes(t, v[0], v[1])?;
            project(t, y)
        }),
        case("graph_primitives", "apply_node_weights", vec![randn(r, &[2, 4]), randn(r, &[4])], |t, v| {
            let y = graph::apply_node_weights(t, v[0], v[1])?;
            project(t, y)
        }),
        case(
            "graph_primitives",
            "spatial_branch",
            vec![randn(r, &[2, 3, 2, 3]), randn(r, &[6]), randn(r, &[6]), randn(r, &[6])],
            move |t, v| {
                let y = graph::spatial_branch(t, v[0], &settings, &[1, 2, 3], &v[1..4])?;
                project(t, y)
            },
        ),
        case("graph_primitives", "spatial_branch_as_written", vec![randn(r, &[1, 2, 3, 2]), randn(r, &[6])], move |t, v| {
            let y = graph::spatial_branch(t, v[0], &as_written, &[2], &v[1..2])?;
            project(t, y)
        }),
        case("graph_primitives", "channel_branch", vec![randn(r, &[2, 2, 2, 5]), randn(r, &[5])], move |t, v| {
            let y = graph::channel_branch(t, v[0], &settings, v[1])?;
            project(t, y)
        }),
        case(
            "graph_primitives",
            "fuse_and_enhance",
            vec![randn(r, &[2, 2, 3, 1]), randn(r, &[2, 4]), randn(r, &[2, 2, 3, 4]), randn(r, &[4]), randn(r, &[4])],
            |t, v| {
                let (y, _) = graph::fuse_and_enhance(t, v[0], v[1], v[2], v[3], v[4], BnStats::Batch, 0.01)?;
                project(t, y)
            },
        ),
        case("losses", "lsce", vec![randn(r, &[3, 4])], |t, v| losses::lsce_loss(t, v[0], &[0, 3, 1], 0.1)),
        case("losses", "pairwise_distances", vec![randn(r, &[4, 3])], |t, v| {
            let y = losses::pairwise_distances(t, v[0])?;
            project(t, y)
        }),
        case("losses", "triplet_batch_hard", vec![randn(r, &[6, 3])], |t, v| {
            losses::triplet_loss(t, v[0], &[0, 0, 1, 1, 2, 2], 1.2, Mining::BatchHard)
        }),
        case("losses", "triplet_all_pairs", vec![randn(r, &[4, 3])], |t, v| {
            losses::triplet_loss(t, v[0], &[0, 1, 0, 1], 3.0, Mining::AllPairs)
        }),
        case("losses", "total_loss", vec![randn(r, &[4, 3]), randn(r, &[4, 2])], |t, v| {
            let trip = losses::triplet_loss(t, v[0], &[0, 0, 1, 1], 1.2, Mining::BatchHard)?;
            let ce = losses::lsce_loss(t, v[1], &[0, 0, 1, 1], 0.1)?;
            losses::total_loss(t, trip, ce, 0.5, 1.0)
        }),
    ];
    cases.push(hsgm_case("hsgm_stripe_concat", HsgmConfig::default(), [2, 4, 2, 3], r));
    let pyramid = HsgmConfig { splits: vec![1, 2], scales: vec![1, 2], aggregation: Aggregation::Pyramid, ..Default::default() };
    cases.push(hsgm_case("hsgm_pyramid", pyramid, [2, 4, 4, 2], r));
    cases.push(micro_network_case(r));
    cases
}

/// `exp` whose backward pass has the wrong sign.
struct SabotagedExp;

impl VjpRule for SabotagedExp {
    fn name(&self) -> &'static str {
        "sabotaged_exp"
    }
    fn vjp(&self, _: &[&Tensor], output: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let g = output.mul(grad).expect("same shape").scale(-1.0);
        vec![Some(g)]
    }
}

/// A case built on a deliberately broken backward rule; it must fail.
pub fn sabotaged_case() -> GradcheckCase {
    let x = Tensor::vector(vec![0.3, -0.7, 1.1]).expect("nonempty");
    case("fixture", "sabotaged_exp", vec![x], |t, v| {
        let value = t.value(v[0]).map(f64::exp);
        let y = t.record(value, &[v[0]], SabotagedExp);
        project(t, y)
    })
}

/// Runs the cases; `tol` overrides every case tolerance when given.
pub fn run_gradchecks(cases: &[GradcheckCase], tol: Option<f64>) -> Vec<CaseOutcome> {
    cases
        .iter()
        .map(|c| {
            let tol = tol.unwrap_or(c.tol);
            match gradcheck(&c.f, &c.inputs, DEFAULT_STEP, tol) {
                Ok(report) => CaseOutcome { group: c.group, name: c.name, max_error: report.max_error, tol, error: None },
                Err(e) => CaseOutcome { group: c.group, name: c.name, max_error: f64::INFINITY, tol, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// Everything a training run depends on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: SyntheticReidSpec,
    pub backbone: BackboneConfig,
    pub hsgm: HsgmConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl ExperimentConfig {
    pub fn dataset(&self) -> Result<Dataset> {
        generate_dataset(&self.data, self.seed)
    }

    /// A freshly initialised model sized for the dataset.
    pub fn model(&self, data: &Dataset) -> Result<Model> {
        let backbone = BackboneConfig { num_classes: data.num_train_classes(), ..self.backbone.clone() };
        Model::new(backbone, self.hsgm.clone(), (self.data.height, self.data.width), self.seed)
    }

    pub fn run(&self, data: &Dataset, artifacts: Option<&Artifacts<'_>>) -> Result<(Model, TrainOutcome)> {
        let mut model = self.model(data)?;
        let train_cfg = TrainConfig { seed: self.seed, ..self.train.clone() };
        let outcome = train(&mut model, data, &train_cfg, &self.loss, artifacts)?;
        Ok((model, outcome))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub metrics: RankingMetrics,
}

fn best_row(rows: &[AblationRow]) -> Option<&AblationRow> {
    rows.iter().fold(None, |best: Option<&AblationRow>, r| match best {
        Some(b) if b.metrics.map >= r.metrics.map => Some(b),
        _ => Some(r),
    })
}

/// Trains one model per insertion stage on the same data and seed.
/// Each run writes its artifacts under `dir/<stage>` when `dir` is given.
pub fn ablate_stage(exp: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let data = exp.dataset()?;
    let mut rows = Vec::new();
    for stage in HsgmStage::ALL {
        let variant = ExperimentConfig { backbone: BackboneConfig { hsgm_stage: stage, ..exp.backbone.clone() }, ..exp.clone() };
        let (_, outcome) = run_in(&variant, &data, dir, stage.name())?;
        rows.push(AblationRow { label: stage.name().to_string(), metrics: outcome.final_metrics });
    }
    Ok(rows)
}

pub fn stage_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("stage\tRank1\tmAP\tcmc@5\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.4}\t{:.4}\t{:.4}", r.label, r.metrics.rank1(), r.metrics.map, r.metrics.cmc_at(5));
    }
    if let Some(b) = best_row(rows) {
        let _ = writeln!(s, "# highest mAP: {}", b.label);
    }
    s
}

pub const SCALE_SETS: [&[usize]; 4] = [&[1], &[2], &[3], &[1, 2, 3]];

/// Trains one model per pooling-scale set with the configured stage.
pub fn ablate_scales(exp: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let data = exp.dataset()?;
    let mut rows = Vec::new();
    for set in SCALE_SETS {
        let label = set.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let variant = ExperimentConfig { hsgm: HsgmConfig { scales: set.to_vec(), ..exp.hsgm.clone() }, ..exp.clone() };
        let (_, outcome) = run_in(&variant, &data, dir, &format!("scales_{}", label.replace(',', "_")))?;
        rows.push(AblationRow { label, metrics: outcome.final_metrics });
    }
    Ok(rows)
}

/// One row per scale set; `x` marks the scales used.
pub fn scales_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("k1=1\tk2=2\tk3=3\tRank1\tmAP\n");
    for r in rows {
        let used: Vec<usize> = r.label.split(',').filter_map(|k| k.parse().ok()).collect();
        let mark = |k: usize| if used.contains(&k) { "x" } else { "-" };
        let _ = writeln!(s, "{}\t{}\t{}\t{:.4}\t{:.4}", mark(1), mark(2), mark(3), r.metrics.rank1(), r.metrics.map);
    }
    if let Some(b) = best_row(rows) {
        let _ = writeln!(s, "# highest mAP: scales {}", b.label);
    }
    s
}

fn run_in(exp: &ExperimentConfig, data: &Dataset, dir: Option<&Path>, sub: &str) -> Result<(Model, TrainOutcome)> {
    match dir {
        Some(d) => {
            let sub = d.join(sub);
            std::fs::create_dir_all(&sub)?;
            exp.run(data, Some(&Artifacts { dir: &sub, manifest: Vec::new() }))
        }
        None => exp.run(data, None),
    }
}

/// Closed-form and enumerated HSGM parameter counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamsReport {
    pub dims: (usize, usize, usize),
    pub closed_form: usize,
    pub enumerated: usize,
    pub flops: u64,
    pub per_level: Vec<usize>,
}

impl ParamsReport {
    pub fn text(&self) -> String {
        let (c, h, w) = self.dims;
        let mut s = format!("input\tc={c}\th={h}\tw={w}\n");
        for (l, n) in self.per_level.iter().enumerate() {
            let _ = writeln!(s, "level{l}\t{n}");
        }
        let _ = writeln!(s, "closed_form\t{}", self.closed_form);
        let _ = writeln!(s, "enumerated\t{}", self.enumerated);
        let _ = writeln!(s, "flops_estimate\t{}", self.flops);
        s
    }
}

/// Counts parameters two ways: from the closed form and by registering the
/// module and summing what it allocated.
pub fn params_report(cfg: &HsgmConfig, c: usize, h: usize, w: usize) -> Result<ParamsReport> {
    let count = count_params(cfg, c, h, w)?;
    let (_, store): (Hsgm, ParamStore) = Hsgm::standalone(cfg.clone(), h, w, c)?;
    Ok(ParamsReport {
        dims: (c, h, w),
        closed_form: count.total,
        enumerated: store.num_scalars(),
        flops: estimate_flops(cfg, c, h, w)?,
        per_level: count.pieces.iter().map(|l| l.iter().map(|p| p.total()).sum()).collect(),
    })
}
