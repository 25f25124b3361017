//! Command-line driver: config resolution and one function per subcommand.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use hsgnet_core::data::{generate_dataset, Split};
use hsgnet_core::evaluator::{evaluate, RankingMetrics};
use hsgnet_core::experiments::{
    ablate_scales, ablate_stage, gradcheck_battery, params_report, run_gradchecks, sabotaged_case, scales_table,
    stage_table,
};
use hsgnet_core::io::{read_features, read_labels, write_features, write_labels, Checkpoint};
use hsgnet_core::trainer::{Artifacts, FINAL_CHECKPOINT};
use hsgnet_core::Tensor;

pub use config::{ConfigError, RunConfig};

pub const RESOLVED_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Parser)]
#[command(name = "hsgnet", about = "Hierarchical similarity graph re-identification toolkit")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
    /// Train on the synthetic dataset; writes log and checkpoints.
    Train,
    /// Score a checkpoint on the synthetic split, or score feature files.
    Eval,
    /// Train one model per HSGM insertion stage.
    AblateStage,
    /// Train one model per pooling-scale set.
    AblateScales,
    /// Closed-form and enumerated HSGM parameter counts.
    Params,
    /// Write the synthetic dataset as feature and label files.
    GenData,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Run(hsgnet_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<hsgnet_core::Error> for CliError {
    fn from(e: hsgnet_core::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

/// Finished commands either verified what they set out to or did not.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    VerificationFailed,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Defaults, then the file, then `--set`, then the dedicated flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        cfg.apply_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    }
    cfg.apply_sets(&cli.sets)?;
    if let Some(s) = cli.seed {
        cfg.experiment.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = resolve(&cli).and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::VerificationFailed) => EXIT_VERIFY,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome, CliError> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_FILE), cfg.to_text())?;
    match command {
        Command::Gradcheck => gradcheck(cfg),
        Command::Train => train(cfg),
        Command::Eval => eval(cfg),
        Command::AblateStage => {
            let table = stage_table(&ablate_stage(&cfg.experiment, Some(&cfg.out))?);
            emit(&cfg.out, "ablate_stage.tsv", &table)
        }
        Command::AblateScales => {
            let table = scales_table(&ablate_scales(&cfg.experiment, Some(&cfg.out))?);
            emit(&cfg.out, "ablate_scales.tsv", &table)
        }
        Command::Params => params(cfg),
        Command::GenData => gen_data(cfg),
    }
}

fn emit(dir: &Path, name: &str, text: &str) -> Result<Outcome, CliError> {
    print!("{text}");
    fs::write(dir.join(name), text)?;
    Ok(Outcome::Ok)
}

fn gradcheck(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let mut cases = gradcheck_battery(cfg.experiment.seed);
    if cfg.gradcheck_sabotage {
        cases.push(sabotaged_case());
    }
    let outcomes = run_gradchecks(&cases, cfg.gradcheck_tol);
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    let mut report: String = outcomes.iter().map(|o| o.line() + "\n").collect();
    let _ = writeln!(report, "# {} of {} passed", outcomes.len() - failed, outcomes.len());
    print!("{report}");
    fs::write(cfg.out.join("gradcheck_report.tsv"), report)?;
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::VerificationFailed })
}

fn train(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let data = cfg.experiment.dataset()?;
    let artifacts = Artifacts { dir: &cfg.out, manifest: cfg.manifest() };
    let (_, outcome) = cfg.experiment.run(&data, Some(&artifacts))?;
    let m = &outcome.final_metrics;
    println!("final\tRank1 {:.4}\tmAP {:.4}", m.rank1(), m.map);
    println!("best\tepoch {}\tmAP {:.4}", outcome.best.0, outcome.best.1.map);
    fs::write(cfg.out.join(METRICS_FILE), m.report())?;
    Ok(Outcome::Ok)
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref().ok_or_else(|| CliError::Config(format!("{key} is required")))
}

fn eval(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let e = &cfg.eval;
    let metrics = if e.probe_features.is_some() || e.gallery_features.is_some() {
        let probe = read_features(required(&e.probe_features, "eval.probe_features")?)?;
        let probe_labels = read_labels(required(&e.probe_labels, "eval.probe_labels")?)?;
        let gallery = read_features(required(&e.gallery_features, "eval.gallery_features")?)?;
        let gallery_labels = read_labels(required(&e.gallery_labels, "eval.gallery_labels")?)?;
        score(&probe, &probe_labels, &gallery, &gallery_labels)?
    } else {
        let path = e.checkpoint.clone().unwrap_or_else(|| cfg.out.join(FINAL_CHECKPOINT));
        if !path.exists() {
            return Err(CliError::Config(format!(
                "checkpoint {} not found; set eval.checkpoint or provide feature files",
                path.display()
            )));
        }
        let ckpt = Checkpoint::read(&path)?;
        check_manifest(cfg, &ckpt)?;
        let data = cfg.experiment.dataset()?;
        let mut model = cfg.experiment.model(&data)?;
        model.load_checkpoint(&ckpt)?;
        let probe = model.extract_features(&data.probe.images, 64)?;
        let gallery = model.extract_features(&data.gallery.images, 64)?;
        write_features(&cfg.out.join("probe_features.hsgf"), &probe)?;
        write_labels(&cfg.out.join("probe_labels.txt"), &data.probe.labels)?;
        write_features(&cfg.out.join("gallery_features.hsgf"), &gallery)?;
        write_labels(&cfg.out.join("gallery_labels.txt"), &data.gallery.labels)?;
        score(&probe, &data.probe.labels, &gallery, &data.gallery.labels)?
    };
    emit(&cfg.out, METRICS_FILE, &metrics.report())
}

fn score(probe: &Tensor, pl: &[usize], gallery: &Tensor, gl: &[usize]) -> Result<RankingMetrics, CliError> {
    if probe.shape()[0] != pl.len() {
        return Err(CliError::Config(format!("{} probe features but {} probe labels", probe.shape()[0], pl.len())));
    }
    Ok(evaluate(probe, pl, gallery, gl, 10)?)
}

/// Names every architecture key on which the checkpoint and config disagree.
fn check_manifest(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<(), CliError> {
    let diffs: Vec<String> = config::ARCHITECTURE_KEYS
        .iter()
        .filter_map(|&k| {
            let saved = ckpt.manifest_value(k)?;
            let ours = cfg.get(k)?;
            (saved != ours).then(|| format!("{k} (checkpoint {saved}, config {ours})"))
        })
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!("checkpoint does not match config: {}", diffs.join(", "))))
    }
}

fn params(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let (c, h, w) = cfg.params_dims;
    let report = params_report(&cfg.experiment.hsgm, c, h, w)?;
    emit(&cfg.out, "params.tsv", &report.text())?;
    Ok(if report.closed_form == report.enumerated { Outcome::Ok } else { Outcome::VerificationFailed })
}

fn write_split(dir: &Path, name: &str, split: &Split) -> Result<(), CliError> {
    let n = split.len();
    let flat = split.images.reshape(&[n, split.images.numel() / n.max(1)])?;
    write_features(&dir.join(format!("{name}_images.hsgf")), &flat)?;
    write_labels(&dir.join(format!("{name}_labels.txt")), &split.labels)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let data = generate_dataset(&cfg.experiment.data, cfg.experiment.seed)?;
    let mut summary = String::from("split\timages\tidentities\n");
    for (name, split) in [("train", &data.train), ("probe", &data.probe), ("gallery", &data.gallery)] {
        write_split(&cfg.out, name, split)?;
        let mut ids = split.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        let _ = writeln!(summary, "{name}\t{}\t{}", split.len(), ids.len());
    }
    emit(&cfg.out, "data_summary.tsv", &summary)
}
