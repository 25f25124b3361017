use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hsgnet_cli::RunConfig;
use hsgnet_core::io::{write_features, write_labels};
use hsgnet_core::Tensor;

const TINY: &[&str] = &[
    "data.train_identities=4",
    "data.test_identities=2",
    "data.images_per_identity=4",
    "data.height=32",
    "data.width=8",
    "backbone.stage_channels=2,2,4,4",
    "backbone.feature_dim=4",
    "train.epochs=3",
    "train.p=2",
    "train.k=2",
    "train.eval_every=0",
];

fn hsgnet(out: &Path, args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hsgnet"));
    cmd.args(args).arg("--out").arg(out);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_passes_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsgnet(dir.path(), &["gradcheck"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for group in ["graph_primitives/", "hsgm/", "losses/", "network/micro"] {
        assert!(text.contains(group), "missing {group}");
    }
    assert!(!text.contains("FAIL"));
    assert!(dir.path().join("gradcheck_report.tsv").exists());
}

#[test]
fn gradcheck_sabotage_names_the_operation() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsgnet(dir.path(), &["gradcheck"], &["gradcheck.sabotage=true"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let failed: Vec<&str> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failed.len(), 1, "{failed:?}");
    assert!(failed[0].contains("fixture/sabotaged_exp") && failed[0].contains("max_error="));
}

#[test]
fn gradcheck_tiny_tolerance_reports_noise() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsgnet(dir.path(), &["gradcheck"], &["gradcheck.tol=1e-12"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().filter(|l| l.starts_with("FAIL")).count() > 0);
}

#[test]
fn params_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let sets = ["hsgm.splits=1", "hsgm.scales=1", "params.channels=4", "params.height=2", "params.width=2"];
    let o = hsgnet(dir.path(), &["params"], &sets);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("closed_form\t16\n") && text.contains("enumerated\t16\n"), "{text}");
}

#[test]
fn unknown_key_is_a_config_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nseed = 3\nnot.a.key = 1\n").unwrap();
    let o = hsgnet(dir.path(), &["params", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("not.a.key"), "{err}");

    let o = hsgnet(dir.path(), &["params"], &["train.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = hsgnet(dir.path(), &["params"], &["hsgm.splits=2,1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn echoed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let sets = ["hsgm.scales=2,3", "train.decay=ten_percent", "loss.gamma=0.15", "backbone.hsgm_stage=S2", "gradcheck.tol=3e-7"];
    let o = hsgnet(dir.path(), &["params", "--seed", "11"], &sets);
    assert_eq!(o.status.code(), Some(0));
    let echoed = fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    let parsed = RunConfig::parse(&echoed).unwrap();
    assert_eq!(parsed.experiment.seed, 11);
    assert_eq!(parsed.experiment.hsgm.scales, vec![2, 3]);
    assert_eq!(parsed.gradcheck_tol, Some(3e-7));
    assert_eq!(parsed.to_text(), echoed);

    // feeding the echo back in reproduces it exactly
    let again = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.resolved");
    let o = hsgnet(again.path(), &["params", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(0));
    let second = RunConfig::parse(&fs::read_to_string(again.path().join("config.resolved")).unwrap()).unwrap();
    assert_eq!(second, RunConfig { out: again.path().to_path_buf(), ..parsed });
}

#[test]
fn train_is_reproducible_and_eval_reads_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = hsgnet(dir.path(), &["train", "--seed", "4"], TINY);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let log = |d: &Path| fs::read_to_string(d.join("train_log.tsv")).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
    assert_eq!(log(a.path()).lines().count(), 4);
    assert_eq!(fs::read(a.path().join("checkpoint.hsgc")).unwrap(), fs::read(b.path().join("checkpoint.hsgc")).unwrap());

    let o = hsgnet(a.path(), &["eval", "--seed", "4"], TINY);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics = fs::read_to_string(a.path().join("metrics.tsv")).unwrap();
    assert!(metrics.starts_with("mAP\t"));
    assert!(a.path().join("probe_features.hsgf").exists());

    // the written features score the same through the file path
    let p = |f: &str| format!("{}", a.path().join(f).display());
    let files = [
        format!("eval.probe_features={}", p("probe_features.hsgf")),
        format!("eval.probe_labels={}", p("probe_labels.txt")),
        format!("eval.gallery_features={}", p("gallery_features.hsgf")),
        format!("eval.gallery_labels={}", p("gallery_labels.txt")),
    ];
    let c = tempfile::tempdir().unwrap();
    let o = hsgnet(c.path(), &["eval"], &files.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(c.path().join("metrics.tsv")).unwrap(), metrics);

    let mut wrong: Vec<&str> = TINY.to_vec();
    wrong.push("backbone.feature_dim=6");
    let o = hsgnet(a.path(), &["eval", "--seed", "4"], &wrong);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("backbone.feature_dim"), "{}", stderr(&o));
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsgnet(dir.path(), &["eval"], TINY);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"));
    let o = hsgnet(dir.path(), &["eval"], &["eval.checkpoint=/nonexistent/model.hsgc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_gallery_equal_to_probe_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let f = Tensor::new(vec![4, 3], vec![1.0, 0.2, 0.0, -0.3, 1.0, 0.5, 0.0, -1.0, 2.0, 0.7, 0.7, -0.1]).unwrap();
    let feats = dir.path().join("f.hsgf");
    let labels = dir.path().join("l.txt");
    write_features(&feats, &f).unwrap();
    write_labels(&labels, &[0, 1, 2, 3]).unwrap();
    let sets = [
        format!("eval.probe_features={}", feats.display()),
        format!("eval.probe_labels={}", labels.display()),
        format!("eval.gallery_features={}", feats.display()),
        format!("eval.gallery_labels={}", labels.display()),
    ];
    let o = hsgnet(dir.path(), &["eval"], &sets.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    assert!(row.starts_with("1.000000\t1.000000"), "{row}");
}

#[test]
fn gen_data_writes_splits() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsgnet(dir.path(), &["gen-data"], TINY);
    assert_eq!(o.status.code(), Some(0));
    let images = hsgnet_core::io::read_features(&dir.path().join("train_images.hsgf")).unwrap();
    assert_eq!(images.shape(), &[16, 32 * 8 * 3]);
    let labels = hsgnet_core::io::read_labels(&dir.path().join("gallery_labels.txt")).unwrap();
    assert_eq!(labels.len(), 6);
    assert!(stdout(&o).contains("probe\t2\t2"));
}

#[test]
fn ablations_emit_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let o = hsgnet(dir.path(), &["ablate-stage"], TINY);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<String> = stdout(&o).lines().skip(1).filter(|l| !l.starts_with('#')).map(String::from).collect();
    let stages: Vec<&str> = rows.iter().map(|r| r.split('\t').next().unwrap()).collect();
    assert_eq!(stages, ["none", "S1", "S2", "S3", "S4"]);
    assert!(dir.path().join("S2").join("train_log.tsv").exists());

    let o = hsgnet(dir.path(), &["ablate-scales"], TINY);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("k1=1\tk2=2\tk3=3\tRank1\tmAP\n"));
    let marks: Vec<String> = text.lines().skip(1).filter(|l| !l.starts_with('#')).map(|l| l.split('\t').take(3).collect::<Vec<_>>().join("")).collect();
    assert_eq!(marks, ["x--", "-x-", "--x", "xxx"]);
}
