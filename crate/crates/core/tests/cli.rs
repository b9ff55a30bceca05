mod common;

use std::path::Path;
use std::process::{Command, Output};

use eeg_gsl::harness::{ExperimentReport, Metrics};

fn eeg_gsl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eeg-gsl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = eeg_gsl(args, cwd);
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "eeg-gsl {args:?} failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

#[test]
fn every_subcommand_runs_on_a_tiny_cohort() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    common::tiny_config().save(&d.join("cfg.json")).unwrap();
    let cfg = ["--config", "cfg.json"];
    let with = |extra: &[&'static str]| -> Vec<&'static str> {
        cfg.iter().copied().chain(extra.iter().copied()).collect()
    };

    ok(&with(&["--seed", "3", "--out", "raw", "synth"]), d);
    assert!(d.join("raw/manifest.json").exists());
    assert_eq!(
        eeg_gsl::config::ExperimentConfig::load(&d.join("raw/experiment.json")).unwrap(),
        common::tiny_config()
    );

    let s = ok(&with(&["--out", "win", "preprocess", "--data", "raw"]), d);
    assert!(s.contains("wrote 24 windows"), "{s}");

    ok(
        &with(&[
            "--out",
            "pre",
            "pretrain",
            "--data",
            "win",
            "--exclude",
            "HC00",
        ]),
        d,
    );
    assert!(d.join("pre/pretrain.ckpt").exists() && d.join("pre/pretrain_log.csv").exists());

    let bad = eeg_gsl(
        &with(&[
            "--out",
            "nope",
            "train",
            "--data",
            "win",
            "--ablation",
            "cl_finetune",
        ]),
        d,
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--encoder"));

    ok(
        &with(&[
            "--out",
            "fit",
            "train",
            "--data",
            "win",
            "--ablation",
            "cl_finetune",
            "--fold",
            "1",
            "--encoder",
            "pre/pretrain.ckpt",
        ]),
        d,
    );
    for f in ["model.ckpt", "train_log.csv", "plan.json"] {
        assert!(d.join("fit").join(f).exists(), "{f}");
    }

    ok(
        &with(&[
            "--out",
            "eval",
            "evaluate",
            "--checkpoint",
            "fit/model.ckpt",
            "--data",
            "win",
        ]),
        d,
    );
    let m: Metrics =
        serde_json::from_slice(&std::fs::read(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(m.n, 6);
    let preds = std::fs::read_to_string(d.join("eval/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 7);

    let s = ok(
        &with(&[
            "--out",
            "exp",
            "explain",
            "--checkpoint",
            "fit/model.ckpt",
            "--data",
            "raw",
            "--group",
            "both",
            "--all",
        ]),
        d,
    );
    assert!(s.contains("explained 24 windows"), "{s}");
    let samples = std::fs::read_dir(d.join("exp/samples")).unwrap().count();
    assert_eq!(samples, 24);
    let header = std::fs::read_to_string(
        std::fs::read_dir(d.join("exp/samples"))
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .path(),
    )
    .unwrap();
    assert_eq!(
        header.lines().next().unwrap(),
        common::tiny_config().data.synth.channel_names().join(",")
    );
    assert_eq!(header.lines().count(), 9);

    ok(&with(&["--out", "run", "report", "--data", "win"]), d);
    let report = ExperimentReport::load(&d.join("run/report.json")).unwrap();
    assert!(!report.partial);
    let rendered = ok(&["--out", "run", "report"], d);
    assert!(rendered.contains(&report.render_table()));

    let s = ok(
        &with(&["--out", "x", "audit", "--data", "win", "--run", "run"]),
        d,
    );
    assert!(s.contains("0 violation(s)"), "{s}");
}
