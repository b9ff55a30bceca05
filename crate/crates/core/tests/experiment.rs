mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use eeg_gsl::harness::report::read_table_csv;
use eeg_gsl::harness::{run_experiment, ExperimentReport};
use eeg_gsl::model::Ablation;
use eeg_gsl::workflow::load_jobs;

fn job_files(dir: &Path) -> BTreeMap<PathBuf, (SystemTime, Vec<u8>)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.join("jobs")];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let meta = std::fs::metadata(&p).unwrap();
                out.insert(
                    p.clone(),
                    (meta.modified().unwrap(), std::fs::read(&p).unwrap()),
                );
            }
        }
    }
    out
}

#[test]
fn single_seed_report_has_one_row_without_spread() {
    let mut cfg = common::tiny_config();
    cfg.harness.ablations = vec![Ablation::MhgslScratch];
    let ws = common::windows(&cfg, 1);
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, &ws, Some(dir.path())).unwrap();

    assert!(!report.partial);
    assert!(report.audit.is_clean(), "{:?}", report.audit.violations);
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].n_folds, 4);
    assert_eq!(report.rows[0].metrics.n, ws.len());
    assert_eq!(report.aggregates.len(), 1);
    let row = &report.aggregates[0];
    assert_eq!(row.n_seeds, 1);
    assert!(row.accuracy.std.is_none() && row.f1.std.is_none());
    assert!(row.precision.std.is_none() && row.recall.std.is_none());
    assert!(row.auc.is_none_or(|a| a.std.is_none()));
    assert_eq!(
        (row.accuracy.mean / 100.0 - report.rows[0].metrics.accuracy).abs(),
        0.0
    );

    assert_eq!(
        read_table_csv(&dir.path().join("table1.csv")).unwrap(),
        report.aggregates
    );
    assert_eq!(
        ExperimentReport::load(&dir.path().join("report.json")).unwrap(),
        report
    );
    assert_eq!(report.config, cfg);
    let lines = std::fs::read_to_string(dir.path().join("results.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    assert!(dir
        .path()
        .join("predictions/mhgsl_scratch_seed0.csv")
        .exists());
    assert!(report.render_table().contains("Full Model with MH-GSL"));
}

#[test]
fn interrupted_matrix_resumes_from_finished_jobs() {
    let mut cfg = common::tiny_config();
    cfg.harness.ablations = vec![Ablation::StaticPcc, Ablation::ClFinetune];
    let ws = common::windows(&cfg, 2);
    let dir = tempfile::tempdir().unwrap();
    let first = run_experiment(&cfg, &ws, Some(dir.path())).unwrap();
    let before = job_files(dir.path());
    assert_eq!(before.len(), 8);
    assert_eq!(load_jobs(dir.path()).unwrap().len(), 8);

    let dropped = before.keys().nth(5).unwrap().clone();
    std::fs::remove_file(&dropped).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    let second = run_experiment(&cfg, &ws, Some(dir.path())).unwrap();
    assert_eq!(second, first);
    let after = job_files(dir.path());
    for (path, (mtime, bytes)) in &before {
        let (m2, b2) = &after[path];
        assert_eq!(b2, bytes, "{}", path.display());
        if *path == dropped {
            assert_ne!(m2, mtime, "dropped job was not rerun");
        } else {
            assert_eq!(m2, mtime, "{} was recomputed", path.display());
        }
    }

    cfg.train.supervised.lr *= 0.5;
    std::thread::sleep(std::time::Duration::from_millis(20));
    run_experiment(&cfg, &ws, Some(dir.path())).unwrap();
    let changed = job_files(dir.path());
    assert!(
        changed.iter().all(|(p, (m, _))| *m != after[p].0),
        "stale jobs reused after a config change"
    );
}
