//! File-level building blocks behind the command-line tool: each function
//! reads its inputs from disk, runs one stage, and writes its artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::encoder;
use crate::error::{Error, Result};
use crate::explain::{
    explain_windows, group_mean, write_matrix_csv, write_pgm, GroupExplanation, SampleExplanation,
    Target,
};
use crate::harness::{
    derive_seed, leakage_audit, make_folds, metrics, normalization_audit, subjects_of, AuditReport,
    BatchLog, FoldPlan, JobResult, Metrics, Prediction, Role, Split,
};
use crate::model::{pd_probability, Ablation, Model};
use crate::rng::derive_rng;
use crate::signal::{
    load_windows, synth_cohort, write_dataset, write_window_dir, Label, Manifest, SynthConfig,
    Window,
};
use crate::train::{self, write_epoch_log, Checkpoint, SeenWindows, SupervisedTrainer};

/// Writes a synthetic cohort as a raw dataset and returns the manifest path.
pub fn synth_to_dir(cfg: &SynthConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    write_dataset(out, &synth_cohort(cfg, seed)?)
}

/// Preprocesses the recordings of `data` into a window directory and
/// returns the window count.
pub fn preprocess_dir(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<usize> {
    let windows = load_windows(data, &cfg.data.preprocess)?;
    if windows.is_empty() {
        return Err(Error::invalid(
            "preprocess",
            format!("{} yields no windows", data.display()),
        ));
    }
    write_window_dir(out, &windows)?;
    Ok(windows.len())
}

/// Channel names from a raw manifest in `data`, or `Ch0..` when absent.
pub fn channel_names(data: &Path, channels: usize) -> Vec<String> {
    let names = std::fs::read_to_string(data.join("manifest.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
        .and_then(|m| m.subjects.first().map(|s| s.channel_names.clone()));
    match names {
        Some(n) if n.len() == channels => n,
        _ => (0..channels).map(|c| format!("Ch{c}")).collect(),
    }
}

/// Contrastive pretraining on every window except those of `exclude`. The
/// finished checkpoint is written to `out/pretrain.ckpt` with its epoch log.
pub fn pretrain_to_dir(
    cfg: &ExperimentConfig,
    windows: &[Window],
    exclude: &[String],
    seed: u64,
    out: &Path,
) -> Result<Checkpoint> {
    let pool: Vec<&Window> = windows
        .iter()
        .filter(|w| !exclude.contains(&w.subject_id))
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid(
            "pretrain",
            "no windows left after exclusions",
        ));
    }
    let init = encoder::init_params(&cfg.encoder, &mut derive_rng(seed, &["init", "pretrain"]))?;
    let p = train::Pretrainer {
        encoder: &cfg.encoder,
        cfg: &cfg.train.pretrain,
        policy: &cfg.augment,
        seed: derive_seed(seed, &["pretrain"]),
        windows: &pool,
    };
    let mut st = p.init_state(init)?;
    p.run_until(&mut st, cfg.train.pretrain.epochs)?;
    let ck = Checkpoint::from_pretrain(&st, &cfg.encoder, &cfg.train.pretrain, p.seed);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    ck.save(&out.join("pretrain.ckpt"))?;
    write_epoch_log(&out.join("pretrain_log.csv"), &st.history)?;
    Ok(ck)
}

/// What a supervised checkpoint written by [`train_to_dir`] records about its run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEcho {
    pub ablation: Ablation,
    pub fold: usize,
    pub plan: FoldPlan,
}

/// Trains `ablation` on fold `fold` of the seed's LOSO plan. CL ablations
/// need a pretrained `encoder` checkpoint. Writes `out/model.ckpt`,
/// `out/train_log.csv` and `out/plan.json`.
pub fn train_to_dir(
    cfg: &ExperimentConfig,
    windows: &[Window],
    ablation: Ablation,
    fold: usize,
    seed: u64,
    encoder_ckpt: Option<&Path>,
    out: &Path,
) -> Result<Checkpoint> {
    let plans = make_folds(&subjects_of(windows)?, seed)?;
    let plan = plans
        .get(fold)
        .cloned()
        .ok_or_else(|| Error::Fold(format!("fold {fold} out of range ({} folds)", plans.len())))?;
    let split = Split::Subject(plan.clone());
    let name = split.name();
    let mut model = Model::new(cfg.model(ablation), &mut derive_rng(seed, &["init", &name]))?;
    match (ablation.needs_pretraining(), encoder_ckpt) {
        (true, None) => {
            return Err(Error::Config(format!(
                "{ablation} needs --encoder with a pretrained checkpoint"
            )))
        }
        (true, Some(path)) => {
            let (enc_cfg, params) = train::load_encoder(path)?;
            if enc_cfg != cfg.encoder {
                return Err(Error::Config(
                    "pretrained encoder settings differ from the config".into(),
                ));
            }
            model.params.load_prefix(&params, encoder::PREFIX)?;
        }
        (false, Some(_)) => {
            log::warn!("{ablation} trains from scratch; ignoring the encoder checkpoint")
        }
        (false, None) => {}
    }
    let train_w = split.select(windows, Role::Train);
    let val_w = split.select(windows, Role::Val);
    let job_seed = derive_seed(seed, &["supervised", ablation.name(), &name]);
    let t = SupervisedTrainer::new(&model, &cfg.train.supervised, job_seed, &train_w, &val_w)?;
    let mut st = t.init_state(model);
    t.run_until(&mut st, cfg.train.supervised.epochs)?;
    let mut ck = Checkpoint::from_supervised(&st, &cfg.train.supervised, job_seed);
    ck.meta.echo = serde_json::to_value(TrainEcho {
        ablation,
        fold,
        plan: plan.clone(),
    })?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    ck.save(&out.join("model.ckpt"))?;
    write_epoch_log(&out.join("train_log.csv"), &st.history)?;
    std::fs::write(out.join("plan.json"), serde_json::to_vec_pretty(&plan)?)
        .map_err(|e| Error::io(out, e))?;
    Ok(ck)
}

/// Windows a checkpoint should be scored on: the test subject of its fold
/// when the checkpoint records one and `all` is unset, otherwise everything.
pub fn scoring_windows<'a>(ck: &Checkpoint, windows: &'a [Window], all: bool) -> Vec<&'a Window> {
    let echo: Option<TrainEcho> = serde_json::from_value(ck.meta.echo.clone()).ok();
    match echo {
        Some(e) if !all => windows
            .iter()
            .filter(|w| w.subject_id == e.plan.test_subject)
            .collect(),
        _ => windows.iter().collect(),
    }
}

/// Window-level predictions of `model`.
pub fn predict(model: &Model, windows: &[&Window]) -> Result<Vec<Prediction>> {
    let (_, _, logits) = train::evaluate(model, windows, None)?;
    Ok(windows
        .iter()
        .zip(pd_probability(&logits))
        .map(|(w, p)| Prediction {
            subject_id: w.subject_id.clone(),
            window_index: w.window_index,
            score: p as f64,
            predicted: if p > 0.5 { Label::Pd } else { Label::Hc },
            truth: w.label,
        })
        .collect())
}

/// Scores windows and writes `out/metrics.json` and `out/predictions.csv`.
pub fn evaluate_to_dir(model: &Model, windows: &[&Window], out: &Path) -> Result<Metrics> {
    let preds = predict(model, windows)?;
    let m = metrics(&preds)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("metrics.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
    let path = out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["subject", "window", "truth", "predicted", "pd_score"])?;
    for p in &preds {
        w.write_record([
            p.subject_id.clone(),
            p.window_index.to_string(),
            p.truth.to_string(),
            p.predicted.to_string(),
            p.score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(m)
}

/// Explains every window against its predicted class, then writes
/// per-sample matrices under `out/samples/` and the group mean of each
/// requested class as `group_<hc|pd>.csv` and `.pgm`.
pub fn explain_to_dir(
    model: &Model,
    windows: &[&Window],
    groups: &[Label],
    channel_names: &[String],
    out: &Path,
) -> Result<(Vec<SampleExplanation>, Vec<GroupExplanation>)> {
    let samples = explain_windows(model, windows, Target::Predicted)?;
    let dir = out.join("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for s in &samples {
        let stem = format!("{}_{:04}", s.subject_id, s.window_index);
        write_matrix_csv(
            &dir.join(format!("{stem}.csv")),
            &s.explanation.adjacency,
            channel_names,
        )?;
    }
    let mut means = Vec::new();
    for &g in groups {
        let tag = g.to_string().to_lowercase();
        match group_mean(&samples, g) {
            Ok(m) => {
                write_matrix_csv(
                    &out.join(format!("group_{tag}.csv")),
                    &m.adjacency,
                    channel_names,
                )?;
                write_pgm(&out.join(format!("group_{tag}.pgm")), &m.adjacency, 16)?;
                means.push(m);
            }
            Err(e) => log::warn!("no {g} group mean: {e}"),
        }
    }
    Ok((samples, means))
}

/// Normalization and fold-plan checks for every seed, plus the batch logs of
/// any finished jobs under `run`.
pub fn audit_data(
    cfg: &ExperimentConfig,
    windows: &[Window],
    run: Option<&Path>,
) -> Result<AuditReport> {
    let mut report = if cfg.data.preprocess.standardize {
        normalization_audit(windows)
    } else {
        AuditReport::default()
    };
    for &seed in &cfg.harness.seeds {
        for split in crate::harness::splits_for(&cfg.harness, windows, seed)? {
            report.merge(leakage_audit(&split, &[]));
        }
    }
    if let Some(run) = run {
        for job in load_jobs(run)? {
            let Some(split) = crate::harness::splits_for(&cfg.harness, windows, job.key.seed)?
                .into_iter()
                .find(|s| s.name() == job.key.split)
            else {
                return Err(Error::Fold(format!(
                    "job split {} is not in the plan",
                    job.key.split
                )));
            };
            let train: SeenWindows = job.seen_train.iter().cloned().collect();
            let pre: SeenWindows = job.seen_pretrain.iter().cloned().collect();
            report.merge(leakage_audit(
                &split,
                &[
                    BatchLog {
                        phase: "train",
                        seen: &train,
                    },
                    BatchLog {
                        phase: "pretrain",
                        seen: &pre,
                    },
                ],
            ));
        }
    }
    Ok(report)
}

/// Every job artifact under `run/jobs`, in path order.
pub fn load_jobs(run: &Path) -> Result<Vec<JobResult>> {
    let mut paths = Vec::new();
    collect_json(&run.join("jobs"), &mut paths)?;
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

fn collect_json(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_json(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    Ok(())
}
