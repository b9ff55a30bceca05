//! Cross-validated experiments over the ablation matrix, with per-job
//! artifacts, leakage auditing and ablation tables.

pub mod audit;
pub mod folds;
pub mod metrics;
pub mod report;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use audit::{leakage_audit, normalization_audit, AuditReport, BatchLog, Violation};
pub use folds::{make_folds, subjects_of, FoldPlan, Role};
pub use metrics::{auc, metrics, Metrics, Prediction};
pub use report::{AggregateRow, ExperimentReport, GroupRow, JobFailure, JobSummary, SeedRow, Stat};

use crate::config::ExperimentConfig;
use crate::encoder;
use crate::error::{Error, Result};
use crate::explain::{explain_windows, Target};
use crate::model::{Ablation, Model};
use crate::rng::{derive_rng, fingerprint};
use crate::signal::{Label, Window};
use crate::train::{
    self, Checkpoint, CheckpointKind, EpochLog, PretrainState, Pretrainer, SeenWindows,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Leave one subject out.
    #[default]
    Subject,
    /// Windows pooled and split regardless of subject. Leaks by construction.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub ablations: Vec<Ablation>,
    pub seeds: Vec<u64>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub split: SplitMode,
    /// Run only the first `n` folds of each seed.
    pub max_folds: Option<usize>,
    /// Group explanations for configurations with learned graphs.
    pub explain: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            ablations: Ablation::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            workers: 1,
            split: SplitMode::Subject,
            max_folds: None,
            explain: true,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ablations.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(
                "harness: need at least one ablation and one seed".into(),
            ));
        }
        let distinct: BTreeSet<_> = self.ablations.iter().collect();
        if distinct.len() != self.ablations.len() {
            return Err(Error::Config("harness: ablations listed twice".into()));
        }
        let seeds: BTreeSet<_> = self.seeds.iter().collect();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("harness: seeds listed twice".into()));
        }
        if self.max_folds == Some(0) {
            return Err(Error::Config("harness: max_folds must be positive".into()));
        }
        Ok(())
    }
}

/// Window-level fold for [`SplitMode::Sample`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSplit {
    pub fold: usize,
    pub test: SeenWindows,
    pub val: SeenWindows,
}

/// `k` folds over shuffled windows; fold `f` validates on fold `f + 1`.
pub fn sample_folds(windows: &[Window], k: usize, seed: u64) -> Result<Vec<SampleSplit>> {
    if k < 3 || windows.len() < k {
        return Err(Error::Fold(format!(
            "cannot make {k} sample-wise folds from {} windows",
            windows.len()
        )));
    }
    let mut ids: Vec<(String, usize)> = windows
        .iter()
        .map(|w| (w.subject_id.clone(), w.window_index))
        .collect();
    ids.shuffle(&mut derive_rng(seed, &["sample-folds"]));
    let chunks: Vec<SeenWindows> = (0..k)
        .map(|f| ids.iter().skip(f).step_by(k).cloned().collect())
        .collect();
    Ok((0..k)
        .map(|f| SampleSplit {
            fold: f,
            test: chunks[f].clone(),
            val: chunks[(f + 1) % k].clone(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Split {
    Subject(FoldPlan),
    Sample(SampleSplit),
}

impl Split {
    pub fn role(&self, w: &Window) -> Option<Role> {
        match self {
            Split::Subject(p) => p.role(&w.subject_id),
            Split::Sample(s) => {
                let key = (w.subject_id.clone(), w.window_index);
                Some(if s.test.contains(&key) {
                    Role::Test
                } else if s.val.contains(&key) {
                    Role::Val
                } else {
                    Role::Train
                })
            }
        }
    }

    pub fn select<'a>(&self, windows: &'a [Window], role: Role) -> Vec<&'a Window> {
        windows
            .iter()
            .filter(|w| self.role(w) == Some(role))
            .collect()
    }

    /// Test subject, or `sample<k>`.
    pub fn name(&self) -> String {
        match self {
            Split::Subject(p) => p.test_subject.clone(),
            Split::Sample(s) => format!("sample{}", s.fold),
        }
    }
}

/// All splits of one seed.
pub fn splits_for(cfg: &HarnessConfig, windows: &[Window], seed: u64) -> Result<Vec<Split>> {
    let subjects = subjects_of(windows)?;
    let mut splits: Vec<Split> = match cfg.split {
        SplitMode::Subject => make_folds(&subjects, seed)?
            .into_iter()
            .map(Split::Subject)
            .collect(),
        SplitMode::Sample => sample_folds(windows, subjects.len(), seed)?
            .into_iter()
            .map(Split::Sample)
            .collect(),
    };
    if let Some(n) = cfg.max_folds {
        splits.truncate(n);
    }
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobKey {
    pub ablation: Ablation,
    pub seed: u64,
    pub fold: usize,
    pub split: String,
}

/// Sum of correctly classified explanations of one class within a job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSum {
    pub group: Label,
    pub n: usize,
    pub sum: Vec<f64>,
}

/// Everything a finished `(ablation, seed, fold)` job leaves behind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub key: JobKey,
    pub fingerprint: String,
    pub predictions: Vec<Prediction>,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub pretrain_history: Vec<EpochLog>,
    pub seen_train: Vec<(String, usize)>,
    pub seen_pretrain: Vec<(String, usize)>,
    pub audit: AuditReport,
    pub groups: Vec<GroupSum>,
}

/// Hash of everything that determines a job's outcome apart from its key.
pub fn run_fingerprint(cfg: &ExperimentConfig, windows: &[Window]) -> String {
    let mut bytes = serde_json::to_vec(&(
        &cfg.data.preprocess,
        &cfg.augment,
        &cfg.encoder,
        &cfg.gsl,
        &cfg.train,
        cfg.harness.split,
        cfg.harness.explain,
    ))
    .expect("config serializes");
    for w in windows {
        bytes.extend_from_slice(w.subject_id.as_bytes());
        bytes.extend_from_slice(&(w.window_index as u64).to_le_bytes());
        bytes.push(w.label.index() as u8);
        for v in w.samples.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    format!("{:016x}", fingerprint(&bytes))
}

/// Output layout of an experiment directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn job(&self, key: &JobKey) -> PathBuf {
        self.root
            .join("jobs")
            .join(key.ablation.name())
            .join(format!("seed{}", key.seed))
            .join(format!("fold{:02}_{}.json", key.fold, key.split))
    }

    pub fn pretrain(&self, seed: u64, fold: usize, split: &str) -> PathBuf {
        self.root
            .join("pretrain")
            .join(format!("seed{seed}"))
            .join(format!("fold{fold:02}_{split}.ckpt"))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Pretrained encoder of one `(seed, fold)`, shared by the CL ablations.
struct Pretrained {
    encoder: crate::params::ParamStore,
    history: Vec<EpochLog>,
    seen: SeenWindows,
}

fn pretrain_fold(
    cfg: &ExperimentConfig,
    windows: &[Window],
    split: &Split,
    seed: u64,
    fold: usize,
    fp: &str,
    dir: Option<&RunDir>,
) -> Result<Pretrained> {
    let train = split.select(windows, Role::Train);
    let init = encoder::init_params(
        &cfg.encoder,
        &mut derive_rng(seed, &["init", &split.name()]),
    )?;
    let job_seed = derive_seed(seed, &["pretrain", &split.name()]);
    let p = Pretrainer {
        encoder: &cfg.encoder,
        cfg: &cfg.train.pretrain,
        policy: &cfg.augment,
        seed: job_seed,
        windows: &train,
    };
    let path = dir.map(|d| d.pretrain(seed, fold, &split.name()));
    let mut st: PretrainState = match path.as_deref().filter(|p| p.exists()).map(Checkpoint::load) {
        Some(Ok(ck))
            if ck.meta.kind == CheckpointKind::Pretrain
                && ck.meta.echo == serde_json::json!(fp) =>
        {
            log::info!(
                "resuming pretraining seed {seed} fold {fold} at epoch {}",
                ck.meta.epoch
            );
            ck.into_pretrain_state()?
        }
        _ => p.init_state(init)?,
    };
    while st.next_epoch < cfg.train.pretrain.epochs {
        p.run_epoch(&mut st)?;
        if let Some(path) = &path {
            let every = 10;
            if st.next_epoch % every == 0 || st.next_epoch == cfg.train.pretrain.epochs {
                let mut ck =
                    Checkpoint::from_pretrain(&st, &cfg.encoder, &cfg.train.pretrain, job_seed);
                ck.meta.echo = serde_json::json!(fp);
                if let Some(d) = path.parent() {
                    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                ck.save(path)?;
            }
        }
    }
    Ok(Pretrained {
        encoder: st.params.subset(encoder::PREFIX),
        history: st.history,
        seen: st.seen,
    })
}

/// A `u64` seed drawn from a derived stream.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    use rand::Rng;
    derive_rng(seed, parts).random()
}

fn run_job(
    cfg: &ExperimentConfig,
    windows: &[Window],
    split: &Split,
    key: &JobKey,
    pretrained: Option<&Pretrained>,
    fp: &str,
) -> Result<JobResult> {
    let train_w = split.select(windows, Role::Train);
    let val_w = split.select(windows, Role::Val);
    let test_w = split.select(windows, Role::Test);
    if test_w.is_empty() {
        return Err(Error::Fold(format!(
            "split {} has no test windows",
            key.split
        )));
    }
    let mut model = Model::new(
        cfg.model(key.ablation),
        &mut derive_rng(key.seed, &["init", &key.split]),
    )?;
    if key.ablation.needs_pretraining() {
        let p =
            pretrained.ok_or_else(|| Error::invalid("run_job", "pretrained encoder missing"))?;
        model.params.load_prefix(&p.encoder, encoder::PREFIX)?;
    }
    let job_seed = derive_seed(key.seed, &["supervised", key.ablation.name(), &key.split]);
    let out = train::train_supervised(model, &train_w, &val_w, &cfg.train.supervised, job_seed)?;
    let predictions = crate::workflow::predict(&out.model, &test_w)?;

    let mut groups = Vec::new();
    if cfg.harness.explain && key.ablation.learns_graph() {
        let samples = explain_windows(&out.model, &test_w, Target::Predicted)?;
        for group in [Label::Hc, Label::Pd] {
            let members: Vec<_> = samples
                .iter()
                .filter(|s| s.true_label == group && s.correct())
                .collect();
            let c = test_w[0].n_channels();
            let mut sum = vec![0.0f64; c * c];
            for m in &members {
                for (a, &v) in sum.iter_mut().zip(m.explanation.adjacency.data()) {
                    *a += v as f64;
                }
            }
            groups.push(GroupSum {
                group,
                n: members.len(),
                sum,
            });
        }
    }

    let empty = SeenWindows::new();
    let pre_seen = pretrained
        .filter(|_| key.ablation.needs_pretraining())
        .map_or(&empty, |p| &p.seen);
    let audit = leakage_audit(
        split,
        &[
            BatchLog {
                phase: "train",
                seen: &out.seen,
            },
            BatchLog {
                phase: "pretrain",
                seen: pre_seen,
            },
        ],
    );
    Ok(JobResult {
        key: key.clone(),
        fingerprint: fp.to_string(),
        predictions,
        best_epoch: out.best_epoch,
        history: out.history,
        pretrain_history: pretrained
            .filter(|_| key.ablation.needs_pretraining())
            .map(|p| p.history.clone())
            .unwrap_or_default(),
        seen_train: out.seen.into_iter().collect(),
        seen_pretrain: pre_seen.iter().cloned().collect(),
        audit,
        groups,
    })
}

fn load_job(path: &Path, fp: &str) -> Option<JobResult> {
    let text = std::fs::read_to_string(path).ok()?;
    let job: JobResult = serde_json::from_str(&text).ok()?;
    (job.fingerprint == fp).then_some(job)
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("harness: worker pool: {e}")))
}

/// Runs every `(ablation, seed, fold)` job and assembles the report. With
/// `out`, finished jobs are persisted and reused on the next call.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    windows: &[Window],
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let hc = &cfg.harness;
    let fp = run_fingerprint(cfg, windows);
    let dir = out.map(|p| RunDir {
        root: p.to_path_buf(),
    });

    let mut audit = if cfg.data.preprocess.standardize {
        normalization_audit(windows)
    } else {
        AuditReport {
            violations: vec![],
            warnings: vec![
                "windows are not standardized; per-window normalization not audited".into(),
            ],
        }
    };

    let mut plans: Vec<(u64, usize, Split)> = Vec::new();
    for &seed in &hc.seeds {
        for (f, s) in splits_for(hc, windows, seed)?.into_iter().enumerate() {
            plans.push((seed, f, s));
        }
    }

    let workers = pool(hc.workers)?;
    let needs_pretrain = hc.ablations.iter().any(|a| a.needs_pretraining());
    let pretrained: Vec<Option<Result<Pretrained>>> = workers.install(|| {
        plans
            .par_iter()
            .map(|(seed, f, split)| {
                needs_pretrain.then(|| {
                    log::info!("pretraining seed {seed} fold {f} ({})", split.name());
                    pretrain_fold(cfg, windows, split, *seed, *f, &fp, dir.as_ref())
                })
            })
            .collect()
    });

    let mut jobs: Vec<(usize, JobKey)> = Vec::new();
    for &ablation in &hc.ablations {
        for (pi, (seed, f, split)) in plans.iter().enumerate() {
            jobs.push((
                pi,
                JobKey {
                    ablation,
                    seed: *seed,
                    fold: *f,
                    split: split.name(),
                },
            ));
        }
    }
    let results: Vec<Result<JobResult>> = workers.install(|| {
        jobs.par_iter()
            .map(|(pi, key)| {
                let path = dir.as_ref().map(|d| d.job(key));
                if let Some(done) = path.as_deref().and_then(|p| load_job(p, &fp)) {
                    log::info!("reusing {}", path.as_deref().unwrap().display());
                    return Ok(done);
                }
                let pre = match &pretrained[*pi] {
                    Some(Ok(p)) => Some(p),
                    Some(Err(e)) if key.ablation.needs_pretraining() => {
                        return Err(Error::invalid("pretrain", e.to_string()));
                    }
                    _ => None,
                };
                log::info!(
                    "job {} seed {} fold {} ({})",
                    key.ablation,
                    key.seed,
                    key.fold,
                    key.split
                );
                let job = run_job(cfg, windows, &plans[*pi].2, key, pre, &fp)?;
                if let Some(p) = &path {
                    write_atomic(p, &serde_json::to_vec(&job)?)?;
                }
                Ok(job)
            })
            .collect()
    });

    let mut done = Vec::new();
    let mut failures = Vec::new();
    for ((_, key), r) in jobs.iter().zip(results) {
        match r {
            Ok(j) => {
                audit.merge(j.audit.clone());
                done.push(j);
            }
            Err(e) => {
                log::error!(
                    "job {} seed {} fold {} failed: {e}",
                    key.ablation,
                    key.seed,
                    key.fold
                );
                failures.push(JobFailure {
                    key: key.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let report = ExperimentReport::assemble(cfg, &done, failures, audit)?;
    if let Some(d) = &dir {
        report.write(&d.root, &done)?;
    }
    Ok(report)
}
