use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use eeg_gsl::config::ExperimentConfig;
use eeg_gsl::harness::{run_experiment, ExperimentReport};
use eeg_gsl::model::Ablation;
use eeg_gsl::signal::{load_windows, Label, SynthConfig};
use eeg_gsl::train::Checkpoint;
use eeg_gsl::workflow;

#[derive(Parser)]
#[command(
    name = "eeg-gsl",
    version,
    about = "Graph-structure-learning EEG classifier experiments"
)]
struct Cli {
    /// Experiment config (JSON); `synth` also accepts a bare synth block.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for the experiment matrix; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic cohort (manifest + raw tensors) and a matching experiment config.
    Synth,
    /// Turn raw recordings into a window directory.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
    },
    /// Contrastive encoder pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Subjects kept out of pretraining.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
    },
    /// Train one configuration on one LOSO fold.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "mhgsl_scratch")]
        ablation: Ablation,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Pretrained encoder for the CL configurations.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Score a trained checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score every window instead of the checkpoint's test subject.
        #[arg(long)]
        all: bool,
    },
    /// Gradient-weighted graph explanations of a trained checkpoint.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        group: Group,
        #[arg(long)]
        all: bool,
    },
    /// Normalization and leakage checks over fold plans and finished jobs.
    Audit {
        #[arg(long)]
        data: PathBuf,
        /// Experiment directory whose job logs are checked too.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Run (or resume) the ablation matrix into --out; without --data, re-render --out/report.json.
    Report {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    Pd,
    Hc,
    Both,
}

impl Group {
    fn labels(self) -> Vec<Label> {
        match self {
            Group::Pd => vec![Label::Pd],
            Group::Hc => vec![Label::Hc],
            Group::Both => vec![Label::Hc, Label::Pd],
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.harness.workers = w;
    }
    Ok(cfg)
}

fn synth_config(path: &Path) -> Result<ExperimentConfig> {
    if let Ok(cfg) = ExperimentConfig::load(path) {
        return Ok(cfg);
    }
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let synth: SynthConfig =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut cfg = ExperimentConfig::synthetic();
    cfg.data.synth = synth;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_path();
    match &cli.cmd {
        Cmd::Synth => {
            let cfg = match &cli.config {
                Some(p) => synth_config(p)?,
                None => ExperimentConfig::synthetic(),
            };
            let manifest = workflow::synth_to_dir(&cfg.data.synth, seed, out)?;
            cfg.save(&out.join("experiment.json"))?;
            println!(
                "wrote {} and {}",
                manifest.display(),
                out.join("experiment.json").display()
            );
        }
        Cmd::Preprocess { data } => {
            let n = workflow::preprocess_dir(&load_config(&cli)?, data, out)?;
            println!("wrote {n} windows to {}", out.display());
        }
        Cmd::Pretrain { data, exclude } => {
            let cfg = load_config(&cli)?;
            let windows = load_windows(data, &cfg.data.preprocess)?;
            let ck = workflow::pretrain_to_dir(&cfg, &windows, exclude, seed, out)?;
            if let Some(last) = ck.meta.history.last() {
                println!(
                    "pretrained {} epochs, final loss {:.5}",
                    ck.meta.epoch, last.train_loss
                );
            }
        }
        Cmd::Train {
            data,
            ablation,
            fold,
            encoder,
        } => {
            let cfg = load_config(&cli)?;
            let windows = load_windows(data, &cfg.data.preprocess)?;
            let ck = workflow::train_to_dir(
                &cfg,
                &windows,
                *ablation,
                *fold,
                seed,
                encoder.as_deref(),
                out,
            )?;
            println!(
                "trained {ablation} fold {fold}; best epoch {:?}, wrote {}",
                ck.meta.best_epoch,
                out.join("model.ckpt").display()
            );
        }
        Cmd::Evaluate {
            checkpoint,
            data,
            all,
        } => {
            let cfg = load_config(&cli)?;
            let ck = Checkpoint::load(checkpoint)?;
            let windows = load_windows(data, &cfg.data.preprocess)?;
            let scored = workflow::scoring_windows(&ck, &windows, *all);
            let m = workflow::evaluate_to_dir(&ck.best_model()?, &scored, out)?;
            println!(
                "n {} accuracy {:.4} f1 {:.4} auc {}",
                m.n,
                m.accuracy,
                m.f1,
                m.auc.map_or("n/a".into(), |a| format!("{a:.4}"))
            );
        }
        Cmd::Explain {
            checkpoint,
            data,
            group,
            all,
        } => {
            let cfg = load_config(&cli)?;
            let ck = Checkpoint::load(checkpoint)?;
            let windows = load_windows(data, &cfg.data.preprocess)?;
            let scored = workflow::scoring_windows(&ck, &windows, *all);
            let Some(first) = scored.first() else {
                bail!("no windows to explain");
            };
            let names = workflow::channel_names(data, first.n_channels());
            let (samples, groups) =
                workflow::explain_to_dir(&ck.best_model()?, &scored, &group.labels(), &names, out)?;
            println!("explained {} windows", samples.len());
            for g in groups {
                println!(
                    "{} group mean over {} correctly classified windows",
                    g.group, g.n_samples
                );
            }
        }
        Cmd::Audit { data, run } => {
            let cfg = load_config(&cli)?;
            let windows = load_windows(data, &cfg.data.preprocess)?;
            let report = workflow::audit_data(&cfg, &windows, run.as_deref())?;
            for w in &report.warnings {
                println!("warning: {w}");
            }
            for v in &report.violations {
                println!(
                    "violation: {} {:?} [{}] {}",
                    v.subject, v.window_index, v.source, v.detail
                );
            }
            println!("{} violation(s)", report.violations.len());
            return Ok(report.is_clean());
        }
        Cmd::Report { data } => {
            let report = match data {
                Some(data) => {
                    let mut cfg = load_config(&cli)?;
                    if let Some(s) = cli.seed {
                        cfg.harness.seeds = vec![s];
                    }
                    let windows = load_windows(data, &cfg.data.preprocess)?;
                    run_experiment(&cfg, &windows, Some(out))?
                }
                None => ExperimentReport::load(&out.join("report.json"))?,
            };
            println!("# {}", report.pooling);
            print!("{}", report.render_table());
            for f in &report.failures {
                println!(
                    "failed: {} seed {} fold {}: {}",
                    f.key.ablation, f.key.seed, f.key.fold, f.error
                );
            }
            return Ok(!report.partial && report.audit.is_clean());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
