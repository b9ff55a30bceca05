//! Runs the leave-one-subject-out ablation matrix on the synthetic cohort and
//! prints the ablation table. Finished jobs under `out/matrix` are
//! reused, so an interrupted run resumes where it stopped.
//!
//! cargo run --release --example ablation_matrix -- [SEEDS] [MAX_FOLDS]

use eeg_gsl::config::ExperimentConfig;
use eeg_gsl::error::Result;
use eeg_gsl::harness::run_experiment;
use eeg_gsl::model::Ablation;
use eeg_gsl::signal::{preprocess, synth_cohort, Window};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::desk();
    cfg.harness.ablations = Ablation::ALL.to_vec();
    cfg.harness.seeds = args.next().map_or(vec![0], |s| {
        s.split(',')
            .map(|v| v.parse().expect("SEEDS are integers"))
            .collect()
    });
    cfg.harness.max_folds = args
        .next()
        .map(|f| f.parse().expect("MAX_FOLDS must be an integer"));
    cfg.harness.workers = 0;
    let mut ws: Vec<Window> = Vec::new();
    for r in synth_cohort(&cfg.data.synth, 7)? {
        ws.extend(preprocess(&r, &cfg.data.preprocess)?);
    }
    let report = run_experiment(&cfg, &ws, Some("out/matrix".as_ref()))?;
    println!("# {}", report.pooling);
    print!("{}", report.render_table());
    if report.partial {
        println!("partial: {} failed jobs", report.failures.len());
    }
    Ok(())
}
