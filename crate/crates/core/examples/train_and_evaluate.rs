//! Trains the full model on one leave-one-subject-out fold and scores the
//! held-out subject.
//!
//! cargo run --release --example train_and_evaluate -- [ABLATION] [FOLD]

use eeg_gsl::config::ExperimentConfig;
use eeg_gsl::error::Result;
use eeg_gsl::model::Ablation;
use eeg_gsl::signal::{preprocess, synth_cohort, Window};
use eeg_gsl::workflow::{evaluate_to_dir, scoring_windows, train_to_dir};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let ablation: Ablation = args
        .next()
        .map_or(Ok(Ablation::MhgslScratch), |a| a.parse())?;
    let fold: usize = args
        .next()
        .map_or(0, |f| f.parse().expect("FOLD must be an integer"));
    let cfg = ExperimentConfig::desk();
    let mut ws: Vec<Window> = Vec::new();
    for r in synth_cohort(&cfg.data.synth, 7)? {
        ws.extend(preprocess(&r, &cfg.data.preprocess)?);
    }
    if ablation.needs_pretraining() {
        eprintln!("{ablation} needs a pretrained encoder; see the pretrain_encoder example");
        std::process::exit(2);
    }
    let out = std::path::Path::new("out/train");
    let ck = train_to_dir(&cfg, &ws, ablation, fold, 0, None, out)?;
    for h in &ck.meta.history {
        println!(
            "epoch {:>2}  train {:.4}  val {:.4}  val acc {:.3}",
            h.epoch,
            h.train_loss,
            h.val_loss.unwrap_or(f64::NAN),
            h.val_acc.unwrap_or(f64::NAN)
        );
    }
    let test = scoring_windows(&ck, &ws, false);
    let m = evaluate_to_dir(&ck.best_model()?, &test, out)?;
    println!(
        "{} on {} ({} windows): accuracy {:.3}, F1 {:.3}",
        ablation.label(),
        test[0].subject_id,
        m.n,
        m.accuracy,
        m.f1
    );
    Ok(())
}
