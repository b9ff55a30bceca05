//! Contrastive pretraining of the encoder on a synthetic cohort, holding one
//! subject out, then saving the encoder-only checkpoint.
//!
//! cargo run --release --example pretrain_encoder -- [EPOCHS]

use eeg_gsl::config::ExperimentConfig;
use eeg_gsl::error::Result;
use eeg_gsl::signal::{preprocess, synth_cohort, Window};
use eeg_gsl::workflow::pretrain_to_dir;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::desk();
    if let Some(e) = std::env::args().nth(1) {
        cfg.train.pretrain.epochs = e.parse().expect("EPOCHS must be an integer");
    }
    let mut ws: Vec<Window> = Vec::new();
    for r in synth_cohort(&cfg.data.synth, 7)? {
        ws.extend(preprocess(&r, &cfg.data.preprocess)?);
    }
    let ck = pretrain_to_dir(&cfg, &ws, &["PD00".into()], 0, "out/pretrain".as_ref())?;
    for h in &ck.meta.history {
        println!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}",
            h.epoch, h.lr, h.train_loss
        );
    }
    println!("wrote out/pretrain/pretrain.ckpt");
    Ok(())
}
