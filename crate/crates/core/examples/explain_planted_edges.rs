//! Trains the full model on one fold, explains every window against its
//! predicted class, and checks where the planted PD edges land in the PD
//! group mean. Matrices go to `out/explain` as CSV and PGM.
//!
//! cargo run --release --example explain_planted_edges

use eeg_gsl::config::ExperimentConfig;
use eeg_gsl::error::Result;
use eeg_gsl::explain::rank_edges;
use eeg_gsl::model::Ablation;
use eeg_gsl::signal::{preprocess, synth_cohort, Label, Window};
use eeg_gsl::workflow::{explain_to_dir, train_to_dir};

fn main() -> Result<()> {
    let cfg = ExperimentConfig::desk();
    let mut ws: Vec<Window> = Vec::new();
    for r in synth_cohort(&cfg.data.synth, 7)? {
        ws.extend(preprocess(&r, &cfg.data.preprocess)?);
    }
    let out = std::path::Path::new("out/explain");
    let ck = train_to_dir(&cfg, &ws, Ablation::MhgslScratch, 0, 0, None, out)?;
    let refs: Vec<&Window> = ws.iter().collect();
    let names = cfg.data.synth.channel_names();
    let (samples, groups) = explain_to_dir(
        &ck.best_model()?,
        &refs,
        &[Label::Hc, Label::Pd],
        &names,
        out,
    )?;
    let degenerate = samples.iter().filter(|s| s.explanation.degenerate).count();
    println!(
        "{} windows explained, {degenerate} degenerate",
        samples.len()
    );
    for g in &groups {
        let edges = match g.group {
            Label::Pd => &cfg.data.synth.pd_edges,
            Label::Hc => &cfg.data.synth.hc_edges,
        };
        let r = rank_edges(&g.adjacency, edges);
        println!(
            "{} mean over {} windows, off-diagonal median {:.3}",
            g.group, g.n_samples, r.median
        );
        for ([i, j], v) in &r.edges {
            println!("  planted {} -> {}: {:.3}", names[*i], names[*j], v);
        }
    }
    Ok(())
}
