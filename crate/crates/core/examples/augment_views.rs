//! Draws contrastive view pairs from one window and reports how far each view
//! drifts from its source.
//!
//! cargo run --example augment_views

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eeg_gsl::augment::{sample_pair, AugmentPolicy};
use eeg_gsl::config::ExperimentConfig;
use eeg_gsl::error::Result;
use eeg_gsl::signal::{preprocess, synth_cohort, Window};

fn corr(a: &Window, b: &Window) -> f64 {
    let (x, y) = (a.samples.data(), b.samples.data());
    let n = x.len() as f64;
    let (mx, my) = (
        x.iter().map(|&v| v as f64).sum::<f64>() / n,
        y.iter().map(|&v| v as f64).sum::<f64>() / n,
    );
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a as f64 - mx, b as f64 - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    sxy / (sxx * syy).sqrt()
}

fn main() -> Result<()> {
    let cfg = ExperimentConfig::synthetic();
    let rec = &synth_cohort(&cfg.data.synth, 1)?[0];
    let w = preprocess(rec, &cfg.data.preprocess)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, policy) in [
        ("default", AugmentPolicy::default()),
        ("zero width", AugmentPolicy::zero_width()),
    ] {
        println!("{name}:");
        for _ in 0..4 {
            let (a, b) = sample_pair(&w, &policy, &mut rng);
            println!(
                "  r(src, a) {:+.3}  r(src, b) {:+.3}  r(a, b) {:+.3}",
                corr(&w, &a),
                corr(&w, &b),
                corr(&a, &b)
            );
        }
    }
    Ok(())
}
