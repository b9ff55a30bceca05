#![allow(dead_code)]

use eeg_gsl::config::ExperimentConfig;
use eeg_gsl::signal::{preprocess, synth_cohort, Window};

/// Desk settings shrunk to a 2 + 2 cohort of 12 s recordings and two epochs.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.data.synth.n_hc = 2;
    cfg.data.synth.n_pd = 2;
    cfg.data.synth.duration_s = 12.0;
    cfg.train.supervised.epochs = 2;
    cfg.train.pretrain.epochs = 2;
    cfg.train.pretrain.batch_size = 8;
    cfg.harness.seeds = vec![0];
    cfg
}

pub fn windows(cfg: &ExperimentConfig, seed: u64) -> Vec<Window> {
    synth_cohort(&cfg.data.synth, seed)
        .unwrap()
        .iter()
        .flat_map(|r| preprocess(r, &cfg.data.preprocess).unwrap())
        .collect()
}
