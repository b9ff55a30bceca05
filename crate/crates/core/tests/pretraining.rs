mod common;

use eeg_gsl::config::ExperimentConfig;
use eeg_gsl::encoder;
use eeg_gsl::rng::derive_rng;
use eeg_gsl::signal::Window;
use eeg_gsl::train::Pretrainer;

#[test]
fn contrastive_loss_falls_on_a_toy_cohort() {
    let mut cfg = ExperimentConfig::desk();
    cfg.data.synth.duration_s = 20.0;
    cfg.train.pretrain.epochs = 20;
    let ws = common::windows(&cfg, 5);
    let refs: Vec<&Window> = ws.iter().collect();
    let p = Pretrainer {
        encoder: &cfg.encoder,
        cfg: &cfg.train.pretrain,
        policy: &cfg.augment,
        seed: 5,
        windows: &refs,
    };
    let init = encoder::init_params(&cfg.encoder, &mut derive_rng(5, &["init"])).unwrap();
    let mut st = p.init_state(init).unwrap();
    p.run_until(&mut st, 20).unwrap();
    let losses: Vec<f64> = st.history.iter().map(|h| h.train_loss).collect();
    assert_eq!(losses.len(), 20);
    let falls = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(
        falls * 5 >= 19 * 4,
        "{falls}/19 decreasing transitions: {losses:?}"
    );
}
