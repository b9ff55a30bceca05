//! Synthetic cohorts with class-dependent directed coupling between channels.
//!
//! Every channel is unit-variance AR(1) background plus its own band-limited
//! rhythm `r_c` (independent band-passed noise, unit variance). Channels on a
//! planted edge of the subject's class carry the rhythm at `rhythm_amplitude`,
//! all others at `idle_rhythm_amplitude`. For each planted edge `i -> j`,
//! channel `j` additionally receives `coupling * a_i * r_i[t - lag]`, a scaled
//! copy of channel `i`'s band-limited component. White noise at `noise_level`
//! is added last.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Label, Recording, SosFilter};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_hc: usize,
    pub n_pd: usize,
    pub channels: usize,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    /// Directed `[source, target]` pairs planted in healthy controls.
    pub hc_edges: Vec<[usize; 2]>,
    /// Directed `[source, target]` pairs planted in PD subjects.
    pub pd_edges: Vec<[usize; 2]>,
    pub coupling: f64,
    pub noise_level: f64,
    /// Band of the copied component.
    pub band_hz: [f64; 2],
    pub lag_samples: usize,
    /// AR(1) coefficient of the background noise.
    pub ar_coef: f64,
    /// Rhythm amplitude of channels on a planted edge.
    pub rhythm_amplitude: f64,
    /// Rhythm amplitude of every other channel.
    pub idle_rhythm_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_hc: 4,
            n_pd: 4,
            channels: 8,
            duration_s: 60.0,
            sample_rate_hz: 128,
            hc_edges: vec![[4, 5], [5, 4]],
            pd_edges: vec![[0, 1], [1, 0], [2, 3], [3, 2]],
            coupling: 0.8,
            noise_level: 0.5,
            band_hz: [8.0, 12.0],
            lag_samples: 1,
            ar_coef: 0.5,
            rhythm_amplitude: 2.0,
            idle_rhythm_amplitude: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.channels == 0 || self.sample_rate_hz == 0 || self.duration_s <= 0.0 {
            return bad("channels, sample rate, and duration must be positive".into());
        }
        for (class, edges) in [("HC", &self.hc_edges), ("PD", &self.pd_edges)] {
            for &[s, t] in edges {
                if s >= self.channels || t >= self.channels {
                    return bad(format!(
                        "{class} edge ({s}, {t}) references a channel >= {}",
                        self.channels
                    ));
                }
                if s == t {
                    return bad(format!("{class} edge ({s}, {t}) is a self-loop"));
                }
            }
        }
        if self.hc_edges.iter().any(|e| self.pd_edges.contains(e)) {
            return bad("HC and PD edge sets must be disjoint".into());
        }
        if self.rhythm_amplitude < 0.0 || self.idle_rhythm_amplitude < 0.0 || self.noise_level < 0.0
        {
            return bad("amplitudes and noise level must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.ar_coef.abs()) {
            return bad(format!(
                "AR coefficient {} must satisfy |a| < 1",
                self.ar_coef
            ));
        }
        Ok(())
    }

    pub fn edges(&self, label: Label) -> &[[usize; 2]] {
        match label {
            Label::Hc => &self.hc_edges,
            Label::Pd => &self.pd_edges,
        }
    }

    pub fn channel_names(&self) -> Vec<String> {
        (0..self.channels).map(|c| format!("Ch{c}")).collect()
    }
}

fn unit_variance(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    for v in x.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Generates `n_hc` healthy then `n_pd` PD subjects (`HC00`, ..., `PD00`, ...).
/// Subject `k` draws from stream `k` of the seeded generator, so each
/// subject is reproducible on its own.
pub fn synth_cohort(cfg: &SynthConfig, seed: u64) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let fs = cfg.sample_rate_hz as f64;
    let n = (cfg.duration_s * fs).round() as usize;
    let band = SosFilter::butterworth_bandpass(4, cfg.band_hz[0], cfg.band_hz[1], fs)?;
    let subjects = (0..cfg.n_hc)
        .map(|i| (format!("HC{i:02}"), Label::Hc))
        .chain((0..cfg.n_pd).map(|i| (format!("PD{i:02}"), Label::Pd)));
    subjects
        .enumerate()
        .map(|(k, (id, label))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
            let mut unit_noise = |ar: f64| {
                let mut x = vec![0.0f64; n];
                let mut prev = 0.0;
                for v in x.iter_mut() {
                    prev = ar * prev + gauss();
                    *v = prev;
                }
                unit_variance(&mut x);
                x
            };
            let background: Vec<Vec<f64>> =
                (0..cfg.channels).map(|_| unit_noise(cfg.ar_coef)).collect();
            let rhythms: Vec<Vec<f64>> = (0..cfg.channels)
                .map(|_| {
                    let white: Vec<f32> = unit_noise(0.0).into_iter().map(|v| v as f32).collect();
                    let mut r: Vec<f64> = band
                        .filtfilt(&white, 3 * band.order())
                        .into_iter()
                        .map(f64::from)
                        .collect();
                    unit_variance(&mut r);
                    r
                })
                .collect();
            let edges = cfg.edges(label);
            let amp: Vec<f64> = (0..cfg.channels)
                .map(|c| {
                    if edges.iter().any(|e| e.contains(&c)) {
                        cfg.rhythm_amplitude
                    } else {
                        cfg.idle_rhythm_amplitude
                    }
                })
                .collect();
            let mut out: Vec<Vec<f64>> = background
                .iter()
                .zip(&rhythms)
                .zip(&amp)
                .map(|((b, r), a)| b.iter().zip(r).map(|(b, r)| b + a * r).collect())
                .collect();
            for &[src, dst] in edges {
                for t in cfg.lag_samples..n {
                    out[dst][t] += cfg.coupling * amp[src] * rhythms[src][t - cfg.lag_samples];
                }
            }
            let channels = out
                .into_iter()
                .map(|ch| {
                    ch.into_iter()
                        .map(|v| (v + cfg.noise_level * gauss()) as f32)
                        .collect()
                })
                .collect();
            Recording::new(id, label, cfg.sample_rate_hz, cfg.channel_names(), channels)
        })
        .collect()
}
