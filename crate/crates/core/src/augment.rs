//! Stochastic views of EEG windows for contrastive pretraining: additive
//! Gaussian noise, contiguous masking, time or electrode flips, and per-channel
//! DC shifts.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Window;
use crate::tensor::Tensor;

/// Amplitudes are in units of the window's overall standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub noise_sigma_range: [f32; 2],
    pub mask_fraction_range: [f32; 2],
    /// Shifts are drawn from `[-dc_shift_max, dc_shift_max]`.
    pub dc_shift_max: f32,
    /// Chance that a drawn flip is actually applied.
    pub flip_probability: f32,
    pub enable_noise: bool,
    pub enable_mask: bool,
    pub enable_time_flip: bool,
    pub enable_channel_flip: bool,
    pub enable_dc_shift: bool,
    pub compose_count: usize,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_sigma_range: [0.0, 0.2],
            mask_fraction_range: [0.0, 0.25],
            dc_shift_max: 0.1,
            flip_probability: 0.5,
            enable_noise: true,
            enable_mask: true,
            enable_time_flip: true,
            enable_channel_flip: true,
            enable_dc_shift: true,
            compose_count: 2,
        }
    }
}

impl AugmentPolicy {
    /// Every augmentation enabled with zero width: views equal their source.
    pub fn zero_width() -> Self {
        Self {
            noise_sigma_range: [0.0, 0.0],
            mask_fraction_range: [0.0, 0.0],
            dc_shift_max: 0.0,
            flip_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_range =
            |r: [f32; 2]| r[0].is_finite() && r[1].is_finite() && 0.0 <= r[0] && r[0] <= r[1];
        if !ok_range(self.noise_sigma_range) {
            return Err(Error::Config(format!(
                "augment: bad noise range {:?}",
                self.noise_sigma_range
            )));
        }
        if !ok_range(self.mask_fraction_range) || self.mask_fraction_range[1] >= 1.0 {
            return Err(Error::Config(format!(
                "augment: mask fraction range {:?} must lie in [0, 1)",
                self.mask_fraction_range
            )));
        }
        if !(self.dc_shift_max.is_finite() && self.dc_shift_max >= 0.0) {
            return Err(Error::Config(format!(
                "augment: bad DC shift {}",
                self.dc_shift_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "augment: flip probability {}",
                self.flip_probability
            )));
        }
        Ok(())
    }

    pub fn enabled(&self) -> Vec<Kind> {
        let mut out = Vec::new();
        let flags = [
            (self.enable_noise, Kind::Noise),
            (self.enable_mask, Kind::Mask),
            (self.enable_time_flip, Kind::TimeFlip),
            (self.enable_channel_flip, Kind::ChannelFlip),
            (self.enable_dc_shift, Kind::DcShift),
        ];
        for (on, kind) in flags {
            if on {
                out.push(kind);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Noise,
    Mask,
    TimeFlip,
    ChannelFlip,
    DcShift,
}

/// Concrete parameters of one augmentation, drawn from a policy.
#[derive(Clone, Debug, PartialEq)]
pub enum Draw {
    /// Additive noise with this absolute standard deviation, sampled from `seed`.
    Noise {
        sigma: f32,
        seed: u64,
    },
    Mask {
        start: usize,
        len: usize,
    },
    TimeFlip {
        apply: bool,
    },
    ChannelFlip {
        apply: bool,
    },
    /// Absolute offset per channel.
    DcShift {
        shifts: Vec<f32>,
    },
}

fn window_std(x: &[f32]) -> f32 {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt() as f32
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f32; 2]) -> f32 {
    if range[1] > range[0] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    }
}

impl Draw {
    pub fn sample<R: Rng + ?Sized>(
        kind: Kind,
        policy: &AugmentPolicy,
        w: &Window,
        rng: &mut R,
    ) -> Draw {
        let (c, l) = (w.n_channels(), w.len());
        let std = window_std(w.samples.data());
        match kind {
            Kind::Noise => Draw::Noise {
                sigma: uniform(rng, policy.noise_sigma_range) * std,
                seed: rng.random(),
            },
            Kind::Mask => {
                let len =
                    (uniform(rng, policy.mask_fraction_range) as f64 * l as f64).round() as usize;
                let start = if len < l {
                    rng.random_range(0..=l - len)
                } else {
                    0
                };
                Draw::Mask {
                    start,
                    len: len.min(l),
                }
            }
            Kind::TimeFlip => Draw::TimeFlip {
                apply: rng.random::<f32>() < policy.flip_probability,
            },
            Kind::ChannelFlip => Draw::ChannelFlip {
                apply: rng.random::<f32>() < policy.flip_probability,
            },
            Kind::DcShift => {
                let s = policy.dc_shift_max;
                Draw::DcShift {
                    shifts: (0..c).map(|_| uniform(rng, [-s, s]) * std).collect(),
                }
            }
        }
    }

    /// Applies the drawn augmentation; shape and metadata are preserved.
    pub fn apply(&self, w: &Window) -> Window {
        let (c, l) = (w.n_channels(), w.len());
        let src = w.samples.data();
        let data: Vec<f32> = match self {
            Draw::Noise { sigma, seed } => {
                if *sigma == 0.0 {
                    src.to_vec()
                } else {
                    let mut rng =
                        <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(*seed);
                    let normal = Normal::new(0.0f32, *sigma).expect("finite sigma");
                    src.iter().map(|&v| v + normal.sample(&mut rng)).collect()
                }
            }
            Draw::Mask { start, len } => {
                let mut d = src.to_vec();
                for ch in 0..c {
                    d[ch * l + start..ch * l + start + len].fill(0.0);
                }
                d
            }
            Draw::TimeFlip { apply: false } | Draw::ChannelFlip { apply: false } => src.to_vec(),
            Draw::TimeFlip { apply: true } => src
                .chunks_exact(l)
                .flat_map(|row| row.iter().rev().copied())
                .collect(),
            Draw::ChannelFlip { apply: true } => {
                src.chunks_exact(l).rev().flatten().copied().collect()
            }
            Draw::DcShift { shifts } => src
                .chunks_exact(l)
                .zip(shifts)
                .flat_map(|(row, &s)| row.iter().map(move |&v| v + s))
                .collect(),
        };
        Window {
            samples: Tensor::new([c, l], data).expect("augmentation preserves shape"),
            ..w.clone()
        }
    }
}

/// One augmented view: `compose_count` distinct augmentations drawn uniformly
/// from the enabled set, applied in draw order.
pub fn sample_view<R: Rng + ?Sized>(w: &Window, policy: &AugmentPolicy, rng: &mut R) -> Window {
    let mut kinds = policy.enabled();
    if kinds.is_empty() {
        log::warn!("augment: every augmentation is disabled; returning the source window");
        return w.clone();
    }
    kinds.shuffle(rng);
    kinds.truncate(policy.compose_count);
    kinds.into_iter().fold(w.clone(), |view, kind| {
        let d = Draw::sample(kind, policy, &view, rng);
        d.apply(&view)
    })
}

/// Two independent views of the same window.
pub fn sample_pair<R: Rng + ?Sized>(
    w: &Window,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (Window, Window) {
    let a = sample_view(w, policy, rng);
    let b = sample_view(w, policy, rng);
    (a, b)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::signal::{standardize, Label};

    fn window(c: usize, l: usize, seed: u64) -> Window {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = Tensor::from_fn([c, l], |_| rng.random_range(-2.0f32..2.0));
        standardize(&Window {
            subject_id: "S".into(),
            label: Label::Pd,
            window_index: 7,
            samples,
        })
    }

    fn only(kind: Kind) -> AugmentPolicy {
        AugmentPolicy {
            enable_noise: kind == Kind::Noise,
            enable_mask: kind == Kind::Mask,
            enable_time_flip: kind == Kind::TimeFlip,
            enable_channel_flip: kind == Kind::ChannelFlip,
            enable_dc_shift: kind == Kind::DcShift,
            compose_count: 1,
            ..AugmentPolicy::default()
        }
    }

    #[test]
    fn zero_width_policy_is_identity() {
        let w = window(4, 64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            assert_eq!(sample_view(&w, &AugmentPolicy::zero_width(), &mut rng), w);
        }
        let (a, b) = sample_pair(&w, &AugmentPolicy::zero_width(), &mut rng);
        assert_eq!(a, w);
        assert_eq!(b, w);
    }

    #[test]
    fn mask_zeroes_exact_contiguous_span() {
        let w = window(3, 100, 3);
        let policy = AugmentPolicy {
            mask_fraction_range: [0.25, 0.25],
            ..only(Kind::Mask)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Draw::sample(Kind::Mask, &policy, &w, &mut rng);
        let Draw::Mask { start, len } = d else {
            unreachable!()
        };
        assert_eq!(len, 25);
        let out = d.apply(&w);
        for ch in 0..3 {
            for t in 0..100 {
                let masked = (start..start + len).contains(&t);
                assert_eq!(out.channel(ch)[t] == 0.0, masked || w.channel(ch)[t] == 0.0);
            }
        }
    }

    #[test]
    fn time_flip_is_an_involution() {
        let w = window(3, 50, 5);
        let d = Draw::TimeFlip { apply: true };
        let once = d.apply(&w);
        assert_ne!(once, w);
        assert_eq!(d.apply(&once), w);
    }

    #[test]
    fn noisy_pair_differs() {
        let w = window(4, 64, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let policy = AugmentPolicy {
            noise_sigma_range: [0.1, 0.2],
            ..only(Kind::Noise)
        };
        for _ in 0..10 {
            let (a, b) = sample_pair(&w, &policy, &mut rng);
            assert!(a.samples.max_abs_diff(&b.samples) > 0.0);
        }
    }

    #[test]
    fn pairs_are_reproducible_per_seed() {
        let w = window(4, 64, 8);
        let run = || {
            sample_pair(
                &w,
                &AugmentPolicy::default(),
                &mut ChaCha8Rng::seed_from_u64(9),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn all_disabled_returns_source() {
        let w = window(2, 16, 10);
        let policy = AugmentPolicy {
            enable_noise: false,
            enable_mask: false,
            enable_time_flip: false,
            enable_channel_flip: false,
            enable_dc_shift: false,
            ..AugmentPolicy::default()
        };
        assert_eq!(
            sample_view(&w, &policy, &mut ChaCha8Rng::seed_from_u64(0)),
            w
        );
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            mask_fraction_range: [0.0, 1.0],
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy {
            noise_sigma_range: [0.3, 0.1],
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn views_preserve_shape_and_metadata(seed in any::<u64>(), c in 1usize..5, l in 2usize..80) {
            let w = window(c, l, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let v = sample_view(&w, &AugmentPolicy { compose_count: 5, ..AugmentPolicy::default() }, &mut rng);
            prop_assert_eq!(v.samples.shape(), w.samples.shape());
            prop_assert_eq!(&v.subject_id, &w.subject_id);
            prop_assert_eq!(v.label, w.label);
            prop_assert_eq!(v.window_index, w.window_index);
        }

        #[test]
        fn channel_flip_permutes_rows(seed in any::<u64>(), c in 1usize..6) {
            let w = window(c, 20, seed);
            let v = Draw::ChannelFlip { apply: true }.apply(&w);
            let mut a: Vec<Vec<u32>> = (0..c).map(|i| w.channel(i).iter().map(|x| x.to_bits()).collect()).collect();
            let mut b: Vec<Vec<u32>> = (0..c).map(|i| v.channel(i).iter().map(|x| x.to_bits()).collect()).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn dc_shift_moves_channel_means_only(seed in any::<u64>()) {
            let w = window(3, 40, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Draw::sample(Kind::DcShift, &only(Kind::DcShift), &w, &mut rng);
            let Draw::DcShift { shifts } = &d else { unreachable!() };
            let v = d.apply(&w);
            for ch in 0..3 {
                for (a, b) in v.channel(ch).iter().zip(w.channel(ch)) {
                    prop_assert!(((a - b) - shifts[ch]).abs() < 1e-6);
                }
            }
        }
    }
}
