//! LongConv temporal encoder. Every electrode is encoded as an independent
//! single-channel sequence with shared weights, giving one `d_m` embedding per
//! electrode.
//!
//! Block layout: causal conv → batch norm → GELU → SLConv, where SLConv is a
//! causal depthwise convolution whose kernel spans the whole window and is
//! assembled from progressively upsampled, decayed sub-kernels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform_init, ParamStore};
use crate::tensor::{BnStats, Tape, Tensor, Var};

pub const PREFIX: &str = "encoder.";
pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_m: usize,
    pub n_blocks: usize,
    pub hidden_channels: usize,
    /// Width of the causal ("masked") convolutions.
    pub kernel_size: usize,
    pub slconv_scales: usize,
    pub slconv_base_len: usize,
    pub decay: f32,
    pub pool_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_m: 64,
            n_blocks: 2,
            hidden_channels: 32,
            kernel_size: 3,
            slconv_scales: 6,
            slconv_base_len: 32,
            decay: 0.5,
            pool_stride: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_m", self.d_m),
            ("n_blocks", self.n_blocks),
            ("hidden_channels", self.hidden_channels),
            ("kernel_size", self.kernel_size),
            ("slconv_scales", self.slconv_scales),
            ("slconv_base_len", self.slconv_base_len),
            ("pool_stride", self.pool_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder: {name} must be positive")));
            }
        }
        if self.slconv_scales > 20 {
            return Err(Error::Config("encoder: slconv_scales above 20".into()));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(Error::Config(format!(
                "encoder: decay {} must be finite and >= 0",
                self.decay
            )));
        }
        Ok(())
    }

    /// Total extent of the concatenated sub-kernels before truncation.
    pub fn coverage(&self) -> usize {
        self.slconv_base_len * ((1usize << self.slconv_scales) - 1)
    }

    /// Checks that a window of `len` samples can be encoded.
    pub fn check_len(&self, len: usize) -> Result<()> {
        if self.coverage() < len {
            return Err(Error::Config(format!(
                "encoder: SLConv coverage {} is shorter than the window ({len} samples); raise slconv_scales or slconv_base_len",
                self.coverage()
            )));
        }
        if len < self.pool_stride {
            return Err(Error::Config(format!(
                "encoder: window of {len} samples is shorter than pool_stride {}",
                self.pool_stride
            )));
        }
        Ok(())
    }
}

fn block_name(b: usize, leaf: &str) -> String {
    format!("{PREFIX}block{b}.{leaf}")
}

fn scale_name(b: usize, s: usize) -> String {
    block_name(b, &format!("slconv.scale{s}"))
}

/// Fresh encoder parameters and batch-norm buffers.
pub fn init_params<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let (h, k) = (cfg.hidden_channels, cfg.kernel_size);
    let mut ps = ParamStore::new();
    for b in 0..cfg.n_blocks {
        let cin = if b == 0 { 1 } else { h };
        ps.insert(
            block_name(b, "conv.w"),
            uniform_init(&[h, cin, k], cin * k, rng),
        );
        ps.insert(block_name(b, "conv.b"), uniform_init(&[h], cin * k, rng));
        ps.insert(block_name(b, "bn.gamma"), Tensor::full([h], 1.0));
        ps.insert(block_name(b, "bn.beta"), Tensor::zeros([h]));
        ps.insert_buffer(block_name(b, "bn.running_mean"), Tensor::zeros([h]));
        ps.insert_buffer(block_name(b, "bn.running_var"), Tensor::full([h], 1.0));
        for s in 0..cfg.slconv_scales {
            let w = uniform_init(&[h, cfg.slconv_base_len], cfg.slconv_base_len, rng);
            ps.insert(scale_name(b, s), w);
        }
    }
    ps.insert(
        format!("{PREFIX}out.w"),
        uniform_init(&[cfg.d_m, h, k], h * k, rng),
    );
    ps.insert(
        format!("{PREFIX}out.b"),
        uniform_init(&[cfg.d_m], h * k, rng),
    );
    Ok(ps)
}

/// Concatenation of sub-kernels, scale `s` upsampled by `2^s` and multiplied by
/// `decay^s`, before truncation and normalization.
pub fn upsample_decay(sub_kernels: &[Vec<f32>], decay: f32) -> Vec<f32> {
    let mut out = Vec::new();
    for (s, w) in sub_kernels.iter().enumerate() {
        let gain = decay.powi(s as i32);
        for &v in w {
            out.extend(std::iter::repeat_n(v * gain, 1 << s));
        }
    }
    out
}

/// SLConv kernels of block `b` for every hidden channel: `(hidden, min(len, coverage))`,
/// each row L2-normalized.
pub fn slconv_kernel(
    tape: &mut Tape,
    ps: &ParamStore,
    cfg: &EncoderConfig,
    b: usize,
    len: usize,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(cfg.slconv_scales);
    for s in 0..cfg.slconv_scales {
        let w = ps.bind(tape, &scale_name(b, s))?;
        let up = if s == 0 {
            w
        } else {
            tape.repeat_interleave_last(w, 1 << s)?
        };
        parts.push(if s == 0 {
            up
        } else {
            tape.scale(up, cfg.decay.powi(s as i32))
        });
    }
    let full = tape.concat(&parts, 1)?;
    let keep = len.min(cfg.coverage());
    let cut = if keep < cfg.coverage() {
        tape.narrow_last(full, 0, keep)?
    } else {
        full
    };
    tape.l2_normalize(cut)
}

/// The normalized SLConv kernel of one hidden channel, as a plain vector.
pub fn build_slconv_kernel(
    cfg: &EncoderConfig,
    ps: &ParamStore,
    block: usize,
    channel_index: usize,
    len: usize,
) -> Result<Vec<f32>> {
    if cfg.slconv_base_len == 0 {
        return Err(Error::Config(
            "encoder: slconv_base_len must be positive".into(),
        ));
    }
    if channel_index >= cfg.hidden_channels {
        return Err(Error::invalid(
            "build_slconv_kernel",
            format!(
                "channel {channel_index} >= {} hidden channels",
                cfg.hidden_channels
            ),
        ));
    }
    let mut tape = Tape::new();
    let k = slconv_kernel(&mut tape, ps, cfg, block, len)?;
    let cols = tape.shape(k)[1];
    Ok(tape.data(k)[channel_index * cols..(channel_index + 1) * cols].to_vec())
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("encoder layer {layer}")))
    }
}

/// Batch-norm statistics gathered during a training-mode pass, keyed by the
/// layer prefix.
pub type BnUpdates = Vec<(String, BnStats)>;

/// Encodes `x: (B, C, L)` into `(B, C, d_m)`.
///
/// With `train` set, batch norm uses batch statistics and the returned updates
/// should be folded into the running buffers with [`apply_bn_updates`];
/// otherwise the running statistics are used and the map is deterministic.
pub fn encode(
    tape: &mut Tape,
    ps: &ParamStore,
    cfg: &EncoderConfig,
    x: Var,
    train: bool,
) -> Result<(Var, BnUpdates)> {
    let s = tape.shape(x).to_vec();
    let [bsz, c, len] = s[..] else {
        return Err(Error::shape("encode", &s, &[0, 0, 0]));
    };
    cfg.check_len(len)?;
    let k = cfg.kernel_size;
    let mut h = tape.reshape(x, &[bsz * c, 1, len])?;
    let mut updates = Vec::new();
    for b in 0..cfg.n_blocks {
        let w = ps.bind(tape, &block_name(b, "conv.w"))?;
        let bias = ps.bind(tape, &block_name(b, "conv.b"))?;
        h = tape.conv1d(h, w, Some(bias), k - 1, 0, 1)?;
        check_finite(tape, h, &format!("block{b}.conv"))?;

        let gamma = ps.bind(tape, &block_name(b, "bn.gamma"))?;
        let beta = ps.bind(tape, &block_name(b, "bn.beta"))?;
        let (out, stats) = if train {
            tape.batch_norm(h, gamma, beta, None, BN_EPS)?
        } else {
            let rm = ps.buffer(&block_name(b, "bn.running_mean"))?.data();
            let rv = ps.buffer(&block_name(b, "bn.running_var"))?.data();
            tape.batch_norm(h, gamma, beta, Some((rm, rv)), BN_EPS)?
        };
        if let Some(st) = stats {
            updates.push((block_name(b, "bn"), st));
        }
        h = tape.gelu(out);
        check_finite(tape, h, &format!("block{b}.bn"))?;

        let kernel = slconv_kernel(tape, ps, cfg, b, len)?;
        h = tape.causal_depthwise_conv(h, kernel)?;
        check_finite(tape, h, &format!("block{b}.slconv"))?;
    }
    h = tape.max_pool1d(h, cfg.pool_stride)?;
    let w = ps.bind(tape, &format!("{PREFIX}out.w"))?;
    let bias = ps.bind(tape, &format!("{PREFIX}out.b"))?;
    h = tape.conv1d(h, w, Some(bias), k - 1, 0, 1)?;
    check_finite(tape, h, "out.conv")?;
    let pooled = tape.mean_axis(h, 2)?;
    let out = tape.reshape(pooled, &[bsz, c, cfg.d_m])?;
    Ok((out, updates))
}

/// `running ← (1 − momentum)·running + momentum·batch`.
pub fn apply_bn_updates(ps: &mut ParamStore, updates: &[(String, BnStats)]) -> Result<()> {
    for (layer, st) in updates {
        for (suffix, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
            let buf = ps.buffer_mut(&format!("{layer}.{suffix}"))?;
            for (r, &v) in buf.data_mut().iter_mut().zip(batch.iter()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
    Ok(())
}

/// Eval-mode embeddings of a stack of windows `(B, C, L)` as a plain tensor.
pub fn embed(ps: &ParamStore, cfg: &EncoderConfig, windows: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(windows.clone());
    let (out, _) = encode(&mut tape, ps, cfg, x, false)?;
    Ok(tape.value(out).clone().with_requires_grad(false))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn toy() -> EncoderConfig {
        EncoderConfig {
            d_m: 8,
            n_blocks: 2,
            hidden_channels: 4,
            kernel_size: 3,
            slconv_scales: 5,
            slconv_base_len: 8,
            decay: 0.5,
            pool_stride: 4,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
    }

    fn params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        init_params(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn set_scales(ps: &mut ParamStore, cfg: &EncoderConfig, value: f32) {
        for s in 0..cfg.slconv_scales {
            ps.get_mut(&scale_name(0, s))
                .unwrap()
                .data_mut()
                .fill(value);
        }
    }

    #[test]
    fn hand_built_upsample_and_decay() {
        let raw = upsample_decay(&[vec![1.0; 4], vec![1.0; 4]], 0.5);
        let mut expected = vec![1.0; 4];
        expected.extend([0.5; 8]);
        assert_eq!(raw, expected);

        let cfg = EncoderConfig {
            hidden_channels: 1,
            slconv_scales: 2,
            slconv_base_len: 4,
            n_blocks: 1,
            ..toy()
        };
        let mut ps = params(&cfg, 0);
        set_scales(&mut ps, &cfg, 1.0);
        let k = build_slconv_kernel(&cfg, &ps, 0, 0, 12).unwrap();
        let norm = expected.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (a, e) in k.iter().zip(&expected) {
            assert!((a - e / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn single_scale_kernel_is_normalized_raw_weights() {
        let cfg = EncoderConfig {
            slconv_scales: 1,
            slconv_base_len: 16,
            ..toy()
        };
        let ps = params(&cfg, 1);
        let raw = ps.get(&scale_name(0, 0)).unwrap().data()[16..32].to_vec();
        let k = build_slconv_kernel(&cfg, &ps, 0, 1, 16).unwrap();
        let n = raw.iter().map(|v| v * v).sum::<f32>().sqrt();
        for (a, r) in k.iter().zip(&raw) {
            assert!((a - r / n).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_decay_silences_the_tail() {
        let cfg = EncoderConfig {
            slconv_scales: 3,
            decay: 0.0,
            ..toy()
        };
        let ps = params(&cfg, 2);
        let k = build_slconv_kernel(&cfg, &ps, 0, 0, 56).unwrap();
        assert_eq!(k.len(), 56);
        assert!(k[8..].iter().all(|&v| v == 0.0));
        assert!(k[..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn kernel_truncates_to_window() {
        let cfg = toy();
        let ps = params(&cfg, 3);
        assert_eq!(
            build_slconv_kernel(&cfg, &ps, 1, 3, 100).unwrap().len(),
            100
        );
        let k = build_slconv_kernel(&cfg, &ps, 1, 3, 100).unwrap();
        assert!((k.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(build_slconv_kernel(&cfg, &ps, 0, 4, 100).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig::default().check_len(1024).is_ok());
        let bad = EncoderConfig {
            slconv_base_len: 0,
            ..toy()
        };
        assert!(bad.validate().is_err());
        assert!(toy().check_len(toy().coverage() + 1).is_err());
        assert!(toy().check_len(3).is_err());
    }

    #[test]
    fn output_shape_for_toy_config() {
        let cfg = toy();
        let ps = params(&cfg, 4);
        let out = embed(&ps, &cfg, &random(&[2, 4, 128], 5)).unwrap();
        assert_eq!(out.shape(), &[2, 4, 8]);
        assert!(out.is_finite());
        let short = embed(&ps, &cfg, &random(&[1, 4, 37], 5)).unwrap();
        assert_eq!(short.shape(), &[1, 4, 8]);
    }

    #[test]
    fn zero_window_gives_identical_rows() {
        let cfg = toy();
        let ps = params(&cfg, 6);
        let out = embed(&ps, &cfg, &Tensor::zeros([1, 4, 64])).unwrap();
        let d = out.data();
        for c in 1..4 {
            assert_eq!(&d[c * 8..(c + 1) * 8], &d[..8]);
        }
    }

    #[test]
    fn electrode_permutation_equivariance() {
        let cfg = toy();
        let ps = params(&cfg, 7);
        let x = random(&[1, 4, 96], 8);
        let perm = [2usize, 0, 3, 1];
        let xp = Tensor::from_fn([1, 4, 96], |i| {
            let (c, t) = (i / 96, i % 96);
            x.data()[perm[c] * 96 + t]
        });
        let a = embed(&ps, &cfg, &x).unwrap();
        let b = embed(&ps, &cfg, &xp).unwrap();
        for (c, &p) in perm.iter().enumerate() {
            assert_eq!(&b.data()[c * 8..(c + 1) * 8], &a.data()[p * 8..(p + 1) * 8]);
        }
    }

    #[test]
    fn slconv_is_causal() {
        let cfg = toy();
        let ps = params(&cfg, 9);
        let hidden = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let h = tape.reshape(xv, &[4, 1, 64]).unwrap();
            let w = ps.bind(&mut tape, &block_name(0, "conv.w")).unwrap();
            let b = ps.bind(&mut tape, &block_name(0, "conv.b")).unwrap();
            let h = tape.conv1d(h, w, Some(b), 2, 0, 1).unwrap();
            let k = slconv_kernel(&mut tape, &ps, &cfg, 0, 64).unwrap();
            let y = tape.causal_depthwise_conv(h, k).unwrap();
            tape.value(y).clone()
        };
        let x = random(&[1, 4, 64], 10);
        let t_cut = 30;
        let mut xz = x.clone();
        for c in 0..4 {
            xz.data_mut()[c * 64 + t_cut + 1..(c + 1) * 64].fill(0.0);
        }
        let (a, b) = (hidden(&x), hidden(&xz));
        for r in 0..16 {
            assert_eq!(
                &a.data()[r * 64..r * 64 + t_cut + 1],
                &b.data()[r * 64..r * 64 + t_cut + 1]
            );
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = toy();
        let ps = params(&cfg, 11);
        let x = random(&[3, 4, 64], 12);
        assert_eq!(embed(&ps, &cfg, &x).unwrap(), embed(&ps, &cfg, &x).unwrap());
    }

    #[test]
    fn train_mode_reports_bn_stats() {
        let cfg = toy();
        let mut ps = params(&cfg, 13);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, 4, 64], 14));
        let (_, upd) = encode(&mut tape, &ps, &cfg, x, true).unwrap();
        assert_eq!(upd.len(), 2);
        apply_bn_updates(&mut ps, &upd).unwrap();
        let rm = ps.buffer(&block_name(0, "bn.running_mean")).unwrap();
        for (r, m) in rm.data().iter().zip(&upd[0].1.mean) {
            assert!((r - 0.1 * m).abs() < 1e-7);
        }
    }

    #[test]
    fn slconv_weight_gradient_matches_finite_differences() {
        let cfg = toy();
        let ps = params(&cfg, 15);
        let x = random(&[1, 4, 128], 16);
        let probe = random(&[1, 4, 8], 17);
        let name = scale_name(1, 2);
        let report = grad_check(
            |tape, w| {
                tape.bind_as(&name, w);
                let xv = tape.constant(x.clone());
                let (out, _) = encode(tape, &ps, &cfg, xv, false)?;
                let p = tape.constant(probe.clone());
                let prod = tape.mul(out, p)?;
                Ok(tape.sum(prod))
            },
            ps.get(&name).unwrap(),
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let cfg = toy();
        let ps = params(&cfg, 18);
        let mut x = random(&[1, 4, 64], 19);
        x.data_mut()[5] = f32::NAN;
        let err = embed(&ps, &cfg, &x).unwrap_err();
        assert!(err.to_string().contains("block0.conv"), "{err}");
    }
}
