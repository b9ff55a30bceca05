//! Recording ingest and preprocessing: re-referencing, zero-phase band-pass,
//! fixed-length windowing, per-window standardization, and the static
//! absolute-Pearson-correlation graph.

mod dataset;
mod filter;
mod synth;

pub use dataset::{
    load_dataset, load_windows, read_window_cache, write_dataset, write_window_cache,
    write_window_dir, Manifest, SubjectEntry, WINDOW_INDEX,
};
pub use filter::{Biquad, SosFilter};
pub use synth::{synth_cohort, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagnostic class. Class index 0 is HC and 1 is PD throughout the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "HC", alias = "hc")]
    Hc,
    #[serde(rename = "PD", alias = "pd")]
    Pd,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Hc => 0,
            Label::Pd => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Hc
        } else {
            Label::Pd
        }
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s.to_ascii_uppercase().as_str() {
            "HC" => Some(Label::Hc),
            "PD" => Some(Label::Pd),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Hc => "HC",
            Label::Pd => "PD",
        })
    }
}

/// Continuous multi-channel recording of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub label: Label,
    pub sample_rate_hz: u32,
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<f32>>,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        label: Label,
        sample_rate_hz: u32,
        channel_names: Vec<String>,
        channels: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let rec = Self {
            subject_id: subject_id.into(),
            label,
            sample_rate_hz,
            channel_names,
            channels,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Error::Subject {
            subject: self.subject_id.clone(),
            msg,
        };
        if self.sample_rate_hz == 0 {
            return Err(fail("sample rate must be positive".into()));
        }
        if self.channel_names.len() != self.channels.len() {
            return Err(fail(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.channels.len()
            )));
        }
        let len = self.len();
        if let Some((i, _)) = self
            .channels
            .iter()
            .enumerate()
            .find(|(_, c)| c.len() != len)
        {
            return Err(fail(format!(
                "channel {} has a different length",
                self.channel_names[i]
            )));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Fixed-length segment of a recording, `samples: (C, L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub subject_id: String,
    pub label: Label,
    pub window_index: usize,
    pub samples: Tensor,
}

impl Window {
    pub fn n_channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let l = self.len();
        &self.samples.data()[c * l..(c + 1) * l]
    }
}

/// Symmetric `C × C` adjacency in `[0, 1]` with unit diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticGraph {
    pub adjacency: Tensor,
}

/// Subtracts the samplewise mean of `ref_names` from every other channel and
/// drops the reference channels.
pub fn rereference(rec: &Recording, ref_names: &[&str]) -> Result<Recording> {
    if ref_names.is_empty() {
        return Err(Error::invalid("rereference", "no reference channels given"));
    }
    let mut ref_idx = Vec::with_capacity(ref_names.len());
    for name in ref_names {
        let i = rec
            .channel_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Subject {
                subject: rec.subject_id.clone(),
                msg: format!("unknown reference channel '{name}'"),
            })?;
        ref_idx.push(i);
    }
    let n = rec.len();
    let reference: Vec<f64> = (0..n)
        .map(|t| {
            ref_idx
                .iter()
                .map(|&i| rec.channels[i][t] as f64)
                .sum::<f64>()
                / ref_idx.len() as f64
        })
        .collect();
    let mut names = Vec::new();
    let mut channels = Vec::new();
    for (i, (name, ch)) in rec.channel_names.iter().zip(&rec.channels).enumerate() {
        if ref_idx.contains(&i) {
            continue;
        }
        names.push(name.clone());
        channels.push(
            ch.iter()
                .zip(&reference)
                .map(|(&v, &r)| (v as f64 - r) as f32)
                .collect(),
        );
    }
    Recording::new(
        rec.subject_id.clone(),
        rec.label,
        rec.sample_rate_hz,
        names,
        channels,
    )
}

/// Prototype order of the band-pass (the digital filter has twice as many poles).
pub const BANDPASS_ORDER: usize = 4;

/// Zero-phase Butterworth band-pass applied per channel; length is preserved.
pub fn bandpass(rec: &Recording, lo_hz: f64, hi_hz: f64) -> Result<Recording> {
    let fs = rec.sample_rate_hz as f64;
    let filter =
        SosFilter::butterworth_bandpass(BANDPASS_ORDER, lo_hz, hi_hz, fs).map_err(|e| {
            Error::Subject {
                subject: rec.subject_id.clone(),
                msg: e.to_string(),
            }
        })?;
    let pad = 3 * filter.order();
    let channels = rec
        .channels
        .iter()
        .map(|c| filter.filtfilt(c, pad))
        .collect();
    Ok(Recording {
        channels,
        ..rec.clone()
    })
}

/// Samples per window for a given duration.
pub fn window_len(window_seconds: f64, sample_rate_hz: u32) -> usize {
    (window_seconds * sample_rate_hz as f64).round() as usize
}

/// Non-overlapping, gap-free windows from the start of the recording; the tail
/// remainder shorter than a window is discarded.
pub fn segment(rec: &Recording, window_seconds: f64) -> Vec<Window> {
    let l = window_len(window_seconds, rec.sample_rate_hz);
    if l == 0 || rec.len() < l {
        log::warn!(
            "subject {}: recording of {:.2} s is shorter than one {window_seconds} s window",
            rec.subject_id,
            rec.duration_s()
        );
        return Vec::new();
    }
    let c = rec.n_channels();
    (0..rec.len() / l)
        .map(|w| {
            let mut data = Vec::with_capacity(c * l);
            for ch in &rec.channels {
                data.extend_from_slice(&ch[w * l..(w + 1) * l]);
            }
            Window {
                subject_id: rec.subject_id.clone(),
                label: rec.label,
                window_index: w,
                samples: Tensor::new([c, l], data).expect("window shape"),
            }
        })
        .collect()
}

/// Each channel to zero mean and unit variance within the window. A constant
/// channel becomes all zeros.
pub fn standardize(w: &Window) -> Window {
    let (c, l) = (w.n_channels(), w.len());
    let mut data = Vec::with_capacity(c * l);
    for ch in 0..c {
        let x = w.channel(ch);
        let mean = x.iter().map(|&v| v as f64).sum::<f64>() / l as f64;
        let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / l as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        data.extend(x.iter().map(|&v| ((v as f64 - mean) * inv) as f32));
    }
    Window {
        samples: Tensor::new([c, l], data).expect("window shape"),
        ..w.clone()
    }
}

/// `|Pearson r|` between every pair of channels, unit diagonal. Channels with
/// zero variance get zero off-diagonal entries.
pub fn pcc_graph(w: &Window) -> StaticGraph {
    let (c, l) = (w.n_channels(), w.len());
    let centered: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            let x = w.channel(ch);
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / l as f64;
            x.iter().map(|&v| v as f64 - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for (ch, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            log::warn!(
                "subject {} window {}: channel {ch} has zero variance; its correlations are set to 0",
                w.subject_id,
                w.window_index
            );
        }
    }
    let mut adj = Tensor::eye(c);
    for i in 0..c {
        for j in i + 1..c {
            let r = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = centered[i]
                    .iter()
                    .zip(&centered[j])
                    .map(|(a, b)| a * b)
                    .sum();
                (dot / (norms[i] * norms[j])).abs().min(1.0)
            } else {
                0.0
            };
            adj.set(&[i, j], r as f32);
            adj.set(&[j, i], r as f32);
        }
    }
    StaticGraph { adjacency: adj }
}

/// Preprocessing settings for turning recordings into model-ready windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Reference channels averaged and subtracted; empty skips re-referencing.
    pub reference: Vec<String>,
    pub band_hz: [f64; 2],
    pub window_seconds: f64,
    pub standardize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            reference: vec!["EXG7".into(), "EXG8".into()],
            band_hz: [0.5, 80.0],
            window_seconds: 2.0,
            standardize: true,
        }
    }
}

/// Re-reference, band-pass, segment, and (optionally) standardize.
pub fn preprocess(rec: &Recording, cfg: &PreprocessConfig) -> Result<Vec<Window>> {
    let rec = if cfg.reference.is_empty() {
        rec.clone()
    } else {
        let refs: Vec<&str> = cfg.reference.iter().map(String::as_str).collect();
        rereference(rec, &refs)?
    };
    let rec = bandpass(&rec, cfg.band_hz[0], cfg.band_hz[1])?;
    let windows = segment(&rec, cfg.window_seconds);
    Ok(if cfg.standardize {
        windows.iter().map(standardize).collect()
    } else {
        windows
    })
}
