//! The classifier assembled from encoder and graph learner, in each ablation
//! configuration.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, BnUpdates, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{self, GslConfig};
use crate::params::ParamStore;
use crate::signal::{pcc_graph, Window};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Encoder, electrode mean, linear classifier.
    EncoderOnly,
    /// Chebyshev branch on the |PCC| graph of each window.
    StaticPcc,
    MhgslScratch,
    /// Contrastively pretrained encoder, frozen.
    ClFreeze,
    ClFinetune,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::EncoderOnly,
        Ablation::StaticPcc,
        Ablation::MhgslScratch,
        Ablation::ClFreeze,
        Ablation::ClFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::EncoderOnly => "encoder_only",
            Ablation::StaticPcc => "static_pcc",
            Ablation::MhgslScratch => "mhgsl_scratch",
            Ablation::ClFreeze => "cl_freeze",
            Ablation::ClFinetune => "cl_finetune",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::EncoderOnly => "LongConv Encoder",
            Ablation::StaticPcc => "Full Model w/o MH-GSL",
            Ablation::MhgslScratch => "Full Model with MH-GSL",
            Ablation::ClFreeze => "CL-Encoder + Freeze",
            Ablation::ClFinetune => "CL-Encoder + Finetune",
        }
    }

    pub fn learns_graph(self) -> bool {
        matches!(
            self,
            Ablation::MhgslScratch | Ablation::ClFreeze | Ablation::ClFinetune
        )
    }

    pub fn needs_pretraining(self) -> bool {
        matches!(self, Ablation::ClFreeze | Ablation::ClFinetune)
    }

    pub fn freezes_encoder(self) -> bool {
        self == Ablation::ClFreeze
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gsl: GslConfig,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gsl.validate(self.encoder.d_m)
    }

    /// Number of Chebyshev branches: one per head, or one for the static graph.
    pub fn branches(&self) -> usize {
        match self.ablation {
            Ablation::EncoderOnly => 0,
            Ablation::StaticPcc => 1,
            _ => self.gsl.heads,
        }
    }
}

/// Which stochastic and statistics-gathering behaviours are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Batch norm in the encoder uses batch statistics.
    pub encoder_train: bool,
    pub dropout: bool,
}

impl Mode {
    pub const EVAL: Mode = Mode {
        encoder_train: false,
        dropout: false,
    };
    pub const TRAIN: Mode = Mode {
        encoder_train: true,
        dropout: true,
    };
}

pub struct Forward {
    /// `(B, C, d_m)`
    pub embeddings: Var,
    /// Per-head `(B, C, C)`; empty unless the graph is learned.
    pub graphs: Vec<Var>,
    /// `(B, 2)`
    pub logits: Var,
    pub bn_updates: BnUpdates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Model> {
        config.validate()?;
        let d_m = config.encoder.d_m;
        let mut params = encoder::init_params(&config.encoder, rng)?;
        if config.ablation.learns_graph() {
            params.extend(graph::init_mhgsl(&config.gsl, d_m, rng));
        }
        if config.branches() > 0 {
            params.extend(graph::init_cheb_and_fusion(
                &config.gsl,
                d_m,
                config.branches(),
                rng,
            ));
        }
        params.extend(graph::init_classifier(d_m, rng));
        if config.ablation.freezes_encoder() {
            params.set_trainable(encoder::PREFIX, false);
        }
        Ok(Model { config, params })
    }

    /// `x: (B, C, L)`. `static_graphs` is required for the PCC ablation; `rng`
    /// drives dropout when `mode.dropout` is set.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        static_graphs: Option<&Tensor>,
        mode: Mode,
        rng: Option<&mut R>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let encoder_train = mode.encoder_train && !cfg.ablation.freezes_encoder();
        let (emb, bn_updates) =
            encoder::encode(tape, &self.params, &cfg.encoder, x, encoder_train)?;
        let rng = if mode.dropout { rng } else { None };
        let (graphs, logits) = match cfg.ablation {
            Ablation::EncoderOnly => {
                let pooled = tape.mean_axis(emb, 1)?;
                (Vec::new(), graph::classify(tape, &self.params, pooled)?)
            }
            Ablation::StaticPcc => {
                let a = static_graphs.ok_or_else(|| {
                    Error::invalid("forward", "static_pcc needs per-window PCC graphs")
                })?;
                let av = tape.constant(a.clone());
                let out = graph::fuse_and_classify(tape, &self.params, &cfg.gsl, emb, &[av], rng)?;
                (Vec::new(), out.logits)
            }
            _ => {
                let graphs = graph::mhgsl(tape, &self.params, &cfg.gsl, emb)?;
                let out =
                    graph::fuse_and_classify(tape, &self.params, &cfg.gsl, emb, &graphs, rng)?;
                (graphs, out.logits)
            }
        };
        if !tape.value(logits).is_finite() {
            return Err(Error::NonFinite("classifier logits".into()));
        }
        Ok(Forward {
            embeddings: emb,
            graphs,
            logits,
            bn_updates,
        })
    }

    /// Eval-mode logits `(B, 2)` for a batch of windows.
    pub fn predict(&self, windows: &[&Window]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(windows)?);
        let graphs = self.static_graphs(windows)?;
        let out = self.forward::<rand_chacha::ChaCha8Rng>(
            &mut tape,
            x,
            graphs.as_ref(),
            Mode::EVAL,
            None,
        )?;
        Ok(tape.value(out.logits).clone().with_requires_grad(false))
    }

    /// Per-window |PCC| graphs when the configuration uses them.
    pub fn static_graphs(&self, windows: &[&Window]) -> Result<Option<Tensor>> {
        if self.config.ablation != Ablation::StaticPcc {
            return Ok(None);
        }
        let mats: Vec<Tensor> = windows.iter().map(|w| pcc_graph(w).adjacency).collect();
        Tensor::stack(&mats).map(Some)
    }
}

/// Stacks windows into `(B, C, L)`.
pub fn batch_tensor(windows: &[&Window]) -> Result<Tensor> {
    let first = windows
        .first()
        .ok_or_else(|| Error::invalid("batch_tensor", "empty batch"))?;
    let shape = first.samples.shape().to_vec();
    let mut data = Vec::with_capacity(windows.len() * first.samples.numel());
    for w in windows {
        if w.samples.shape() != shape.as_slice() {
            return Err(Error::Subject {
                subject: w.subject_id.clone(),
                msg: format!(
                    "window {} has shape {:?}, batch expects {:?}",
                    w.window_index,
                    w.samples.shape(),
                    shape
                ),
            });
        }
        data.extend_from_slice(w.samples.data());
    }
    Tensor::new([windows.len(), shape[0], shape[1]], data)
}

/// Softmax probability of the PD class for each row of `(B, 2)` logits.
pub fn pd_probability(logits: &Tensor) -> Vec<f32> {
    logits
        .data()
        .chunks_exact(2)
        .map(|r| 1.0 / (1.0 + (r[0] - r[1]).exp()))
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::signal::Label;

    fn toy_config(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_m: 8,
                n_blocks: 1,
                hidden_channels: 4,
                kernel_size: 3,
                slconv_scales: 4,
                slconv_base_len: 8,
                decay: 0.5,
                pool_stride: 4,
            },
            gsl: GslConfig {
                heads: 2,
                d_k: None,
                cheb_k: 3,
                dropout: 0.2,
            },
            ablation,
        }
    }

    fn windows(n: usize) -> Vec<Window> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..n)
            .map(|i| Window {
                subject_id: format!("S{i}"),
                label: if i % 2 == 0 { Label::Hc } else { Label::Pd },
                window_index: i,
                samples: Tensor::from_fn([4, 64], |_| rng.random_range(-1.0f32..1.0)),
            })
            .collect()
    }

    #[test]
    fn every_ablation_produces_logits() {
        let ws = windows(3);
        let refs: Vec<&Window> = ws.iter().collect();
        for ab in Ablation::ALL {
            let m = Model::new(toy_config(ab), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let logits = m.predict(&refs).unwrap();
            assert_eq!(logits.shape(), &[3, 2], "{ab}");
            let has_wq = m.params.names().any(|n| n.ends_with(".wq"));
            assert_eq!(has_wq, ab.learns_graph(), "{ab}");
        }
    }

    #[test]
    fn freeze_marks_encoder_constant() {
        let m = Model::new(
            toy_config(Ablation::ClFreeze),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        for (name, t) in m.params.params() {
            assert_eq!(
                t.requires_grad(),
                !name.starts_with(encoder::PREFIX),
                "{name}"
            );
        }
    }

    #[test]
    fn ablation_names_round_trip() {
        for ab in Ablation::ALL {
            assert_eq!(ab.name().parse::<Ablation>().unwrap(), ab);
            assert_eq!(
                serde_json::to_string(&ab).unwrap(),
                format!("\"{}\"", ab.name())
            );
        }
        assert!("full".parse::<Ablation>().is_err());
    }

    #[test]
    fn pd_probability_is_softmax() {
        let p = pd_probability(&Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 2.0]]).unwrap());
        assert!((p[0] - 0.5).abs() < 1e-7);
        assert!((p[1] - 1.0 / (1.0 + (-2f32).exp())).abs() < 1e-7);
    }

    #[test]
    fn batch_rejects_mixed_shapes() {
        let mut ws = windows(2);
        ws[1].samples = Tensor::zeros([4, 32]);
        let refs: Vec<&Window> = ws.iter().collect();
        assert!(batch_tensor(&refs).is_err());
        assert!(batch_tensor(&[]).is_err());
    }
}
