//! Checkpoint files: one JSON metadata line followed by named tensor records.
//!
//! Record names are `param/<name>`, `buffer/<name>`, `best.param/<name>`,
//! `best.buffer/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, EpochLog, Moments, PretrainState, SeenWindows, SupervisedState, TrainConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{read_tensors, write_tensor, Tensor};

pub const FORMAT: &str = "eeg-gsl-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrain,
    Supervised,
}

/// All randomness is derived from `seed` and the epoch counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub kind: CheckpointKind,
    pub encoder: EncoderConfig,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub rng: RngState,
    /// False while the run still has epochs to go.
    pub complete: bool,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_loss: Option<f64>,
    pub frozen: Vec<String>,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub adam_weight_decay: f64,
    pub adam_steps: BTreeMap<String, u64>,
    pub seen: Vec<(String, usize)>,
    /// Free-form configuration echo.
    #[serde(default)]
    pub echo: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub best: Option<ParamStore>,
    pub optimizer: AdamW,
}

fn frozen_names(ps: &ParamStore) -> Vec<String> {
    ps.params()
        .filter(|(_, t)| !t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn meta(
    kind: CheckpointKind,
    encoder: &EncoderConfig,
    model: Option<&ModelConfig>,
    train: &TrainConfig,
    seed: u64,
    next_epoch: usize,
    history: &[EpochLog],
    params: &ParamStore,
    opt: &AdamW,
    seen: &SeenWindows,
) -> CheckpointMeta {
    CheckpointMeta {
        format: FORMAT.into(),
        kind,
        encoder: encoder.clone(),
        model: model.cloned(),
        train: train.clone(),
        seed,
        epoch: next_epoch,
        rng: RngState {
            algorithm: "chacha8/derived".into(),
            seed,
            next_epoch,
        },
        complete: next_epoch >= train.epochs,
        history: history.to_vec(),
        best_epoch: None,
        best_loss: None,
        frozen: frozen_names(params),
        adam_betas: opt.betas,
        adam_eps: opt.eps,
        adam_weight_decay: opt.weight_decay,
        adam_steps: opt.state.iter().map(|(k, m)| (k.clone(), m.t)).collect(),
        seen: seen.iter().cloned().collect(),
        echo: serde_json::Value::Null,
    }
}

impl Checkpoint {
    /// A finished run keeps only the encoder; an unfinished one keeps the
    /// projector and optimizer so it can resume.
    pub fn from_pretrain(
        st: &PretrainState,
        encoder: &EncoderConfig,
        train: &TrainConfig,
        seed: u64,
    ) -> Self {
        let done = st.next_epoch >= train.epochs;
        let params = if done {
            st.params.subset(crate::encoder::PREFIX)
        } else {
            st.params.clone()
        };
        let optimizer = if done {
            AdamW::new(
                st.optimizer.betas,
                st.optimizer.eps,
                st.optimizer.weight_decay,
            )
        } else {
            st.optimizer.clone()
        };
        let m = meta(
            CheckpointKind::Pretrain,
            encoder,
            None,
            train,
            seed,
            st.next_epoch,
            &st.history,
            &params,
            &optimizer,
            &st.seen,
        );
        Checkpoint {
            meta: m,
            params,
            best: None,
            optimizer,
        }
    }

    pub fn from_supervised(st: &SupervisedState, train: &TrainConfig, seed: u64) -> Self {
        let cfg = &st.model.config;
        let mut m = meta(
            CheckpointKind::Supervised,
            &cfg.encoder,
            Some(cfg),
            train,
            seed,
            st.next_epoch,
            &st.history,
            &st.model.params,
            &st.optimizer,
            &st.seen,
        );
        m.best_epoch = st.best.as_ref().map(|b| b.1);
        m.best_loss = st.best.as_ref().map(|b| b.0);
        Checkpoint {
            meta: m,
            params: st.model.params.clone(),
            best: st.best.as_ref().map(|b| b.2.clone()),
            optimizer: st.optimizer.clone(),
        }
    }

    pub fn into_pretrain_state(self) -> Result<PretrainState> {
        self.expect_kind(CheckpointKind::Pretrain)?;
        Ok(PretrainState {
            params: self.params,
            optimizer: self.optimizer,
            next_epoch: self.meta.epoch,
            history: self.meta.history,
            seen: self.meta.seen.into_iter().collect(),
        })
    }

    pub fn into_supervised_state(self) -> Result<SupervisedState> {
        self.expect_kind(CheckpointKind::Supervised)?;
        let config = self
            .meta
            .model
            .clone()
            .ok_or_else(|| Error::Config("checkpoint lacks a model config".into()))?;
        let best = match (self.meta.best_loss, self.meta.best_epoch, self.best) {
            (Some(l), Some(e), Some(p)) => Some((l, e, p)),
            _ => None,
        };
        Ok(SupervisedState {
            model: Model {
                config,
                params: self.params,
            },
            optimizer: self.optimizer,
            next_epoch: self.meta.epoch,
            history: self.meta.history,
            best,
            seen: self.meta.seen.into_iter().collect(),
        })
    }

    /// The best-selection model of a supervised checkpoint.
    pub fn best_model(&self) -> Result<Model> {
        self.expect_kind(CheckpointKind::Supervised)?;
        let config = self
            .meta
            .model
            .clone()
            .ok_or_else(|| Error::Config("checkpoint lacks a model config".into()))?;
        Ok(Model {
            config,
            params: self.best.clone().unwrap_or_else(|| self.params.clone()),
        })
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut w = BufWriter::new(f);
            let io = |e| Error::io(&tmp, e);
            serde_json::to_writer(&mut w, &self.meta)?;
            w.write_all(b"\n").map_err(io)?;
            write_store(&mut w, "", &self.params).map_err(io)?;
            if let Some(best) = &self.best {
                write_store(&mut w, "best.", best).map_err(io)?;
            }
            for (name, m) in &self.optimizer.state {
                write_tensor(
                    &mut w,
                    &format!("adam.m/{name}"),
                    &Tensor::new([m.m.len()], m.m.clone()).expect("1-d"),
                )
                .map_err(io)?;
                write_tensor(
                    &mut w,
                    &format!("adam.v/{name}"),
                    &Tensor::new([m.v.len()], m.v.clone()).expect("1-d"),
                )
                .map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("metadata line: {e}"),
        })?;
        if meta.format != FORMAT {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported format '{}'", meta.format),
            });
        }
        let mut params = ParamStore::new();
        let mut best: Option<ParamStore> = None;
        let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
        for (name, t) in read_tensors(&mut r)? {
            let (kind, key) = name.split_once('/').ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("record name '{name}' has no kind prefix"),
            })?;
            match kind {
                "param" => params.insert(key, t),
                "buffer" => params.insert_buffer(key, t),
                "best.param" => best.get_or_insert_with(ParamStore::new).insert(key, t),
                "best.buffer" => best
                    .get_or_insert_with(ParamStore::new)
                    .insert_buffer(key, t),
                "adam.m" => moments.entry(key.to_string()).or_default().m = t.into_data(),
                "adam.v" => moments.entry(key.to_string()).or_default().v = t.into_data(),
                other => {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        msg: format!("unknown record kind '{other}'"),
                    })
                }
            }
        }
        for name in &meta.frozen {
            params.set_trainable_exact(name, false)?;
            if let Some(b) = best.as_mut() {
                b.set_trainable_exact(name, false)?;
            }
        }
        for (name, m) in moments.iter_mut() {
            m.t = *meta.adam_steps.get(name).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                msg: format!("optimizer step count missing for {name}"),
            })?;
        }
        let optimizer = AdamW {
            betas: meta.adam_betas,
            eps: meta.adam_eps,
            weight_decay: meta.adam_weight_decay,
            state: moments,
        };
        Ok(Checkpoint {
            meta,
            params,
            best,
            optimizer,
        })
    }
}

fn write_store<W: Write>(w: &mut W, prefix: &str, ps: &ParamStore) -> std::io::Result<()> {
    for (name, t) in ps.params() {
        write_tensor(w, &format!("{prefix}param/{name}"), t)?;
    }
    for (name, t) in ps.buffers() {
        write_tensor(w, &format!("{prefix}buffer/{name}"), t)?;
    }
    Ok(())
}

/// Encoder-only pretrained weights, as consumed by the CL ablations.
pub fn load_encoder(path: &Path) -> Result<(EncoderConfig, ParamStore)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(CheckpointKind::Pretrain)?;
    Ok((
        ck.meta.encoder.clone(),
        ck.params.subset(crate::encoder::PREFIX),
    ))
}
