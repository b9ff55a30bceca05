//! Contrastive pretraining of the encoder and supervised training of the
//! classifier.
//!
//! Every random draw is taken from a stream derived from `(seed, phase, epoch,
//! ...)`, so a run resumed from a checkpoint at an epoch boundary replays the
//! uninterrupted run exactly.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_encoder, Checkpoint, CheckpointKind, CheckpointMeta};
pub use loss::info_nce;
pub use optim::{adamw_step, default_milestones, multistep_lr, AdamW, Moments};

use crate::augment::{sample_pair, AugmentPolicy};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{batch_tensor, Mode, Model};
use crate::params::{uniform_init, ParamStore};
use crate::rng::derive_rng;
use crate::signal::Window;
use crate::tensor::{Tape, Tensor, Var};

pub const PROJECTOR_PREFIX: &str = "projector.";
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Supervised,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Phase,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` places milestones at 50% and 75% of `epochs`.
    pub lr_milestones: Option<Vec<usize>>,
    pub gamma: f64,
    /// InfoNCE temperature (pretraining only).
    pub temperature: f32,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Output width of the pretraining projector.
    pub projector_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::supervised()
    }
}

impl TrainConfig {
    pub fn supervised() -> Self {
        Self {
            mode: Phase::Supervised,
            lr: 1e-4,
            batch_size: 8,
            epochs: 60,
            lr_milestones: None,
            gamma: 0.1,
            temperature: 0.005,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            projector_dim: 128,
        }
    }

    pub fn pretrain() -> Self {
        Self {
            mode: Phase::Pretrain,
            batch_size: 100,
            epochs: 160,
            ..Self::supervised()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train: lr {} must be positive",
                self.lr
            )));
        }
        let min_batch = if self.mode == Phase::Pretrain { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::Config(format!(
                "train: batch_size {} below {min_batch} for {:?}",
                self.batch_size, self.mode
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "train: gamma {} outside (0, 1]",
                self.gamma
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "train: temperature {} must be positive",
                self.temperature
            )));
        }
        if let Some(ms) = &self.lr_milestones {
            if ms.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Config(format!(
                    "train: milestones {ms:?} not ascending"
                )));
            }
        }
        if self.projector_dim == 0 {
            return Err(Error::Config(
                "train: projector_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        self.lr_milestones
            .clone()
            .unwrap_or_else(|| default_milestones(self.epochs))
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        multistep_lr(epoch, self.lr, &self.milestones(), self.gamma)
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(self.betas, self.eps, self.weight_decay)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = Vec::new();
    for l in logs {
        serde_json::to_writer(&mut out, l)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// `(subject, window index)` of every window that entered a gradient step.
pub type SeenWindows = BTreeSet<(String, usize)>;

/// Shuffled index batches; a trailing batch smaller than `min_last` is folded
/// into the one before it.
fn batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    min_last: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_last) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn bound_grads(tape: &Tape) -> Vec<(String, Vec<f32>)> {
    tape.param_grads()
        .map(|(n, g)| (n.to_string(), g.to_vec()))
        .collect()
}

fn apply_step(tape: &Tape, ps: &mut ParamStore, opt: &mut AdamW, lr: f64) -> Result<()> {
    let grads = bound_grads(tape);
    opt.step(
        ps,
        grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())),
        lr,
    )
}

pub fn init_projector<R: Rng + ?Sized>(d_m: usize, out: usize, rng: &mut R) -> ParamStore {
    let mut ps = ParamStore::new();
    ps.insert(
        format!("{PROJECTOR_PREFIX}w1"),
        uniform_init(&[d_m, d_m], d_m, rng),
    );
    ps.insert(
        format!("{PROJECTOR_PREFIX}b1"),
        uniform_init(&[d_m], d_m, rng),
    );
    ps.insert(
        format!("{PROJECTOR_PREFIX}w2"),
        uniform_init(&[d_m, out], d_m, rng),
    );
    ps.insert(
        format!("{PROJECTOR_PREFIX}b2"),
        uniform_init(&[out], d_m, rng),
    );
    ps
}

/// Two-layer projector on the electrode-mean embedding: `(B, C, d_m) -> (B, out)`.
pub fn project(tape: &mut Tape, ps: &ParamStore, emb: Var) -> Result<Var> {
    let pooled = tape.mean_axis(emb, 1)?;
    let w1 = ps.bind(tape, &format!("{PROJECTOR_PREFIX}w1"))?;
    let b1 = ps.bind(tape, &format!("{PROJECTOR_PREFIX}b1"))?;
    let w2 = ps.bind(tape, &format!("{PROJECTOR_PREFIX}w2"))?;
    let b2 = ps.bind(tape, &format!("{PROJECTOR_PREFIX}b2"))?;
    let h = tape.matmul(pooled, w1)?;
    let h = tape.add_broadcast(h, b1)?;
    let h = tape.gelu(h);
    let z = tape.matmul(h, w2)?;
    let z = tape.add_broadcast(z, b2)?;
    tape.l2_normalize(z)
}

/// Both views of every window in `batch`, stacked `[a_0..a_N, b_0..b_N]`.
pub fn view_batch(
    windows: &[&Window],
    batch: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
    epoch: usize,
) -> Result<Tensor> {
    let mut first = Vec::with_capacity(batch.len());
    let mut second = Vec::with_capacity(batch.len());
    for &i in batch {
        let w = windows[i];
        let mut rng = derive_rng(
            seed,
            &[
                "augment",
                &w.subject_id,
                &w.window_index.to_string(),
                &epoch.to_string(),
            ],
        );
        let (a, b) = sample_pair(w, policy, &mut rng);
        first.push(a);
        second.push(b);
    }
    let all: Vec<&Window> = first.iter().chain(second.iter()).collect();
    batch_tensor(&all)
}

/// Mutable state of a pretraining run between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    /// Encoder and projector.
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub next_epoch: usize,
    pub history: Vec<EpochLog>,
    pub seen: SeenWindows,
}

pub struct Pretrainer<'a> {
    pub encoder: &'a EncoderConfig,
    pub cfg: &'a TrainConfig,
    pub policy: &'a AugmentPolicy,
    pub seed: u64,
    pub windows: &'a [&'a Window],
}

impl Pretrainer<'_> {
    pub fn init_state(&self, encoder_params: ParamStore) -> Result<PretrainState> {
        self.cfg.validate()?;
        let mut rng = derive_rng(self.seed, &["projector"]);
        let mut params = encoder_params;
        params.extend(init_projector(
            self.encoder.d_m,
            self.cfg.projector_dim,
            &mut rng,
        ));
        Ok(PretrainState {
            params,
            optimizer: self.cfg.optimizer(),
            next_epoch: 0,
            history: Vec::new(),
            seen: SeenWindows::new(),
        })
    }

    /// InfoNCE of one batch of view pairs; returns the tape for the backward pass.
    pub fn batch_loss(
        &self,
        params: &ParamStore,
        x: Tensor,
    ) -> Result<(Tape, Var, encoder::BnUpdates)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (emb, upd) = encoder::encode(&mut tape, params, self.encoder, xv, true)?;
        let z = project(&mut tape, params, emb)?;
        let loss = info_nce(&mut tape, z, self.cfg.temperature)?;
        Ok((tape, loss, upd))
    }

    pub fn run_epoch(&self, st: &mut PretrainState) -> Result<()> {
        if self.windows.len() < 2 {
            return Err(Error::invalid(
                "pretrain",
                "need at least two windows for negatives",
            ));
        }
        let epoch = st.next_epoch;
        let lr = self.cfg.lr_at(epoch);
        let mut rng = derive_rng(self.seed, &["pretrain", &epoch.to_string()]);
        let (mut total, mut count) = (0.0f64, 0usize);
        for (bi, batch) in batches(self.windows.len(), self.cfg.batch_size, 2, &mut rng)
            .iter()
            .enumerate()
        {
            let x = view_batch(self.windows, batch, self.policy, self.seed, epoch)?;
            let (mut tape, loss, upd) = self.batch_loss(&st.params, x)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                let w = self.windows[batch[0]];
                return Err(Error::NonFinite(format!(
                    "pretraining loss at epoch {epoch}, batch {bi} (first window {}#{})",
                    w.subject_id, w.window_index
                )));
            }
            tape.backward(loss)?;
            apply_step(&tape, &mut st.params, &mut st.optimizer, lr)?;
            encoder::apply_bn_updates(&mut st.params, &upd)?;
            total += lv as f64 * batch.len() as f64;
            count += batch.len();
            for &i in batch {
                st.seen.insert((
                    self.windows[i].subject_id.clone(),
                    self.windows[i].window_index,
                ));
            }
        }
        st.history.push(EpochLog {
            epoch,
            train_loss: total / count as f64,
            val_loss: None,
            val_acc: None,
            lr,
        });
        log::debug!("pretrain epoch {epoch}: loss {:.5}", total / count as f64);
        st.next_epoch += 1;
        Ok(())
    }

    pub fn run_until(&self, st: &mut PretrainState, epoch: usize) -> Result<()> {
        while st.next_epoch < epoch.min(self.cfg.epochs) {
            self.run_epoch(st)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    /// Encoder parameters only; the projector is dropped.
    pub encoder: ParamStore,
    pub history: Vec<EpochLog>,
    pub seen: SeenWindows,
}

/// Contrastive pretraining of `encoder_params` on `windows`.
pub fn pretrain(
    encoder_cfg: &EncoderConfig,
    encoder_params: ParamStore,
    windows: &[&Window],
    policy: &AugmentPolicy,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let p = Pretrainer {
        encoder: encoder_cfg,
        cfg,
        policy,
        seed,
        windows,
    };
    let mut st = p.init_state(encoder_params)?;
    p.run_until(&mut st, cfg.epochs)?;
    Ok(PretrainOutcome {
        encoder: st.params.subset(encoder::PREFIX),
        history: st.history,
        seen: st.seen,
    })
}

/// Mean cross-entropy, accuracy and logits of `model` over `windows`.
pub fn evaluate(
    model: &Model,
    windows: &[&Window],
    graphs: Option<&[Tensor]>,
) -> Result<(f64, f64, Tensor)> {
    if windows.is_empty() {
        return Err(Error::invalid("evaluate", "no windows"));
    }
    let mut logits = Vec::with_capacity(windows.len() * 2);
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (ci, chunk) in windows.chunks(EVAL_CHUNK).enumerate() {
        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(chunk)?);
        let g = match graphs {
            Some(gs) => Some(Tensor::stack(
                &gs[ci * EVAL_CHUNK..ci * EVAL_CHUNK + chunk.len()],
            )?),
            None => model.static_graphs(chunk)?,
        };
        let out =
            model.forward::<rand_chacha::ChaCha8Rng>(&mut tape, x, g.as_ref(), Mode::EVAL, None)?;
        let labels: Vec<usize> = chunk.iter().map(|w| w.label.index()).collect();
        let ce = tape.cross_entropy(out.logits, &labels)?;
        loss += tape.value(ce).item() as f64 * chunk.len() as f64;
        let lv = tape.data(out.logits);
        for (row, &y) in lv.chunks_exact(2).zip(&labels) {
            let pred = usize::from(row[1] > row[0]);
            correct += usize::from(pred == y);
        }
        logits.extend_from_slice(lv);
    }
    let n = windows.len() as f64;
    Ok((
        loss / n,
        correct as f64 / n,
        Tensor::new([windows.len(), 2], logits)?,
    ))
}

/// Mutable state of a supervised run between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedState {
    pub model: Model,
    pub optimizer: AdamW,
    pub next_epoch: usize,
    pub history: Vec<EpochLog>,
    /// Lowest selection loss so far, its epoch and parameters.
    pub best: Option<(f64, usize, ParamStore)>,
    pub seen: SeenWindows,
}

pub struct SupervisedTrainer<'a> {
    pub cfg: &'a TrainConfig,
    pub seed: u64,
    pub train: &'a [&'a Window],
    /// Selection uses validation loss, or training loss when empty.
    pub val: &'a [&'a Window],
    train_graphs: Option<Vec<Tensor>>,
    val_graphs: Option<Vec<Tensor>>,
}

impl<'a> SupervisedTrainer<'a> {
    pub fn new(
        model: &Model,
        cfg: &'a TrainConfig,
        seed: u64,
        train: &'a [&'a Window],
        val: &'a [&'a Window],
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("train_supervised", "no training windows"));
        }
        let per_window = |ws: &[&Window]| -> Result<Option<Vec<Tensor>>> {
            ws.iter()
                .map(|w| Ok(model.static_graphs(&[w])?.map(|g| g.index_first(0))))
                .collect::<Result<Option<Vec<_>>>>()
        };
        Ok(Self {
            cfg,
            seed,
            train,
            val,
            train_graphs: per_window(train)?,
            val_graphs: if val.is_empty() {
                None
            } else {
                per_window(val)?
            },
        })
    }

    pub fn init_state(&self, model: Model) -> SupervisedState {
        SupervisedState {
            model,
            optimizer: self.cfg.optimizer(),
            next_epoch: 0,
            history: Vec::new(),
            best: None,
            seen: SeenWindows::new(),
        }
    }

    pub fn run_epoch(&self, st: &mut SupervisedState) -> Result<()> {
        let epoch = st.next_epoch;
        let lr = self.cfg.lr_at(epoch);
        let mut rng = derive_rng(self.seed, &["supervised", &epoch.to_string()]);
        let (mut total, mut count) = (0.0f64, 0usize);
        for (bi, batch) in batches(self.train.len(), self.cfg.batch_size, 1, &mut rng)
            .iter()
            .enumerate()
        {
            let ws: Vec<&Window> = batch.iter().map(|&i| self.train[i]).collect();
            let graphs = match &self.train_graphs {
                Some(g) => Some(Tensor::stack(
                    &batch.iter().map(|&i| g[i].clone()).collect::<Vec<_>>(),
                )?),
                None => None,
            };
            let mut tape = Tape::new();
            let x = tape.constant(batch_tensor(&ws)?);
            let out =
                st.model
                    .forward(&mut tape, x, graphs.as_ref(), Mode::TRAIN, Some(&mut rng))?;
            let labels: Vec<usize> = ws.iter().map(|w| w.label.index()).collect();
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {bi} (first window {}#{})",
                    ws[0].subject_id, ws[0].window_index
                )));
            }
            tape.backward(loss)?;
            apply_step(&tape, &mut st.model.params, &mut st.optimizer, lr)?;
            encoder::apply_bn_updates(&mut st.model.params, &out.bn_updates)?;
            total += lv as f64 * ws.len() as f64;
            count += ws.len();
            for w in &ws {
                st.seen.insert((w.subject_id.clone(), w.window_index));
            }
        }
        let train_loss = total / count as f64;
        let (val_loss, val_acc) = if self.val.is_empty() {
            (None, None)
        } else {
            let (l, a, _) = evaluate(&st.model, self.val, self.val_graphs.as_deref())?;
            (Some(l), Some(a))
        };
        let select = val_loss.unwrap_or(train_loss);
        if st.best.as_ref().is_none_or(|(b, _, _)| select < *b) {
            st.best = Some((select, epoch, st.model.params.clone()));
        }
        st.history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:?} acc {val_acc:?}");
        st.next_epoch += 1;
        Ok(())
    }

    pub fn run_until(&self, st: &mut SupervisedState, epoch: usize) -> Result<()> {
        while st.next_epoch < epoch.min(self.cfg.epochs) {
            self.run_epoch(st)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Model with the best-selection parameters.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub seen: SeenWindows,
}

impl SupervisedState {
    pub fn into_outcome(self) -> TrainOutcome {
        let (model, best_epoch) = match self.best {
            Some((_, e, params)) => (
                Model {
                    params,
                    ..self.model
                },
                e,
            ),
            None => (self.model, 0),
        };
        TrainOutcome {
            model,
            best_epoch,
            history: self.history,
            seen: self.seen,
        }
    }
}

/// Trains `model` with cross-entropy and returns the best-validation checkpoint.
pub fn train_supervised(
    model: Model,
    train: &[&Window],
    val: &[&Window],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let t = SupervisedTrainer::new(&model, cfg, seed, train, val)?;
    let mut st = t.init_state(model);
    t.run_until(&mut st, cfg.epochs)?;
    Ok(st.into_outcome())
}
