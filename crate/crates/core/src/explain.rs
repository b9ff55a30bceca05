//! Head-wise gradient-weighted graph explanations and their group aggregates.
//!
//! For each learned head `A_h` the gradient of the target-class logit
//! `∂Y/∂A_h` is taken with `A_h` treated as an input to the graph branch. The
//! explanation is `(1/H) Σ_h ‖∂Y/∂A_h‖_F · A_h`, clamped to `μ ± 2σ` of its
//! entries and min-max normalized to `[0, 1]`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder;
use crate::error::{Error, Result};
use crate::graph::{self, N_CLASSES};
use crate::model::{batch_tensor, Model};
use crate::signal::{Label, Window};
use crate::tensor::{Tape, Tensor, Var};

const CLAMP_SIGMAS: f64 = 2.0;

/// Learned adjacencies of one window and the target-logit gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGraphs {
    /// Per-head `(C, C)`.
    pub adjacency: Vec<Tensor>,
    /// Per-head `(C, C)` gradient of the target logit.
    pub gradients: Vec<Tensor>,
    /// Eval-mode logits of the window.
    pub logits: [f32; N_CLASSES],
}

/// Normalized adjacency in `[0, 1]` and the head weights behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    /// `(C, C)`
    pub adjacency: Tensor,
    pub head_grad_norms: Vec<f64>,
    /// The raw weighted matrix was constant (e.g. all gradient norms zero);
    /// `adjacency` is then all zeros.
    pub degenerate: bool,
}

/// An explanation tied to the window it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleExplanation {
    pub subject_id: String,
    pub window_index: usize,
    pub true_label: Label,
    pub predicted: Label,
    pub target_class: Label,
    pub explanation: Explanation,
}

impl SampleExplanation {
    pub fn correct(&self) -> bool {
        self.true_label == self.predicted
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupExplanation {
    pub group: Label,
    /// `(C, C)`
    pub adjacency: Tensor,
    pub n_samples: usize,
}

/// Which targets [`explain_windows`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Predicted,
    True,
    Fixed(Label),
}

fn check_learned(model: &Model) -> Result<()> {
    if model.config.ablation.learns_graph() {
        Ok(())
    } else {
        Err(Error::NoLearnedGraph(model.config.ablation.name().into()))
    }
}

/// `∂Y[target]/∂A_h` for one window in eval mode.
pub fn head_gradients(model: &Model, window: &Window, target: Label) -> Result<HeadGraphs> {
    Ok(head_gradients_batch(model, &[window], &[target])?.remove(0))
}

/// Batched [`head_gradients`]. In eval mode each window's logits depend only
/// on its own graphs, so one backward pass from `Σ_b Y_b[target_b]` yields
/// every per-window gradient.
pub fn head_gradients_batch(
    model: &Model,
    windows: &[&Window],
    targets: &[Label],
) -> Result<Vec<HeadGraphs>> {
    check_learned(model)?;
    if windows.len() != targets.len() {
        return Err(Error::invalid(
            "head_gradients",
            format!("{} windows but {} targets", windows.len(), targets.len()),
        ));
    }
    let cfg = &model.config;
    let mut enc_tape = Tape::new();
    let x = enc_tape.constant(batch_tensor(windows)?);
    let (emb, _) = encoder::encode(&mut enc_tape, &model.params, &cfg.encoder, x, false)?;
    let graphs = graph::mhgsl(&mut enc_tape, &model.params, &cfg.gsl, emb)?;

    let mut tape = Tape::new();
    let emb = tape.constant(enc_tape.value(emb).clone());
    let heads: Vec<Var> = graphs
        .iter()
        .map(|&g| tape.leaf(enc_tape.value(g).clone().with_requires_grad(true)))
        .collect();
    let (ys, logits) = target_logit(&mut tape, model, emb, &heads, targets)?;
    tape.backward(ys)?;

    let b = windows.len();
    let c = tape.shape(heads[0])[1];
    let logit_rows = tape.data(logits).to_vec();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let slice = |data: &[f32]| {
            Tensor::new([c, c], data[i * c * c..(i + 1) * c * c].to_vec()).expect("c*c")
        };
        let adjacency = heads.iter().map(|&h| slice(tape.data(h))).collect();
        let gradients = heads
            .iter()
            .map(|&h| match tape.grad(h) {
                Some(g) => slice(g),
                None => Tensor::zeros([c, c]),
            })
            .collect();
        out.push(HeadGraphs {
            adjacency,
            gradients,
            logits: [logit_rows[i * N_CLASSES], logit_rows[i * N_CLASSES + 1]],
        });
    }
    Ok(out)
}

/// `Σ_b logits[b, target_b]` from fixed embeddings and the given head graphs.
fn target_logit(
    tape: &mut Tape,
    model: &Model,
    emb: Var,
    heads: &[Var],
    targets: &[Label],
) -> Result<(Var, Var)> {
    let out = graph::fuse_and_classify::<rand_chacha::ChaCha8Rng>(
        tape,
        &model.params,
        &model.config.gsl,
        emb,
        heads,
        None,
    )?;
    let mut mask = Tensor::zeros([targets.len(), N_CLASSES]);
    for (i, t) in targets.iter().enumerate() {
        mask.set(&[i, t.index()], 1.0);
    }
    let mask = tape.constant(mask);
    let picked = tape.mul(out.logits, mask)?;
    Ok((tape.sum(picked), out.logits))
}

/// Target logit of one window as a function of its head graphs, with the
/// encoder output held fixed. Used to check [`head_gradients`].
pub fn target_logit_at(
    model: &Model,
    window: &Window,
    heads: &[Tensor],
    target: Label,
) -> Result<f64> {
    check_learned(model)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch_tensor(&[window])?);
    let (emb, _) = encoder::encode(&mut tape, &model.params, &model.config.encoder, x, false)?;
    let vars: Vec<Var> = heads
        .iter()
        .map(|a| {
            let c = a.shape()[0];
            tape.constant(a.clone().reshape([1, c, c]).expect("square"))
        })
        .collect();
    let (y, _) = target_logit(&mut tape, model, emb, &vars, &[target])?;
    Ok(tape.value(y).item() as f64)
}

fn check_square_set(op: &'static str, mats: &[Tensor]) -> Result<usize> {
    let first = mats
        .first()
        .ok_or_else(|| Error::invalid(op, "need at least one head"))?;
    let s = first.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape(op, s, &[s[0], s[0]]));
    }
    for m in mats {
        if m.shape() != s {
            return Err(Error::shape(op, m.shape(), s));
        }
    }
    Ok(s[0])
}

fn frobenius(t: &Tensor) -> f64 {
    t.data()
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Clamps entries to `μ ± 2σ` (population statistics over all entries) and
/// min-max normalizes. A constant matrix maps to zeros and reports `true`.
pub fn clamp_and_normalize(raw: &[f64]) -> (Vec<f64>, bool) {
    let n = raw.len() as f64;
    let mu = raw.iter().sum::<f64>() / n;
    let sigma = (raw.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = (mu - CLAMP_SIGMAS * sigma, mu + CLAMP_SIGMAS * sigma);
    let clamped: Vec<f64> = raw.iter().map(|v| v.clamp(lo, hi)).collect();
    let min = clamped.iter().copied().fold(f64::INFINITY, f64::min);
    let max = clamped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return (vec![0.0; raw.len()], true);
    }
    (
        clamped.iter().map(|v| (v - min) / (max - min)).collect(),
        false,
    )
}

fn to_tensor(c: usize, v: &[f64]) -> Tensor {
    Tensor::new([c, c], v.iter().map(|&x| x as f32).collect()).expect("c*c")
}

/// Gradient-weighted explanation from head graphs and their gradients.
pub fn explain(adjacency: &[Tensor], gradients: &[Tensor]) -> Result<Explanation> {
    let norms: Vec<f64> = gradients.iter().map(frobenius).collect();
    explain_with_norms(adjacency, &norms)
}

/// [`explain`] with the head weights given directly.
pub fn explain_with_norms(adjacency: &[Tensor], norms: &[f64]) -> Result<Explanation> {
    let c = check_square_set("explain", adjacency)?;
    if norms.len() != adjacency.len() {
        return Err(Error::invalid(
            "explain",
            format!(
                "{} heads but {} gradient norms",
                adjacency.len(),
                norms.len()
            ),
        ));
    }
    let h = adjacency.len() as f64;
    let mut raw = vec![0.0f64; c * c];
    for (a, &w) in adjacency.iter().zip(norms) {
        for (r, &v) in raw.iter_mut().zip(a.data()) {
            *r += w * v as f64 / h;
        }
    }
    let (norm, degenerate) = clamp_and_normalize(&raw);
    Ok(Explanation {
        adjacency: to_tensor(c, &norm),
        head_grad_norms: norms.to_vec(),
        degenerate,
    })
}

/// Unweighted head average with the same clamp and normalization.
pub fn mean_attention_baseline(adjacency: &[Tensor]) -> Result<Tensor> {
    Ok(explain_with_norms(adjacency, &vec![1.0; adjacency.len()])?.adjacency)
}

/// Explanations for each window, batched through [`head_gradients_batch`].
pub fn explain_windows(
    model: &Model,
    windows: &[&Window],
    target: Target,
) -> Result<Vec<SampleExplanation>> {
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CHUNK) {
        let predicted: Vec<Label> = model
            .predict(chunk)?
            .data()
            .chunks_exact(N_CLASSES)
            .map(|r| if r[1] > r[0] { Label::Pd } else { Label::Hc })
            .collect();
        let targets: Vec<Label> = chunk
            .iter()
            .zip(&predicted)
            .map(|(w, &p)| match target {
                Target::Predicted => p,
                Target::True => w.label,
                Target::Fixed(l) => l,
            })
            .collect();
        for ((w, hg), (&p, &t)) in chunk
            .iter()
            .zip(head_gradients_batch(model, chunk, &targets)?)
            .zip(predicted.iter().zip(&targets))
        {
            out.push(SampleExplanation {
                subject_id: w.subject_id.clone(),
                window_index: w.window_index,
                true_label: w.label,
                predicted: p,
                target_class: t,
                explanation: explain(&hg.adjacency, &hg.gradients)?,
            });
        }
    }
    Ok(out)
}

/// Entrywise mean over the correctly classified members of `group`.
pub fn group_mean(samples: &[SampleExplanation], group: Label) -> Result<GroupExplanation> {
    let members: Vec<&Tensor> = samples
        .iter()
        .filter(|s| s.true_label == group && s.correct())
        .map(|s| &s.explanation.adjacency)
        .collect();
    let mean = mean_matrices(&members).map_err(|_| {
        Error::invalid(
            "group_mean",
            format!("no correctly classified {group} samples"),
        )
    })?;
    Ok(GroupExplanation {
        group,
        adjacency: mean,
        n_samples: members.len(),
    })
}

/// Entrywise mean of equally shaped matrices.
pub fn mean_matrices(mats: &[&Tensor]) -> Result<Tensor> {
    let first = mats
        .first()
        .ok_or_else(|| Error::invalid("mean_matrices", "empty set"))?;
    let mut acc = vec![0.0f64; first.numel()];
    for m in mats {
        if m.shape() != first.shape() {
            return Err(Error::shape("mean_matrices", m.shape(), first.shape()));
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    let n = mats.len() as f64;
    Tensor::new(
        first.shape().to_vec(),
        acc.iter().map(|v| (v / n) as f32).collect(),
    )
}

/// Where each listed edge ranks against the off-diagonal median.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRanking {
    pub median: f64,
    pub edges: Vec<([usize; 2], f64)>,
}

impl EdgeRanking {
    pub fn all_above_median(&self) -> bool {
        self.edges.iter().all(|(_, v)| *v > self.median)
    }
}

pub fn rank_edges(adjacency: &Tensor, edges: &[[usize; 2]]) -> EdgeRanking {
    let c = adjacency.shape()[0];
    let mut off: Vec<f64> = (0..c)
        .flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| adjacency.at(&[i, j]) as f64)
        .collect();
    off.sort_by(f64::total_cmp);
    let n = off.len();
    let median = if n == 0 {
        0.0
    } else if n % 2 == 1 {
        off[n / 2]
    } else {
        (off[n / 2 - 1] + off[n / 2]) / 2.0
    };
    EdgeRanking {
        median,
        edges: edges
            .iter()
            .map(|&[i, j]| ([i, j], adjacency.at(&[i, j]) as f64))
            .collect(),
    }
}

/// `C × C` matrix as CSV with the channel names as header.
pub fn write_matrix_csv(path: &Path, adjacency: &Tensor, channel_names: &[String]) -> Result<()> {
    let c = adjacency.shape()[0];
    if channel_names.len() != c {
        return Err(Error::invalid(
            "write_matrix_csv",
            format!("{} channel names for a {c}x{c} matrix", channel_names.len()),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(channel_names)?;
    for i in 0..c {
        w.write_record((0..c).map(|j| adjacency.at(&[i, j]).to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let c = names.len();
    let mut data = Vec::with_capacity(c * c);
    for rec in r.records() {
        for field in rec?.iter() {
            data.push(field.trim().parse::<f32>().map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("'{field}': {e}"),
            })?);
        }
    }
    let t = Tensor::new([c, c], data).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: format!("expected a {c}x{c} matrix"),
    })?;
    Ok((names, t))
}

/// Binary 8-bit PGM, `0 -> black`, `1 -> white`, each entry drawn as a
/// `scale × scale` block.
pub fn write_pgm(path: &Path, adjacency: &Tensor, scale: usize) -> Result<()> {
    let (rows, cols) = (adjacency.shape()[0], adjacency.shape()[1]);
    let scale = scale.max(1);
    let mut buf = format!("P5\n{} {}\n255\n", cols * scale, rows * scale).into_bytes();
    for i in 0..rows {
        let line: Vec<u8> = (0..cols)
            .flat_map(|j| {
                let v = (adjacency.at(&[i, j]).clamp(0.0, 1.0) * 255.0).round() as u8;
                std::iter::repeat_n(v, scale)
            })
            .collect();
        for _ in 0..scale {
            buf.extend_from_slice(&line);
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
