use std::collections::HashMap;

use super::kernels::{add_into, dot, gemm_nt, gemm_tn, phi_cdf, phi_pdf, transpose};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast {
        x: Var,
        outer: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Conv1d(Conv1dSaved),
    CausalDepthwise {
        x: Var,
        k: Var,
        rows: usize,
        c: usize,
        l: usize,
        lk: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Powf(Var, f32),
    BatchNorm(BnSaved),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAxis {
        x: Var,
        outer: usize,
        extent: usize,
        inner: usize,
        mean: bool,
    },
    SumAll {
        x: Var,
        mean: bool,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        extents: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    L2NormalizeLast {
        x: Var,
        norms: Vec<f32>,
        cols: usize,
    },
    FrobNorm(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
        k: usize,
    },
    NarrowLast {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    RepeatInterleaveLast {
        x: Var,
        times: usize,
        cols: usize,
    },
}

pub(crate) struct Conv1dSaved {
    pub x: Var,
    pub w: Var,
    pub b: Option<Var>,
    pub n: usize,
    pub cin: usize,
    pub l: usize,
    pub cout: usize,
    pub k: usize,
    pub pad_left: usize,
    pub stride: usize,
    pub lout: usize,
}

pub(crate) struct BnSaved {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub n: usize,
    pub c: usize,
    pub l: usize,
    pub train: bool,
}

/// Records operations in execution order; `backward` replays them in reverse.
///
/// A tape is single-use: it is built by one forward pass, differentiated at
/// most once, then dropped.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a named parameter, reusing the leaf if the name was seen before.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.by_name.get(name) {
            return v;
        }
        let v = self.leaf(t.clone());
        self.bindings.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
        v
    }

    /// Registers an existing node under `name`, so later [`Tape::param`] calls
    /// with that name resolve to it.
    pub fn bind_as(&mut self, name: &str, v: Var) {
        self.bindings.push((name.to_string(), v));
        self.by_name.insert(name.to_string(), v);
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.bindings
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.as_str(), g)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if self.consumed {
            return Err(Error::invalid("backward", "tape already differentiated"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.adjoint(i, &g) {
                if !self.nodes[input.0].value.requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn adjoint(&self, i: usize, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].value.requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBroadcast(a, b) => {
                let bn = val(*b).len();
                let mut gb = vec![0.0f64; bn];
                for (j, &gv) in g.iter().enumerate() {
                    gb[j % bn] += gv as f64;
                }
                vec![
                    (*a, g.to_vec()),
                    (*b, gb.into_iter().map(|v| v as f32).collect()),
                ]
            }
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MatMul { a, b, m, k, n } => {
                let mut res = Vec::new();
                if rg(*a) {
                    res.push((*a, gemm_nt(g, val(*b), *m, *n, *k)));
                }
                if rg(*b) {
                    res.push((*b, gemm_tn(val(*a), g, *m, *k, *n)));
                }
                res
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (av, bv) = (val(*a), val(*b));
                let (sa, sb, so) = (m * k, k * n, m * n);
                let mut ga = Vec::with_capacity(batch * sa);
                let mut gb = Vec::with_capacity(batch * sb);
                for t in 0..*batch {
                    let gt = &g[t * so..(t + 1) * so];
                    if rg(*a) {
                        ga.extend(gemm_nt(gt, &bv[t * sb..(t + 1) * sb], *m, *n, *k));
                    }
                    if rg(*b) {
                        gb.extend(gemm_tn(&av[t * sa..(t + 1) * sa], gt, *m, *k, *n));
                    }
                }
                let mut res = Vec::new();
                if rg(*a) {
                    res.push((*a, ga));
                }
                if rg(*b) {
                    res.push((*b, gb));
                }
                res
            }
            Op::TransposeLast {
                x,
                outer,
                rows,
                cols,
            } => {
                let s = rows * cols;
                let mut gx = Vec::with_capacity(outer * s);
                for t in 0..*outer {
                    gx.extend(transpose(&g[t * s..(t + 1) * s], *cols, *rows));
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Conv1d(c) => conv1d_adjoint(c, g, val(c.x), val(c.w), rg),
            Op::CausalDepthwise {
                x,
                k,
                rows,
                c,
                l,
                lk,
            } => {
                let (xv, kv) = (val(*x), val(*k));
                let mut gx = vec![0.0f32; xv.len()];
                let mut gk = vec![0.0f64; kv.len()];
                let mut acc = vec![0.0f64; *l];
                for r in 0..*rows {
                    let ch = r % c;
                    let kr = &kv[ch * lk..(ch + 1) * lk];
                    let xr = &xv[r * l..(r + 1) * l];
                    let gr = &g[r * l..(r + 1) * l];
                    acc.fill(0.0);
                    for (tau, &kt) in kr.iter().enumerate().take(*l) {
                        let kt = kt as f64;
                        for (a, &gv) in acc[..l - tau].iter_mut().zip(&gr[tau..]) {
                            *a += kt * gv as f64;
                        }
                        gk[ch * lk + tau] += dot(&gr[tau..], &xr[..l - tau]);
                    }
                    for (o, &a) in gx[r * l..(r + 1) * l].iter_mut().zip(&acc) {
                        *o = a as f32;
                    }
                }
                vec![(*x, gx), (*k, gk.into_iter().map(|v| v as f32).collect())]
            }
            Op::Softmax { x, cols } => {
                let mut gx = vec![0.0f32; g.len()];
                for ((gr, pr), out) in g
                    .chunks_exact(*cols)
                    .zip(out.chunks_exact(*cols))
                    .zip(gx.chunks_exact_mut(*cols))
                {
                    let s = dot(gr, pr);
                    for ((o, &gv), &p) in out.iter_mut().zip(gr).zip(pr) {
                        *o = (p as f64 * (gv as f64 - s)) as f32;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Gelu(x) => {
                let gx = val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let v = v as f64;
                        (gv as f64 * (phi_cdf(v) + v * phi_pdf(v))) as f32
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Relu(x) => vec![(
                *x,
                val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect(),
            )],
            Op::Exp(x) => vec![(*x, out.iter().zip(g).map(|(o, gv)| o * gv).collect())],
            Op::Log(x) => vec![(*x, val(*x).iter().zip(g).map(|(v, gv)| gv / v).collect())],
            Op::Powf(x, p) => vec![(
                *x,
                val(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| gv * p * v.powf(p - 1.0))
                    .collect(),
            )],
            Op::BatchNorm(bn) => bn_adjoint(bn, g, val(bn.gamma)),
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0f32; val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gx[src] += gv;
                }
                vec![(*x, gx)]
            }
            Op::SumAxis {
                x,
                outer,
                extent,
                inner,
                mean,
            } => {
                let scale = if *mean { 1.0 / *extent as f32 } else { 1.0 };
                let mut gx = vec![0.0f32; outer * extent * inner];
                for o in 0..*outer {
                    for e in 0..*extent {
                        let dst = &mut gx[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d = gv * scale;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumAll { x, mean } => {
                let n = val(*x).len();
                let v = if *mean { g[0] / n as f32 } else { g[0] };
                vec![(*x, vec![v; n])]
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                extents,
            } => {
                let total: usize = extents.iter().sum();
                let mut res = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for (&inp, &e) in inputs.iter().zip(extents) {
                    let mut gi = Vec::with_capacity(outer * e * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + e * inner]);
                    }
                    offset += e;
                    res.push((inp, gi));
                }
                res
            }
            Op::Dropout { x, mask } => {
                vec![(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect())]
            }
            Op::L2NormalizeLast { x, norms, cols } => {
                let mut gx = vec![0.0f32; g.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let s = dot(yr, gr);
                    for ((o, &y), &gv) in gx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *o = ((gv as f64 - y as f64 * s) / nrm as f64) as f32;
                    }
                }
                vec![(*x, gx)]
            }
            Op::FrobNorm(x) => {
                let n = out[0];
                let scale = if n > 0.0 { g[0] / n } else { 0.0 };
                vec![(*x, val(*x).iter().map(|v| v * scale).collect())]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                k,
            } => {
                let n = labels.len() as f32;
                let mut gx = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    gx[r * k + lab] -= 1.0;
                }
                for v in &mut gx {
                    *v *= g[0] / n;
                }
                vec![(*logits, gx)]
            }
            Op::NarrowLast {
                x,
                start,
                len,
                cols,
            } => {
                let rows = g.len() / len;
                let mut gx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*x, gx)]
            }
            Op::RepeatInterleaveLast { x, times, cols } => {
                let gx = g
                    .chunks_exact(*times)
                    .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect::<Vec<_>>();
                debug_assert_eq!(gx.len() % cols, 0);
                vec![(*x, gx)]
            }
        }
    }
}

fn conv1d_adjoint(
    c: &Conv1dSaved,
    g: &[f32],
    xv: &[f32],
    wv: &[f32],
    rg: impl Fn(Var) -> bool,
) -> Vec<(Var, Vec<f32>)> {
    let Conv1dSaved {
        n,
        cin,
        l,
        cout,
        k,
        pad_left,
        stride,
        lout,
        ..
    } = *c;
    let want_x = rg(c.x);
    let mut gx = vec![0.0f32; if want_x { xv.len() } else { 0 }];
    let mut gw = vec![0.0f64; wv.len()];
    let mut gb = vec![0.0f64; cout];
    for s in 0..n {
        for o in 0..cout {
            let gr = &g[(s * cout + o) * lout..(s * cout + o + 1) * lout];
            gb[o] += gr.iter().map(|&v| v as f64).sum::<f64>();
            for ci in 0..cin {
                let xr = &xv[(s * cin + ci) * l..(s * cin + ci + 1) * l];
                for kk in 0..k {
                    let widx = (o * cin + ci) * k + kk;
                    let wk = wv[widx];
                    let mut acc = 0.0f64;
                    for (t, &gv) in gr.iter().enumerate() {
                        let pos = t * stride + kk;
                        if pos < pad_left || pos - pad_left >= l {
                            continue;
                        }
                        let idx = pos - pad_left;
                        acc += gv as f64 * xr[idx] as f64;
                        if want_x {
                            gx[(s * cin + ci) * l + idx] += wk * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    let mut res = Vec::new();
    if want_x {
        res.push((c.x, gx));
    }
    res.push((c.w, gw.into_iter().map(|v| v as f32).collect()));
    if let Some(b) = c.b {
        res.push((b, gb.into_iter().map(|v| v as f32).collect()));
    }
    res
}

fn bn_adjoint(bn: &BnSaved, g: &[f32], gamma: &[f32]) -> Vec<(Var, Vec<f32>)> {
    let BnSaved { n, c, l, train, .. } = *bn;
    let m = (n * l) as f64;
    let mut gx = vec![0.0f32; g.len()];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for s in 0..n {
            let base = (s * c + ch) * l;
            for t in 0..l {
                sum_g += g[base + t] as f64;
                sum_gx += g[base + t] as f64 * bn.xhat[base + t] as f64;
            }
        }
        ggamma[ch] = sum_gx as f32;
        gbeta[ch] = sum_g as f32;
        let gm = gamma[ch] as f64;
        let inv = bn.inv_std[ch] as f64;
        for s in 0..n {
            let base = (s * c + ch) * l;
            for t in 0..l {
                let dxhat = g[base + t] as f64 * gm;
                gx[base + t] = if train {
                    (inv / m * (m * dxhat - sum_g * gm - bn.xhat[base + t] as f64 * sum_gx * gm))
                        as f32
                } else {
                    (dxhat * inv) as f32
                };
            }
        }
    }
    vec![(bn.x, gx), (bn.gamma, ggamma), (bn.beta, gbeta)]
}
