//! Forward definitions of the op catalog. Each method validates shapes, computes
//! the value, and records an [`Op`] carrying whatever the adjoint needs.

use rand::Rng;

use super::kernels::{causal_conv, gemm, phi_cdf, split_axis, transpose};
use super::tape::{BnSaved, Conv1dSaved, Op, Tape, Var};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the convention for running estimates.
    pub var: Vec<f32>,
}

fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    debug_assert_eq!(numel(&shape), data.len());
    Tensor::new(shape, data).expect("op produced inconsistent shape")
}

impl Tape {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn zip_map(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(tensor(sa.to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        tensor(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (e.g. a bias row).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.data(b);
        let bn = bv.len();
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % bn])
            .collect();
        let t = tensor(sa.to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddBroadcast(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_map("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = self.map(a, |v| v * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let t = self.map(a, |v| v + s);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// `(m×k) · (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let t = tensor(vec![m, n], gemm(self.data(a), self.data(b), m, k, n));
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `(B×m×k) · (B×k×n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (av, bv) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(batch * m * n);
        for t in 0..batch {
            data.extend(gemm(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let t = tensor(vec![batch, m, n], data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            t,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = numel(&s[..s.len() - 2]);
        let xv = self.data(x);
        let mut data = Vec::with_capacity(xv.len());
        for t in 0..outer {
            data.extend(transpose(
                &xv[t * rows * cols..(t + 1) * rows * cols],
                rows,
                cols,
            ));
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(shape, data),
            Op::TransposeLast {
                x,
                outer,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let t = tensor(shape.to_vec(), self.data(x).to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// 1-D convolution of `x: (N, Cin, L)` with `w: (Cout, Cin, K)` and optional
    /// bias `(Cout)`. Zero padding on each side, integer stride.
    /// Direct evaluation: O(N · Cout · Cin · K · Lout).
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad_left: usize,
        pad_right: usize,
        stride: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::shape("conv1d", sx, sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv1d", "stride must be positive"));
        }
        let (n, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv1d(bias)", self.shape(b), &[cout]));
            }
        }
        let padded = l + pad_left + pad_right;
        if padded < k {
            return Err(Error::shape("conv1d(length)", sx, sw));
        }
        let lout = (padded - k) / stride + 1;
        let (xv, wv) = (self.data(x), self.data(w));
        let bias = b.map(|b| self.data(b));
        let mut out = vec![0.0f32; n * cout * lout];
        let mut acc = vec![0.0f64; lout];
        for s in 0..n {
            for o in 0..cout {
                acc.fill(bias.map_or(0.0, |bv| bv[o] as f64));
                for ci in 0..cin {
                    let xr = &xv[(s * cin + ci) * l..(s * cin + ci + 1) * l];
                    for kk in 0..k {
                        let wk = wv[(o * cin + ci) * k + kk] as f64;
                        // valid t: pad_left <= t*stride + kk < pad_left + l
                        let t_lo = pad_left.saturating_sub(kk).div_ceil(stride);
                        for (t, a) in acc.iter_mut().enumerate().skip(t_lo) {
                            let idx = t * stride + kk - pad_left;
                            if idx >= l {
                                break;
                            }
                            *a += wk * xr[idx] as f64;
                        }
                    }
                }
                for (dst, &a) in out[(s * cout + o) * lout..(s * cout + o + 1) * lout]
                    .iter_mut()
                    .zip(&acc)
                {
                    *dst = a as f32;
                }
            }
        }
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let saved = Conv1dSaved {
            x,
            w,
            b,
            n,
            cin,
            l,
            cout,
            k,
            pad_left,
            stride,
            lout,
        };
        Ok(self.push(tensor(vec![n, cout, lout], out), Op::Conv1d(saved), rg))
    }

    /// Causal depthwise convolution: `x: (N, C, L)`, `k: (C, Lk)`,
    /// `y[n,c,t] = sum_{tau <= t} k[c,tau] x[n,c,t-tau]`. Cost O(N·C·L·min(L,Lk)).
    pub fn causal_depthwise_conv(&mut self, x: Var, k: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(k));
        if sx.len() != 3 || sk.len() != 2 || sx[1] != sk[0] {
            return Err(Error::shape("causal_depthwise_conv", sx, sk));
        }
        let (n, c, l, lk) = (sx[0], sx[1], sx[2], sk[1]);
        let (xv, kv) = (self.data(x), self.data(k));
        let mut out = vec![0.0f32; xv.len()];
        let mut acc = vec![0.0f64; l];
        for r in 0..n * c {
            let ch = r % c;
            causal_conv(
                &xv[r * l..(r + 1) * l],
                &kv[ch * lk..(ch + 1) * lk],
                &mut acc,
                &mut out[r * l..(r + 1) * l],
            );
        }
        let rg = self.rg(&[x, k]);
        let op = Op::CausalDepthwise {
            x,
            k,
            rows: n * c,
            c,
            l,
            lk,
        };
        Ok(self.push(tensor(vec![n, c, l], out), op, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s.last().ok_or_else(|| Error::shape("softmax", &s, &[]))?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(cols) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for v in row.iter_mut() {
                let e = ((*v - mx) as f64).exp();
                z += e;
                *v = e as f32;
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / z) as f32;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(s, data), Op::Softmax { x, cols }, rg))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| (v as f64 * phi_cdf(v as f64)) as f32);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f32::exp);
        let rg = self.rg(&[x]);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.map(x, f32::ln);
        let rg = self.rg(&[x]);
        self.push(t, Op::Log(x), rg)
    }

    pub fn powf(&mut self, x: Var, p: f32) -> Var {
        let t = self.map(x, |v| v.powf(p));
        let rg = self.rg(&[x]);
        self.push(t, Op::Powf(x, p), rg)
    }

    /// Batch normalization over `(N, C, L)` (or `(N, C)`), per channel `C`.
    ///
    /// Training mode normalizes with the batch statistics and returns them so
    /// the caller can update running estimates; eval mode is the fixed affine
    /// map given by `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        eps: f32,
    ) -> Result<(Var, Option<BnStats>)> {
        let s = self.shape(x).to_vec();
        let (n, c, l) = match s.as_slice() {
            [n, c] => (*n, *c, 1),
            [n, c, l] => (*n, *c, *l),
            _ => return Err(Error::shape("batch_norm", &s, &[])),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm(affine)", &s, self.shape(gamma)));
        }
        let xv = self.data(x);
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let m = n * l;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        let mut unbiased = vec![0.0f32; c];
        match running {
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::shape("batch_norm(running)", &[c], &[rm.len()]));
                }
                mean.copy_from_slice(rm);
                var.copy_from_slice(rv);
            }
            None => {
                if m < 2 {
                    return Err(Error::invalid(
                        "batch_norm",
                        "training mode needs more than one value per channel",
                    ));
                }
                for ch in 0..c {
                    let (mut s1, mut s2) = (0.0f64, 0.0f64);
                    for smp in 0..n {
                        for &v in &xv[(smp * c + ch) * l..(smp * c + ch + 1) * l] {
                            s1 += v as f64;
                        }
                    }
                    let mu = s1 / m as f64;
                    for smp in 0..n {
                        for &v in &xv[(smp * c + ch) * l..(smp * c + ch + 1) * l] {
                            s2 += (v as f64 - mu).powi(2);
                        }
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (s2 / m as f64) as f32;
                    unbiased[ch] = (s2 / (m - 1) as f64) as f32;
                }
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut out = vec![0.0f32; xv.len()];
        for smp in 0..n {
            for ch in 0..c {
                let base = (smp * c + ch) * l;
                for t in base..base + l {
                    xhat[t] = (xv[t] - mean[ch]) * inv_std[ch];
                    out[t] = gv[ch] * xhat[t] + bv[ch];
                }
            }
        }
        let train = running.is_none();
        let rg = self.rg(&[x, gamma, beta]);
        let saved = BnSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            n,
            c,
            l,
            train,
        };
        let v = self.push(tensor(s, out), Op::BatchNorm(saved), rg);
        let stats = train.then_some(BnStats {
            mean,
            var: unbiased,
        });
        Ok((v, stats))
    }

    /// Non-overlapping max pooling over the last axis of `(N, C, L)`; the tail
    /// shorter than `size` is dropped.
    pub fn max_pool1d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || size == 0 || s[2] < size {
            return Err(Error::shape("max_pool1d", &s, &[size]));
        }
        let (rows, l) = (s[0] * s[1], s[2]);
        let lout = l / size;
        let xv = self.data(x);
        let mut out = Vec::with_capacity(rows * lout);
        let mut argmax = Vec::with_capacity(rows * lout);
        for r in 0..rows {
            for t in 0..lout {
                let start = r * l + t * size;
                let (mut best, mut bi) = (xv[start], start);
                for (j, &v) in xv[start..start + size].iter().enumerate() {
                    if v > best {
                        best = v;
                        bi = start + j;
                    }
                }
                out.push(best);
                argmax.push(bi);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(vec![s[0], s[1], lout], out),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(
                if mean { "mean_axis" } else { "sum_axis" },
                &s,
                &[axis],
            ));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let xv = self.data(x);
        let mut out = vec![0.0f32; outer * inner];
        let mut acc = vec![0.0f64; inner];
        for o in 0..outer {
            acc.fill(0.0);
            for e in 0..extent {
                let row = &xv[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            let div = if mean { extent as f64 } else { 1.0 };
            for (dst, &a) in out[o * inner..(o + 1) * inner].iter_mut().zip(&acc) {
                *dst = (a / div) as f32;
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(shape, out),
            Op::SumAxis {
                x,
                outer,
                extent,
                inner,
                mean,
            },
            rg,
        ))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::SumAll { x, mean: false }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.data(x);
        let s: f64 = xv.iter().map(|&v| v as f64).sum::<f64>() / xv.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s as f32), Op::SumAll { x, mean: true }, rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", &s0, &[axis]));
        }
        let mut extents = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len() || s[..axis] != s0[..axis] || s[axis + 1..] != s0[axis + 1..] {
                return Err(Error::shape("concat", &s0, s));
            }
            extents.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in inputs.iter().zip(&extents) {
                out.extend_from_slice(&self.data(v)[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.rg(inputs);
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            outer,
            inner,
            extents,
        };
        Ok(self.push(tensor(shape, out), op, rg))
    }

    /// Inverted dropout; identity when `rate == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.data(x).len())
            .map(|_| {
                if rng.random::<f32>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = tensor(self.shape(x).to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Dropout { x, mask }, rg))
    }

    /// Divides each last-axis row by its L2 norm (floored at `1e-12`).
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s
            .last()
            .ok_or_else(|| Error::shape("l2_normalize", &s, &[]))?;
        let mut data = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(data.len() / cols.max(1));
        for row in data.chunks_exact_mut(cols) {
            let n = row
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for v in row.iter_mut() {
                *v = (*v as f64 / n) as f32;
            }
            norms.push(n as f32);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(tensor(s, data), Op::L2NormalizeLast { x, norms, cols }, rg))
    }

    /// Frobenius (flattened L2) norm as a scalar.
    pub fn norm(&mut self, x: Var) -> Var {
        let n = self
            .data(x)
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(n as f32), Op::FrobNorm(x), rg)
    }

    /// Mean softmax cross-entropy of `logits: (N, K)` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {bad} >= {k} classes"),
            ));
        }
        let mut probs = vec![0.0f32; s[0] * k];
        let mut total = 0.0f64;
        for (r, row) in self.data(logits).chunks_exact(k).enumerate() {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[labels[r]] as f64;
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = ((v as f64 - lse).exp()) as f32;
            }
        }
        let loss = Tensor::scalar((total / labels.len() as f64) as f32);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            k,
        };
        Ok(self.push(loss, op, rg))
    }

    /// Keeps `len` entries of the last axis starting at `start`.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s
            .last()
            .ok_or_else(|| Error::shape("narrow_last", &s, &[]))?;
        if start + len > cols {
            return Err(Error::shape("narrow_last", &s, &[start, len]));
        }
        let data = self
            .data(x)
            .chunks_exact(cols)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(shape, data),
            Op::NarrowLast {
                x,
                start,
                len,
                cols,
            },
            rg,
        ))
    }

    /// Repeats every last-axis entry `times` times in place (nearest-neighbor
    /// upsampling).
    pub fn repeat_interleave_last(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let cols = *s
            .last()
            .ok_or_else(|| Error::shape("repeat_interleave_last", &s, &[]))?;
        if times == 0 {
            return Err(Error::invalid(
                "repeat_interleave_last",
                "times must be positive",
            ));
        }
        let data = self
            .data(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = cols * times;
        let rg = self.rg(&[x]);
        Ok(self.push(
            tensor(shape, data),
            Op::RepeatInterleaveLast { x, times, cols },
            rg,
        ))
    }
}
