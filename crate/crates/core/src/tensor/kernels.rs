//! Inner loops shared by forward and adjoint passes. All contractions keep an
//! `f64` accumulator row and write back to `f32` once.

/// `out = a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += av * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    out
}

/// Transpose of a row-major `rows×cols` matrix.
pub(crate) fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `a^T · b` for `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    gemm(&transpose(a, k, m), b, m, k, n)
}

/// `a · b^T` for `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    gemm(a, &transpose(b, n, k), m, k, n)
}

pub(crate) fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Splits `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Causal depthwise convolution of one sequence:
/// `y[t] = sum_{tau <= t} k[tau] * x[t - tau]`. Cost O(L * len(k)).
pub(crate) fn causal_conv(x: &[f32], k: &[f32], acc: &mut [f64], y: &mut [f32]) {
    let l = x.len();
    acc.fill(0.0);
    for (tau, &kv) in k.iter().enumerate().take(l) {
        if kv == 0.0 {
            continue;
        }
        let kv = kv as f64;
        for (a, &xv) in acc[tau..].iter_mut().zip(&x[..l - tau]) {
            *a += kv * xv as f64;
        }
    }
    for (o, &a) in y.iter_mut().zip(acc.iter()) {
        *o = a as f32;
    }
}

/// Standard normal CDF.
pub(crate) fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
