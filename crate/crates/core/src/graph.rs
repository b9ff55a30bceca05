//! Multi-head graph structure learning, Chebyshev graph convolution and the
//! classification head.
//!
//! All functions work on batches: node features `(B, C, d_m)`, adjacencies
//! `(B, C, C)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform_init, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PREFIX: &str = "gsl.";
pub const CLASSIFIER_PREFIX: &str = "classifier.";
pub const N_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GslConfig {
    pub heads: usize,
    /// Key/query width; `None` means `d_m / heads`.
    pub d_k: Option<usize>,
    pub cheb_k: usize,
    pub dropout: f32,
}

impl Default for GslConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            d_k: None,
            cheb_k: 5,
            dropout: 0.2,
        }
    }
}

impl GslConfig {
    pub fn validate(&self, d_m: usize) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("gsl: heads must be >= 1".into()));
        }
        if self.cheb_k == 0 {
            return Err(Error::Config("gsl: cheb_k must be >= 1".into()));
        }
        if self.d_k(d_m) == 0 {
            return Err(Error::Config(format!(
                "gsl: d_k resolves to 0 (d_m {d_m}, {} heads)",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "gsl: dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn d_k(&self, d_m: usize) -> usize {
        self.d_k.unwrap_or(d_m / self.heads.max(1))
    }
}

pub fn wq_name(h: usize) -> String {
    format!("{PREFIX}head{h}.wq")
}

pub fn wk_name(h: usize) -> String {
    format!("{PREFIX}head{h}.wk")
}

pub fn theta_name(h: usize, k: usize) -> String {
    format!("{PREFIX}cheb{h}.theta{k}")
}

pub fn cheb_bias_name(h: usize) -> String {
    format!("{PREFIX}cheb{h}.bias")
}

/// Attention projections for `heads` heads.
pub fn init_mhgsl<R: Rng + ?Sized>(cfg: &GslConfig, d_m: usize, rng: &mut R) -> ParamStore {
    let d_k = cfg.d_k(d_m);
    let mut ps = ParamStore::new();
    for h in 0..cfg.heads {
        ps.insert(wq_name(h), uniform_init(&[d_m, d_k], d_m, rng));
        ps.insert(wk_name(h), uniform_init(&[d_m, d_k], d_m, rng));
    }
    ps
}

/// Chebyshev weights for `branches` graph branches plus the fusion projection.
pub fn init_cheb_and_fusion<R: Rng + ?Sized>(
    cfg: &GslConfig,
    d_m: usize,
    branches: usize,
    rng: &mut R,
) -> ParamStore {
    let mut ps = ParamStore::new();
    for h in 0..branches {
        for k in 0..cfg.cheb_k {
            ps.insert(
                theta_name(h, k),
                uniform_init(&[d_m, d_m], d_m * cfg.cheb_k, rng),
            );
        }
        ps.insert(cheb_bias_name(h), Tensor::zeros([d_m]));
    }
    ps.insert(
        format!("{PREFIX}fuse.w"),
        uniform_init(&[branches * d_m, d_m], branches * d_m, rng),
    );
    ps.insert(format!("{PREFIX}fuse.b"), Tensor::zeros([d_m]));
    ps
}

pub fn init_classifier<R: Rng + ?Sized>(d_m: usize, rng: &mut R) -> ParamStore {
    let mut ps = ParamStore::new();
    ps.insert(
        format!("{CLASSIFIER_PREFIX}w"),
        uniform_init(&[d_m, N_CLASSES], d_m, rng),
    );
    ps.insert(format!("{CLASSIFIER_PREFIX}b"), Tensor::zeros([N_CLASSES]));
    ps
}

/// `(B, C, d_in) · (d_in, d_out) -> (B, C, d_out)`.
fn linear3(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let d_out = tape.shape(w)[1];
    let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
    let y = tape.matmul(flat, w)?;
    tape.reshape(y, &[s[0], s[1], d_out])
}

/// Per-head adjacency `A_h = softmax(Q_h K_hᵀ / sqrt(d_K))` with
/// `Q_h = X W_qh`, `K_h = X W_kh`.
pub fn mhgsl(tape: &mut Tape, ps: &ParamStore, cfg: &GslConfig, x: Var) -> Result<Vec<Var>> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("mhgsl", &s, &[0, 0, 0]));
    }
    let mut graphs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = ps.bind(tape, &wq_name(h))?;
        let wk = ps.bind(tape, &wk_name(h))?;
        let d_k = tape.shape(wq)[1];
        let q = linear3(tape, x, wq)?;
        let k = linear3(tape, x, wk)?;
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (d_k as f32).sqrt());
        graphs.push(tape.softmax(scaled)?);
    }
    Ok(graphs)
}

/// Scaled normalized Laplacian of the symmetrized adjacency with
/// `λ_max = 2`: `L̃ = L − I = −D^{-1/2} A_sym D^{-1/2}`.
pub fn scaled_laplacian(tape: &mut Tape, a: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    let [b, c, c2] = s[..] else {
        return Err(Error::shape("scaled_laplacian", &s, &[0, 0, 0]));
    };
    if c != c2 {
        return Err(Error::shape("scaled_laplacian", &s, &[b, c, c]));
    }
    let at = tape.transpose(a)?;
    let sum = tape.add(a, at)?;
    let sym = tape.scale(sum, 0.5);
    let deg = tape.sum_axis(sym, 2)?;
    if let Some(i) = tape.data(deg).iter().position(|&d| !(d > 0.0)) {
        return Err(Error::invalid(
            "scaled_laplacian",
            format!("node {} of sample {} has non-positive degree", i % c, i / c),
        ));
    }
    let inv_sqrt = tape.powf(deg, -0.5);
    let col = tape.reshape(inv_sqrt, &[b, c, 1])?;
    let row = tape.reshape(inv_sqrt, &[b, 1, c])?;
    let outer = tape.bmm(col, row)?;
    let norm = tape.mul(sym, outer)?;
    Ok(tape.scale(norm, -1.0))
}

/// `Σ_k T_k(L̃) X Θ_k + bias` for one graph branch, followed by dropout when
/// `rng` is given.
#[allow(clippy::too_many_arguments)]
pub fn cheb_conv<R: Rng + ?Sized>(
    tape: &mut Tape,
    ps: &ParamStore,
    branch: usize,
    x: Var,
    lap: Var,
    k: usize,
    dropout: f32,
    rng: Option<&mut R>,
) -> Result<Var> {
    if k == 0 {
        return Err(Error::invalid("cheb_conv", "K must be >= 1"));
    }
    let mut terms = Vec::with_capacity(k);
    terms.push(x);
    if k > 1 {
        terms.push(tape.bmm(lap, x)?);
    }
    for i in 2..k {
        let lt = tape.bmm(lap, terms[i - 1])?;
        let twice = tape.scale(lt, 2.0);
        terms.push(tape.sub(twice, terms[i - 2])?);
    }
    let mut out: Option<Var> = None;
    for (i, &t) in terms.iter().enumerate() {
        let theta = ps.bind(tape, &theta_name(branch, i))?;
        let y = linear3(tape, t, theta)?;
        out = Some(match out {
            None => y,
            Some(acc) => tape.add(acc, y)?,
        });
    }
    let bias = ps.bind(tape, &cheb_bias_name(branch))?;
    let y = tape.add_broadcast(out.expect("k >= 1"), bias)?;
    match rng {
        Some(rng) => tape.dropout(y, dropout, rng),
        None => Ok(y),
    }
}

/// Concatenates branch outputs, projects back to `d_m`, adds the residual
/// node features and mean-pools over electrodes: `(B, d_m)`.
pub fn fuse(tape: &mut Tape, ps: &ParamStore, x: Var, branches: &[Var]) -> Result<Var> {
    let cat = tape.concat(branches, 2)?;
    let w = ps.bind(tape, &format!("{PREFIX}fuse.w"))?;
    let b = ps.bind(tape, &format!("{PREFIX}fuse.b"))?;
    let proj = linear3(tape, cat, w)?;
    let proj = tape.add_broadcast(proj, b)?;
    let res = tape.add(proj, x)?;
    tape.mean_axis(res, 1)
}

/// Linear layer from the pooled vector `(B, d_m)` to class logits `(B, 2)`.
pub fn classify(tape: &mut Tape, ps: &ParamStore, pooled: Var) -> Result<Var> {
    let w = ps.bind(tape, &format!("{CLASSIFIER_PREFIX}w"))?;
    let b = ps.bind(tape, &format!("{CLASSIFIER_PREFIX}b"))?;
    let y = tape.matmul(pooled, w)?;
    tape.add_broadcast(y, b)
}

/// Pooled representation and logits.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    pub pooled: Var,
    pub logits: Var,
}

/// Chebyshev branch per adjacency, fusion and classification.
pub fn fuse_and_classify<R: Rng + ?Sized>(
    tape: &mut Tape,
    ps: &ParamStore,
    cfg: &GslConfig,
    x: Var,
    adjacency: &[Var],
    mut rng: Option<&mut R>,
) -> Result<FusedFeatures> {
    let mut outs = Vec::with_capacity(adjacency.len());
    for (h, &a) in adjacency.iter().enumerate() {
        let lap = scaled_laplacian(tape, a)?;
        outs.push(cheb_conv(
            tape,
            ps,
            h,
            x,
            lap,
            cfg.cheb_k,
            cfg.dropout,
            rng.as_deref_mut(),
        )?);
    }
    let pooled = fuse(tape, ps, x, &outs)?;
    let logits = classify(tape, ps, pooled)?;
    Ok(FusedFeatures { pooled, logits })
}

/// Plain-tensor view of one sample's graph from a batched adjacency.
pub fn sample_matrix(a: &Tensor, b: usize) -> Vec<Vec<f32>> {
    let c = a.shape()[1];
    a.data()[b * c * c..(b + 1) * c * c]
        .chunks_exact(c)
        .map(<[f32]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check_with_eps;

    type NoRng = ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
    }

    fn mat(t: &[f32], rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, &t.iter().map(|&v| v as f64).collect::<Vec<_>>())
    }

    /// Row-softmax of `Q Kᵀ / sqrt(d_k)` in f64, straight from the definition.
    fn attention_oracle(x: &DMatrix<f64>, wq: &DMatrix<f64>, wk: &DMatrix<f64>) -> DMatrix<f64> {
        let q = x * wq;
        let k = x * wk;
        let s = q * k.transpose() / (wq.ncols() as f64).sqrt();
        let mut a = s.clone();
        for i in 0..s.nrows() {
            let m = s.row(i).max();
            let z: f64 = s.row(i).iter().map(|v| (v - m).exp()).sum();
            for j in 0..s.ncols() {
                a[(i, j)] = (s[(i, j)] - m).exp() / z;
            }
        }
        a
    }

    fn laplacian_oracle(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let sym = (a + a.transpose()) / 2.0;
        let d: Vec<f64> = (0..n).map(|i| sym.row(i).sum()).collect();
        let mut l = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                l[(i, j)] -= sym[(i, j)] / (d[i] * d[j]).sqrt();
            }
        }
        l - DMatrix::identity(n, n)
    }

    fn cheb_oracle(x: &DMatrix<f64>, lap: &DMatrix<f64>, thetas: &[DMatrix<f64>]) -> DMatrix<f64> {
        let n = lap.nrows();
        let mut polys = vec![DMatrix::identity(n, n)];
        if thetas.len() > 1 {
            polys.push(lap.clone());
        }
        for k in 2..thetas.len() {
            let next = 2.0 * lap * &polys[k - 1] - &polys[k - 2];
            polys.push(next);
        }
        let mut out = DMatrix::zeros(x.nrows(), thetas[0].ncols());
        for (t, th) in polys.iter().zip(thetas) {
            out += t * x * th;
        }
        out
    }

    fn full_params(cfg: &GslConfig, d_m: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = init_mhgsl(cfg, d_m, &mut rng);
        ps.extend(init_cheb_and_fusion(cfg, d_m, cfg.heads, &mut rng));
        ps.extend(init_classifier(d_m, &mut rng));
        for (name, t) in ps.clone().params() {
            if name.ends_with("bias") || name.ends_with(".b") {
                let mut r = random(t.shape(), &mut rng);
                r.data_mut().iter_mut().for_each(|v| *v *= 0.3);
                *ps.get_mut(name).unwrap() = r.with_requires_grad(true);
            }
        }
        ps
    }

    #[test]
    fn zero_features_give_uniform_graphs() {
        let cfg = GslConfig::default();
        let ps = init_mhgsl(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 5, 8]));
        for a in mhgsl(&mut tape, &ps, &cfg, x).unwrap() {
            assert!(tape.data(a).iter().all(|&v| (v - 0.2).abs() < 1e-7));
        }
    }

    #[test]
    fn saturated_scores_give_identity() {
        let cfg = GslConfig {
            heads: 1,
            d_k: Some(3),
            ..GslConfig::default()
        };
        let mut ps = ParamStore::new();
        // X = I, W_q = 10·sqrt(3)·I, W_k = I  =>  Q Kᵀ / sqrt(3) = 10·I
        ps.insert(
            wq_name(0),
            Tensor::from_fn(
                [3, 3],
                |i| if i % 4 == 0 { 10.0 * 3f32.sqrt() } else { 0.0 },
            ),
        );
        ps.insert(wk_name(0), Tensor::eye(3));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::eye(3).reshape([1, 3, 3]).unwrap());
        let a = mhgsl(&mut tape, &ps, &cfg, x).unwrap()[0];
        let eye = Tensor::eye(3).reshape([1, 3, 3]).unwrap();
        assert!(tape.value(a).max_abs_diff(&eye) < 1e-3);
    }

    #[test]
    fn attention_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..100 {
            let c = rng.random_range(2..=8);
            let d_m = rng.random_range(2..=8);
            let cfg = GslConfig {
                heads: 2,
                d_k: Some(rng.random_range(1..=4)),
                ..GslConfig::default()
            };
            let ps = init_mhgsl(&cfg, d_m, &mut rng);
            let xt = random(&[1, c, d_m], &mut rng);
            let mut tape = Tape::new();
            let x = tape.constant(xt.clone());
            let graphs = mhgsl(&mut tape, &ps, &cfg, x).unwrap();
            for (h, &a) in graphs.iter().enumerate() {
                let wq = ps.get(&wq_name(h)).unwrap();
                let wk = ps.get(&wk_name(h)).unwrap();
                let d_k = wq.shape()[1];
                let oracle = attention_oracle(
                    &mat(xt.data(), c, d_m),
                    &mat(wq.data(), d_m, d_k),
                    &mat(wk.data(), d_m, d_k),
                );
                for (i, &v) in tape.data(a).iter().enumerate() {
                    assert!(
                        (v as f64 - oracle[(i / c, i % c)]).abs() < 1e-6,
                        "trial {trial}"
                    );
                }
                for row in tape.data(a).chunks(c) {
                    assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn softmax_shift_invariance_of_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores = random(&[1, 4, 4], &mut rng);
        let mut shifted = scores.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            *v += [3.0, -2.0, 0.5, 7.0][i / 4];
        }
        let mut tape = Tape::new();
        let a = tape.constant(scores);
        let b = tape.constant(shifted);
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-6);
    }

    fn laplacian(a: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(a.clone());
        let l = scaled_laplacian(&mut tape, v)?;
        Ok(tape.value(l).clone())
    }

    #[test]
    fn laplacian_of_uniform_graph() {
        let c = 5;
        let l = laplacian(&Tensor::full([1, c, c], 1.0 / c as f32)).unwrap();
        let eig = mat(l.data(), c, c).symmetric_eigen().eigenvalues;
        let mut ev: Vec<f64> = eig.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!((ev[0] + 1.0).abs() < 1e-6);
        assert!(ev[1..].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn laplacian_of_self_loops_is_minus_identity() {
        let l = laplacian(&Tensor::eye(4).reshape([1, 4, 4]).unwrap()).unwrap();
        assert!(
            l.max_abs_diff(&Tensor::from_fn([1, 4, 4], |i| if i % 5 == 0 {
                -1.0
            } else {
                0.0
            })) < 1e-7
        );
    }

    #[test]
    fn laplacian_rejects_isolated_nodes() {
        let mut a = Tensor::eye(3).reshape([1, 3, 3]).unwrap();
        a.data_mut()[4] = 0.0;
        assert!(laplacian(&a).is_err());
    }

    #[test]
    fn laplacian_spectrum_and_symmetry_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let c = rng.random_range(2..=8);
            let mut a = Tensor::from_fn([1, c, c], |_| rng.random_range(0.0f32..1.0));
            for row in a.data_mut().chunks_mut(c) {
                let s: f32 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            let l = laplacian(&a).unwrap();
            let m = mat(l.data(), c, c);
            assert!((&m - m.transpose()).abs().max() < 1e-6);
            let oracle = laplacian_oracle(&mat(a.data(), c, c));
            assert!((&m - oracle).abs().max() < 1e-5);
            for ev in m.symmetric_eigen().eigenvalues.iter() {
                assert!((-1.0 - 1e-4..=1.0 + 1e-4).contains(ev), "{ev}");
            }
        }
    }

    fn cheb(ps: &ParamStore, x: &Tensor, lap: &Tensor, k: usize) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let lv = tape.constant(lap.clone());
        let y = cheb_conv::<NoRng>(&mut tape, ps, 0, xv, lv, k, 0.0, None).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn cheb_order_one_is_feature_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = GslConfig {
            cheb_k: 1,
            ..GslConfig::default()
        };
        let ps = init_cheb_and_fusion(&cfg, 3, 1, &mut rng);
        let x = random(&[1, 4, 3], &mut rng);
        let lap = random(&[1, 4, 4], &mut rng);
        let y = cheb(&ps, &x, &lap, 1);
        let expect = mat(x.data(), 4, 3) * mat(ps.get(&theta_name(0, 0)).unwrap().data(), 3, 3);
        for (i, &v) in y.data().iter().enumerate() {
            assert!((v as f64 - expect[(i / 3, i % 3)]).abs() < 1e-6);
        }
    }

    #[test]
    fn cheb_at_zero_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = GslConfig {
            cheb_k: 3,
            ..GslConfig::default()
        };
        let ps = init_cheb_and_fusion(&cfg, 3, 1, &mut rng);
        let x = random(&[1, 4, 3], &mut rng);
        let y = cheb(&ps, &x, &Tensor::zeros([1, 4, 4]), 3);
        let th = |k| mat(ps.get(&theta_name(0, k)).unwrap().data(), 3, 3);
        let expect = mat(x.data(), 4, 3) * (th(0) - th(2));
        for (i, &v) in y.data().iter().enumerate() {
            assert!((v as f64 - expect[(i / 3, i % 3)]).abs() < 1e-6);
        }
    }

    #[test]
    fn cheb_matches_polynomial_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for k in 1..=6 {
            for c in [2usize, 4, 8] {
                let d_m = 5;
                let cfg = GslConfig {
                    cheb_k: k,
                    ..GslConfig::default()
                };
                let ps = init_cheb_and_fusion(&cfg, d_m, 1, &mut rng);
                let x = random(&[1, c, d_m], &mut rng);
                let mut a = Tensor::from_fn([1, c, c], |_| rng.random_range(0.0f32..1.0));
                for row in a.data_mut().chunks_mut(c) {
                    let s: f32 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                let lap = laplacian(&a).unwrap();
                let y = cheb(&ps, &x, &lap, k);
                let thetas: Vec<_> = (0..k)
                    .map(|i| mat(ps.get(&theta_name(0, i)).unwrap().data(), d_m, d_m))
                    .collect();
                let expect = cheb_oracle(&mat(x.data(), c, d_m), &mat(lap.data(), c, c), &thetas);
                for (i, &v) in y.data().iter().enumerate() {
                    assert!(
                        (v as f64 - expect[(i / d_m, i % d_m)]).abs() < 1e-5,
                        "K={k} C={c}"
                    );
                }
            }
        }
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros([1, 2, 2]));
        assert!(cheb_conv::<NoRng>(&mut tape, &ParamStore::new(), 0, v, v, 0, 0.0, None).is_err());
    }

    fn run_fuse(ps: &ParamStore, x: &Tensor, heads: &[Tensor]) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let hv: Vec<Var> = heads.iter().map(|h| tape.constant(h.clone())).collect();
        let pooled = fuse(&mut tape, ps, xv, &hv).unwrap();
        let logits = classify(&mut tape, ps, pooled).unwrap();
        (tape.value(pooled).clone(), tape.value(logits).clone())
    }

    #[test]
    fn identity_fusion_is_residual_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamStore::new();
        ps.insert(format!("{PREFIX}fuse.w"), Tensor::eye(3));
        ps.insert(format!("{PREFIX}fuse.b"), Tensor::zeros([3]));
        ps.extend(init_classifier(3, &mut rng));
        let x = random(&[1, 4, 3], &mut rng);
        let h = random(&[1, 4, 3], &mut rng);
        let (pooled, _) = run_fuse(&ps, &x, &[h.clone()]);
        for j in 0..3 {
            let expect: f32 = (0..4)
                .map(|c| x.data()[c * 3 + j] + h.data()[c * 3 + j])
                .sum::<f32>()
                / 4.0;
            assert!((pooled.data()[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_heads_leave_column_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = GslConfig::default();
        let mut ps = init_cheb_and_fusion(&cfg, 3, 2, &mut rng);
        ps.extend(init_classifier(3, &mut rng));
        let x = random(&[1, 4, 3], &mut rng);
        let z = Tensor::zeros([1, 4, 3]);
        let (pooled, _) = run_fuse(&ps, &x, &[z.clone(), z]);
        for j in 0..3 {
            let expect: f32 = (0..4).map(|c| x.data()[c * 3 + j]).sum::<f32>() / 4.0;
            assert!((pooled.data()[j] - expect).abs() < 1e-6);
        }
    }

    /// Whole graph head in f64 from the definitions.
    fn logits_oracle(ps: &ParamStore, cfg: &GslConfig, x: &DMatrix<f64>) -> Vec<f64> {
        let (c, d_m) = (x.nrows(), x.ncols());
        let p = |n: &str| {
            let t = ps.get(n).unwrap();
            let s = t.shape();
            if s.len() == 1 {
                mat(t.data(), 1, s[0])
            } else {
                mat(t.data(), s[0], s[1])
            }
        };
        let mut heads = Vec::new();
        for h in 0..cfg.heads {
            let a = attention_oracle(x, &p(&wq_name(h)), &p(&wk_name(h)));
            let lap = laplacian_oracle(&a);
            let thetas: Vec<_> = (0..cfg.cheb_k).map(|k| p(&theta_name(h, k))).collect();
            let mut y = cheb_oracle(x, &lap, &thetas);
            let b = p(&cheb_bias_name(h));
            for i in 0..c {
                for j in 0..d_m {
                    y[(i, j)] += b[(0, j)];
                }
            }
            heads.push(y);
        }
        let mut cat = DMatrix::zeros(c, cfg.heads * d_m);
        for (h, y) in heads.iter().enumerate() {
            cat.view_mut((0, h * d_m), (c, d_m)).copy_from(y);
        }
        let mut fused = cat * p(&format!("{PREFIX}fuse.w")) + x;
        let fb = p(&format!("{PREFIX}fuse.b"));
        for i in 0..c {
            for j in 0..d_m {
                fused[(i, j)] += fb[(0, j)];
            }
        }
        let pooled = DMatrix::from_fn(1, d_m, |_, j| fused.column(j).mean());
        let logits =
            pooled * p(&format!("{CLASSIFIER_PREFIX}w")) + p(&format!("{CLASSIFIER_PREFIX}b"));
        logits.iter().copied().collect()
    }

    fn full_logits(ps: &ParamStore, cfg: &GslConfig, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let graphs = mhgsl(&mut tape, ps, cfg, xv).unwrap();
        let out = fuse_and_classify::<NoRng>(&mut tape, ps, cfg, xv, &graphs, None).unwrap();
        tape.value(out.logits).clone()
    }

    #[test]
    fn logits_match_straight_line_oracle() {
        let cfg = GslConfig::default();
        let ps = full_params(&cfg, 8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let x = random(&[1, 4, 8], &mut rng);
            let got = full_logits(&ps, &cfg, &x);
            let expect = logits_oracle(&ps, &cfg, &mat(x.data(), 4, 8));
            for (g, e) in got.data().iter().zip(&expect) {
                assert!((*g as f64 - e).abs() < 1e-6, "{g} vs {e}");
            }
        }
    }

    #[test]
    fn head_permutation_leaves_logits_unchanged() {
        let cfg = GslConfig::default();
        let d_m = 8;
        let ps = full_params(&cfg, d_m, 11);
        let mut swapped = ps.clone();
        let pairs = [
            (wq_name(0), wq_name(1)),
            (wk_name(0), wk_name(1)),
            (cheb_bias_name(0), cheb_bias_name(1)),
        ];
        let thetas = (0..cfg.cheb_k).map(|k| (theta_name(0, k), theta_name(1, k)));
        for (a, b) in pairs.into_iter().chain(thetas) {
            *swapped.get_mut(&a).unwrap() = ps.get(&b).unwrap().clone();
            *swapped.get_mut(&b).unwrap() = ps.get(&a).unwrap().clone();
        }
        let fw = ps.get(&format!("{PREFIX}fuse.w")).unwrap();
        let rows = fw.data().chunks(d_m).collect::<Vec<_>>();
        let permuted: Vec<f32> = rows[d_m..]
            .iter()
            .chain(&rows[..d_m])
            .flat_map(|r| r.iter().copied())
            .collect();
        *swapped.get_mut(&format!("{PREFIX}fuse.w")).unwrap() =
            Tensor::new([2 * d_m, d_m], permuted).unwrap();
        let x = random(&[3, 4, d_m], &mut ChaCha8Rng::seed_from_u64(12));
        assert!(full_logits(&ps, &cfg, &x).max_abs_diff(&full_logits(&swapped, &cfg, &x)) < 1e-5);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = GslConfig::default();
        let ps = full_params(&cfg, 4, 13);
        let x = random(&[2, 3, 4], &mut ChaCha8Rng::seed_from_u64(14));
        for name in [wq_name(1), wk_name(0), theta_name(0, 2), theta_name(1, 4)] {
            let report = grad_check_with_eps(
                |tape, w| {
                    tape.bind_as(&name, w);
                    let xv = tape.constant(x.clone());
                    let graphs = mhgsl(tape, &ps, &cfg, xv)?;
                    let out = fuse_and_classify::<NoRng>(tape, &ps, &cfg, xv, &graphs, None)?;
                    tape.cross_entropy(out.logits, &[0, 1])
                },
                ps.get(&name).unwrap(),
                1e-3,
                1e-2,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-2, "{name}: {report:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(GslConfig::default().validate(64).is_ok());
        assert_eq!(GslConfig::default().d_k(64), 32);
        assert!(GslConfig {
            heads: 0,
            ..GslConfig::default()
        }
        .validate(8)
        .is_err());
        assert!(GslConfig {
            cheb_k: 0,
            ..GslConfig::default()
        }
        .validate(8)
        .is_err());
        assert!(GslConfig {
            dropout: 1.0,
            ..GslConfig::default()
        }
        .validate(8)
        .is_err());
        assert!(GslConfig {
            heads: 4,
            ..GslConfig::default()
        }
        .validate(2)
        .is_err());
    }
}
