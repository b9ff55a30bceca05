use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Floor added to the denominator of the relative error so coordinates with
/// small gradients are judged on an absolute scale. Function values are
/// float32, so a central difference at `h = 1e-3` carries roughly
/// `2^-24 * |f| / h ~ 1e-4` of rounding noise; 0.1 keeps that noise below a
/// 1e-3 relative tolerance while any real adjoint error still shows up at O(1).
pub const GRAD_CHECK_EPS: f64 = 0.1;

/// Max over coordinates of `|analytic - numeric| / (|numeric| + eps)`, with
/// `numeric` the central difference at step `h`.
///
/// `f` builds a scalar from the leaf it is handed; it is re-run on a fresh tape
/// for every perturbation, so any randomness inside must be re-seeded per call.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_with_eps(f, x, h, GRAD_CHECK_EPS)
}

pub fn grad_check_with_eps<F>(f: F, x: &Tensor, h: f64, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::invalid(
            "grad_check",
            format!("step {h} must be positive"),
        ));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.numel() != 1 {
            return Err(Error::NonScalarLoss(val.shape().to_vec()));
        }
        let y = val.item() as f64;
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check: function value".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "grad_check: analytic gradient at {i}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let plus = (orig as f64 + h) as f32;
        let minus = (orig as f64 - h) as f32;
        probe.data_mut()[i] = plus;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (plus as f64 - minus as f64);
        let a = analytic[i] as f64;
        let rel = (a - numeric).abs() / (numeric.abs() + eps);
        if rel > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}
