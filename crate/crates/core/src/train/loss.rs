//! NT-Xent (InfoNCE) loss over paired views.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const SELF_MASK: f32 = -1e9;

/// Mean over all `2N` anchors of
/// `−log(exp(sim(a, p)/τ) / Σ_{k ≠ a} exp(sim(a, k)/τ))` with cosine `sim`.
/// Rows `i` and `i + N` of `z: (2N, d)` are the two views of source `i`.
pub fn info_nce(tape: &mut Tape, z: Var, temperature: f32) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 2 || s[0] % 2 != 0 {
        return Err(Error::shape("info_nce", &s, &[0, 0]));
    }
    let n = s[0] / 2;
    if n < 2 {
        return Err(Error::invalid(
            "info_nce",
            format!("need at least 2 pairs for negatives, got {n}"),
        ));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(
            "info_nce",
            format!("temperature {temperature} must be positive"),
        ));
    }
    let zn = tape.l2_normalize(z)?;
    let zt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, zt)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let mask = tape.constant(Tensor::from_fn([2 * n, 2 * n], |i| {
        if i / (2 * n) == i % (2 * n) {
            SELF_MASK
        } else {
            0.0
        }
    }));
    let masked = tape.add(logits, mask)?;
    let targets: Vec<usize> = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
    tape.cross_entropy(masked, &targets)
}
