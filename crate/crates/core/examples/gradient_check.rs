//! Checks tape gradients of a small attention-style expression against
//! central differences.
//!
//! cargo run --example gradient_check

use eeg_gsl::error::Result;
use eeg_gsl::tensor::{grad_check, Tensor};

fn main() -> Result<()> {
    let x = Tensor::from_fn([3, 4], |i| (i as f32 * 0.37).sin());
    let report = grad_check(
        |t, x| {
            let xt = t.transpose(x)?;
            let scores = t.matmul(x, xt)?;
            let attn = t.softmax(scores)?;
            let y = t.matmul(attn, x)?;
            let g = t.gelu(y);
            Ok(t.mean(g))
        },
        &x,
        1e-3,
    )?;
    println!(
        "max relative error {:.2e} at coordinate {} (analytic {:.6}, numeric {:.6})",
        report.max_rel_error, report.worst_index, report.analytic, report.numeric
    );
    Ok(())
}
