//! Builds the subject-wise fold plans of a 31-subject cohort, audits them, and
//! shows what the audit reports for a plan with the test subject leaked into
//! training and for a sample-wise split.
//!
//! cargo run --example leakage_audit

use eeg_gsl::error::Result;
use eeg_gsl::harness::{leakage_audit, make_folds, sample_folds, Split};
use eeg_gsl::signal::{Label, Window};
use eeg_gsl::tensor::Tensor;

fn main() -> Result<()> {
    let subjects: Vec<(String, Label)> = (0..16)
        .map(|i| (format!("HC{i:02}"), Label::Hc))
        .chain((0..15).map(|i| (format!("PD{i:02}"), Label::Pd)))
        .collect();
    let plans = make_folds(&subjects, 0)?;
    let clean = plans
        .iter()
        .filter(|p| leakage_audit(&Split::Subject((*p).clone()), &[]).is_clean())
        .count();
    println!("{} folds, {clean} clean", plans.len());

    let mut bad = plans[3].clone();
    bad.train_subjects.push(bad.test_subject.clone());
    for v in leakage_audit(&Split::Subject(bad), &[]).violations {
        println!("violation: {} [{}] {}", v.subject, v.source, v.detail);
    }

    let windows: Vec<Window> = subjects
        .iter()
        .flat_map(|(s, l)| {
            (0..4).map(move |i| Window {
                subject_id: s.clone(),
                label: *l,
                window_index: i,
                samples: Tensor::zeros([2, 8]),
            })
        })
        .collect();
    let split = sample_folds(&windows, 5, 0)?.remove(0);
    for w in leakage_audit(&Split::Sample(split), &[]).warnings {
        println!("warning: {w}");
    }
    Ok(())
}
