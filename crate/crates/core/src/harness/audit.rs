//! Leakage checks on split plans, batch logs and window normalization.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Role, Split};
use crate::error::{Error, Result};
use crate::signal::Window;
use crate::train::SeenWindows;

/// Tolerance on per-channel mean and standard deviation of a standardized window.
pub const NORMALIZATION_TOL: f64 = 1e-3;

pub const SAMPLE_WISE_WARNING: &str =
    "sample-wise split: windows of every test subject are also used for training, so results are not subject-generalizable";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub subject: String,
    pub window_index: Option<usize>,
    /// Where the offending use was found (`plan`, `train`, `pretrain`, `normalization`).
    pub source: String,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.violations.extend(other.violations);
        for w in other.warnings {
            if !self.warnings.contains(&w) {
                self.warnings.push(w);
            }
        }
    }

    /// `Err` listing every offending subject and window.
    pub fn into_result(self) -> Result<AuditReport> {
        if self.is_clean() {
            return Ok(self);
        }
        let listed: Vec<String> = self
            .violations
            .iter()
            .map(|v| match v.window_index {
                Some(i) => format!("{}#{} ({}: {})", v.subject, i, v.source, v.detail),
                None => format!("{} ({}: {})", v.subject, v.source, v.detail),
            })
            .collect();
        Err(Error::Leakage(listed.join("; ")))
    }
}

/// A named log of windows that entered gradient steps.
#[derive(Clone, Copy, Debug)]
pub struct BatchLog<'a> {
    pub phase: &'a str,
    pub seen: &'a SeenWindows,
}

fn plan_violations(plan: &super::FoldPlan) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |subject: &str, detail: &str| {
        out.push(Violation {
            subject: subject.to_string(),
            window_index: None,
            source: "plan".into(),
            detail: detail.to_string(),
        })
    };
    let test = plan.test_subject.as_str();
    if plan.train_subjects.iter().any(|s| s == test) {
        flag(test, "test subject listed for training");
    }
    if plan.val_subjects.iter().any(|s| s == test) {
        flag(test, "test subject listed for validation");
    }
    for v in &plan.val_subjects {
        if plan.train_subjects.contains(v) {
            flag(v, "validation subject listed for training");
        }
    }
    if plan.val_subjects[0] == plan.val_subjects[1] {
        flag(&plan.val_subjects[0], "validation pair repeats one subject");
    }
    let mut seen = BTreeSet::new();
    for s in &plan.train_subjects {
        if !seen.insert(s) {
            flag(s, "training subject listed twice");
        }
    }
    out
}

/// Checks a split against the batch logs of a run: no test window (and, for
/// subject-wise splits, no window of the test subject) may appear in any log.
pub fn leakage_audit(split: &Split, logs: &[BatchLog<'_>]) -> AuditReport {
    let mut report = AuditReport::default();
    match split {
        Split::Subject(plan) => {
            report.violations.extend(plan_violations(plan));
            for log in logs {
                for (subject, idx) in log.seen.iter().filter(|(s, _)| *s == plan.test_subject) {
                    report.violations.push(Violation {
                        subject: subject.clone(),
                        window_index: Some(*idx),
                        source: log.phase.to_string(),
                        detail: "test-subject window entered a gradient step".into(),
                    });
                }
            }
        }
        Split::Sample(s) => {
            report.warnings.push(SAMPLE_WISE_WARNING.to_string());
            for log in logs {
                for key in log.seen.intersection(&s.test) {
                    report.violations.push(Violation {
                        subject: key.0.clone(),
                        window_index: Some(key.1),
                        source: log.phase.to_string(),
                        detail: "test window entered a gradient step".into(),
                    });
                }
            }
        }
    }
    report
}

/// Every channel of every window must have zero mean and unit variance on its
/// own, which holds only when the statistics were taken per window.
pub fn normalization_audit(windows: &[Window]) -> AuditReport {
    let mut report = AuditReport::default();
    for w in windows {
        for c in 0..w.n_channels() {
            let x = w.channel(c);
            let n = x.len() as f64;
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
            let sd = (x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            let flat = x.iter().all(|&v| v == 0.0);
            if mean.abs() > NORMALIZATION_TOL || (!flat && (sd - 1.0).abs() > NORMALIZATION_TOL) {
                report.violations.push(Violation {
                    subject: w.subject_id.clone(),
                    window_index: Some(w.window_index),
                    source: "normalization".into(),
                    detail: format!("channel {c} has mean {mean:.3e} and std {sd:.6}"),
                });
                break;
            }
        }
    }
    report
}

/// Roles of every window under `split`, for callers that build batch logs.
pub fn windows_in_role(split: &Split, windows: &[Window], role: Role) -> SeenWindows {
    windows
        .iter()
        .filter(|w| split.role(w) == Some(role))
        .map(|w| (w.subject_id.clone(), w.window_index))
        .collect()
}
