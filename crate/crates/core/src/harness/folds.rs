//! Leave-one-subject-out fold plans.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::signal::{Label, Window};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub test_subject: String,
    /// One HC and one PD subject, in that order.
    pub val_subjects: [String; 2],
    pub train_subjects: Vec<String>,
}

impl FoldPlan {
    pub fn role(&self, subject: &str) -> Option<Role> {
        if self.test_subject == subject {
            Some(Role::Test)
        } else if self.val_subjects.iter().any(|s| s == subject) {
            Some(Role::Val)
        } else if self.train_subjects.iter().any(|s| s == subject) {
            Some(Role::Train)
        } else {
            None
        }
    }

    /// Windows of `windows` assigned to `role`, in input order.
    pub fn select<'a>(&self, windows: &'a [Window], role: Role) -> Vec<&'a Window> {
        windows
            .iter()
            .filter(|w| self.role(&w.subject_id) == Some(role))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Distinct `(subject, label)` pairs in order of first appearance.
pub fn subjects_of(windows: &[Window]) -> Result<Vec<(String, Label)>> {
    let mut out: Vec<(String, Label)> = Vec::new();
    for w in windows {
        match out.iter().find(|(s, _)| *s == w.subject_id) {
            Some((_, l)) if *l != w.label => {
                return Err(Error::Subject {
                    subject: w.subject_id.clone(),
                    msg: "windows carry both labels".into(),
                })
            }
            Some(_) => {}
            None => out.push((w.subject_id.clone(), w.label)),
        }
    }
    Ok(out)
}

/// One fold per subject. The validation pair is drawn uniformly from the
/// remaining subjects of each class with a stream keyed by `(seed, test)`.
pub fn make_folds(subjects: &[(String, Label)], seed: u64) -> Result<Vec<FoldPlan>> {
    let ids: BTreeSet<&str> = subjects.iter().map(|(s, _)| s.as_str()).collect();
    if ids.len() != subjects.len() {
        return Err(Error::Fold("duplicate subject ids".into()));
    }
    for class in [Label::Hc, Label::Pd] {
        let n = subjects.iter().filter(|(_, l)| *l == class).count();
        if n < 2 {
            return Err(Error::Fold(format!(
                "{class} has {n} subject(s); at least 2 are needed for a validation pair"
            )));
        }
    }
    Ok(subjects
        .iter()
        .map(|(test, _)| {
            let mut rng = derive_rng(seed, &["folds", test]);
            let mut pick = |class: Label| -> String {
                let pool: Vec<&String> = subjects
                    .iter()
                    .filter(|(s, l)| *l == class && s != test)
                    .map(|(s, _)| s)
                    .collect();
                (*pool.choose(&mut rng).expect("class has another subject")).clone()
            };
            let val = [pick(Label::Hc), pick(Label::Pd)];
            let train = subjects
                .iter()
                .map(|(s, _)| s)
                .filter(|s| *s != test && !val.contains(s))
                .cloned()
                .collect();
            FoldPlan {
                test_subject: test.clone(),
                val_subjects: val,
                train_subjects: train,
            }
        })
        .collect())
}
