//! Experiment reports: per-seed rows, mean ± std aggregates, group
//! explanations, and their CSV / JSON renderings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{metrics, AuditReport, JobKey, JobResult, Metrics, Prediction};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Ablation;
use crate::signal::Label;

pub const POOLING: &str =
    "window-level predictions pooled across all folds of a seed; mean and sample std over seeds";
pub const TABLE_HEADER: [&str; 7] = [
    "Model",
    "Seeds",
    "Accuracy %",
    "AUC",
    "F1-Score",
    "Precision",
    "Recall",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent for a single seed.
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Stat { mean, std }
    }

    /// `mean±std`, or `mean` alone; both printed exactly.
    pub fn cell(&self) -> String {
        match self.std {
            Some(s) => format!("{}±{}", self.mean, s),
            None => format!("{}", self.mean),
        }
    }

    pub fn parse(cell: &str) -> Result<Stat> {
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::invalid("parse_stat", format!("'{cell}': {e}")))
        };
        Ok(match cell.split_once('±') {
            Some((m, s)) => Stat {
                mean: num(m)?,
                std: Some(num(s)?),
            },
            None => Stat {
                mean: num(cell)?,
                std: None,
            },
        })
    }

    pub fn pretty(&self, scale: f64, digits: usize) -> String {
        match self.std {
            Some(s) => format!("{:.*}±{:.*}", digits, self.mean * scale, digits, s * scale),
            None => format!("{:.*}", digits, self.mean * scale),
        }
    }
}

/// Pooled metrics of one `(ablation, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub ablation: Ablation,
    pub seed: u64,
    pub n_folds: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub ablation: Ablation,
    pub n_seeds: usize,
    /// In percent.
    pub accuracy: Stat,
    /// Absent unless every seed has an AUC.
    pub auc: Option<Stat>,
    pub f1: Stat,
    pub precision: Stat,
    pub recall: Stat,
}

/// Group-mean explanation of one `(ablation, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub ablation: Ablation,
    pub seed: u64,
    pub group: Label,
    pub n_samples: usize,
    pub channels: usize,
    /// Row-major `channels × channels`.
    pub adjacency: Vec<f32>,
}

impl GroupRow {
    pub fn matrix(&self) -> crate::tensor::Tensor {
        crate::tensor::Tensor::new([self.channels, self.channels], self.adjacency.clone())
            .expect("square")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub key: JobKey,
    pub error: String,
}

/// One line of `results.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub key: JobKey,
    pub n_windows: usize,
    pub best_epoch: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub pooling: String,
    pub rows: Vec<SeedRow>,
    pub aggregates: Vec<AggregateRow>,
    pub explanations: Vec<GroupRow>,
    pub jobs: Vec<JobSummary>,
    pub failures: Vec<JobFailure>,
    /// Some jobs failed; rows cover the completed folds only.
    pub partial: bool,
    pub audit: AuditReport,
}

impl ExperimentReport {
    pub fn assemble(
        cfg: &ExperimentConfig,
        jobs: &[JobResult],
        failures: Vec<JobFailure>,
        audit: AuditReport,
    ) -> Result<Self> {
        let mut by_run: BTreeMap<(usize, u64), Vec<&JobResult>> = BTreeMap::new();
        for j in jobs {
            let ai = cfg
                .harness
                .ablations
                .iter()
                .position(|a| *a == j.key.ablation)
                .unwrap_or(usize::MAX);
            by_run.entry((ai, j.key.seed)).or_default().push(j);
        }
        let mut rows = Vec::new();
        let mut explanations = Vec::new();
        let mut summaries = Vec::new();
        for (_, mut js) in by_run {
            js.sort_by_key(|j| j.key.fold);
            let pooled: Vec<Prediction> = js
                .iter()
                .flat_map(|j| j.predictions.iter().cloned())
                .collect();
            let (ablation, seed) = (js[0].key.ablation, js[0].key.seed);
            rows.push(SeedRow {
                ablation,
                seed,
                n_folds: js.len(),
                metrics: metrics(&pooled)?,
            });
            for j in &js {
                summaries.push(JobSummary {
                    key: j.key.clone(),
                    n_windows: j.predictions.len(),
                    best_epoch: j.best_epoch,
                    metrics: metrics(&j.predictions)?,
                });
            }
            for group in [Label::Hc, Label::Pd] {
                let parts: Vec<_> = js
                    .iter()
                    .flat_map(|j| j.groups.iter().filter(|g| g.group == group))
                    .collect();
                let n: usize = parts.iter().map(|g| g.n).sum();
                if n == 0 {
                    continue;
                }
                let len = parts[0].sum.len();
                let mut acc = vec![0.0f64; len];
                for g in &parts {
                    for (a, v) in acc.iter_mut().zip(&g.sum) {
                        *a += v;
                    }
                }
                explanations.push(GroupRow {
                    ablation,
                    seed,
                    group,
                    n_samples: n,
                    channels: (len as f64).sqrt().round() as usize,
                    adjacency: acc.iter().map(|v| (v / n as f64) as f32).collect(),
                });
            }
        }
        let aggregates = aggregate(&cfg.harness.ablations, &rows);
        Ok(ExperimentReport {
            config: cfg.clone(),
            pooling: POOLING.into(),
            rows,
            aggregates,
            explanations,
            jobs: summaries,
            partial: !failures.is_empty(),
            failures,
            audit,
        })
    }

    /// `report.json`, `table1.csv`, `results.jsonl` and one prediction
    /// file per `(ablation, seed)` under `dir`.
    pub fn write(&self, dir: &Path, jobs: &[JobResult]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        write_table_csv(&dir.join("table1.csv"), &self.aggregates)?;
        let path = dir.join("results.jsonl");
        let mut buf = Vec::new();
        for j in &self.jobs {
            serde_json::to_writer(&mut buf, j)?;
            buf.push(b'\n');
        }
        std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        let pred_dir = dir.join("predictions");
        std::fs::create_dir_all(&pred_dir).map_err(|e| Error::io(&pred_dir, e))?;
        let mut grouped: BTreeMap<(Ablation, u64), Vec<&Prediction>> = BTreeMap::new();
        for j in jobs {
            grouped
                .entry((j.key.ablation, j.key.seed))
                .or_default()
                .extend(&j.predictions);
        }
        for ((ablation, seed), preds) in grouped {
            let path = pred_dir.join(format!("{}_seed{seed}.csv", ablation.name()));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["subject", "window", "truth", "predicted", "pd_score"])?;
            for p in preds {
                w.write_record([
                    p.subject_id.clone(),
                    p.window_index.to_string(),
                    p.truth.to_string(),
                    p.predicted.to_string(),
                    p.score.to_string(),
                ])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn row(&self, ablation: Ablation, seed: u64) -> Option<&SeedRow> {
        self.rows
            .iter()
            .find(|r| r.ablation == ablation && r.seed == seed)
    }

    pub fn aggregate(&self, ablation: Ablation) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|r| r.ablation == ablation)
    }

    pub fn group(&self, ablation: Ablation, seed: u64, group: Label) -> Option<&GroupRow> {
        self.explanations
            .iter()
            .find(|g| g.ablation == ablation && g.seed == seed && g.group == group)
    }

    /// Fixed-precision Markdown table, one row per ablation.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "| {} |\n|{}\n",
            TABLE_HEADER.join(" | "),
            "---|".repeat(TABLE_HEADER.len())
        );
        for a in &self.aggregates {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                a.ablation.label(),
                a.n_seeds,
                a.accuracy.pretty(1.0, 2),
                a.auc.map_or("n/a".into(), |x| x.pretty(1.0, 4)),
                a.f1.pretty(1.0, 4),
                a.precision.pretty(1.0, 4),
                a.recall.pretty(1.0, 4),
            ));
        }
        s
    }
}

/// Mean ± std over the seed rows of each ablation, in `order`.
pub fn aggregate(order: &[Ablation], rows: &[SeedRow]) -> Vec<AggregateRow> {
    order
        .iter()
        .filter_map(|&ablation| {
            let rs: Vec<&SeedRow> = rows.iter().filter(|r| r.ablation == ablation).collect();
            if rs.is_empty() {
                return None;
            }
            let col = |f: &dyn Fn(&Metrics) -> f64| {
                Stat::of(&rs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>())
            };
            let aucs: Option<Vec<f64>> = rs.iter().map(|r| r.metrics.auc).collect();
            Some(AggregateRow {
                ablation,
                n_seeds: rs.len(),
                accuracy: col(&|m| m.accuracy * 100.0),
                auc: aucs.map(|v| Stat::of(&v)),
                f1: col(&|m| m.f1),
                precision: col(&|m| m.precision),
                recall: col(&|m| m.recall),
            })
        })
        .collect()
}

pub fn write_table_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# {POOLING}").map_err(|e| Error::io(path, e))?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(TABLE_HEADER)?;
        for r in rows {
            w.write_record([
                r.ablation.label().to_string(),
                r.n_seeds.to_string(),
                r.accuracy.cell(),
                r.auc.map_or(String::new(), |s| s.cell()),
                r.f1.cell(),
                r.precision.cell(),
                r.recall.cell(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_table_csv(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TABLE_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unexpected header {header:?}"),
        });
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let ablation = Ablation::ALL
            .into_iter()
            .find(|a| a.label() == &rec[0])
            .ok_or_else(|| bad(format!("unknown model '{}'", &rec[0])))?;
        out.push(AggregateRow {
            ablation,
            n_seeds: rec[1].parse().map_err(|e| bad(format!("seeds: {e}")))?,
            accuracy: Stat::parse(&rec[2])?,
            auc: if rec[3].is_empty() {
                None
            } else {
                Some(Stat::parse(&rec[3])?)
            },
            f1: Stat::parse(&rec[4])?,
            precision: Stat::parse(&rec[5])?,
            recall: Stat::parse(&rec[6])?,
        });
    }
    Ok(out)
}
