//! Sparse-annotation and temperature-grid experiment runners.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::{finetune, labeled_train_indices, pretrain, FinetuneConfig, PretrainConfig};
use crate::analysis::{mann_whitney_u, mean_ci95, rank_with_ties};
use crate::data::{CvSplit, Dataset};
use crate::encoders::ModelCheckpoint;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SparseConfig {
    pub fractions: Vec<f64>,
    pub repeats: usize,
    /// Template for both arms; `label_fraction` and `seed` are set per trial.
    /// The scratch arm always trains its encoder.
    pub finetune: FinetuneConfig,
    /// Repeat `r` uses seed `base_seed + r` for label sampling and initialization.
    pub base_seed: u64,
}

/// Test UAR of both arms on one shared label subset.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTrial {
    pub fraction: f64,
    pub repeat: usize,
    pub seed: u64,
    pub labeled: Vec<usize>,
    pub pretrained_uar: f64,
    pub scratch_uar: f64,
    pub pretrained_wa: f64,
    pub scratch_wa: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseRow {
    pub fraction: f64,
    pub arm: String,
    pub mean_uar: f64,
    pub ci_half_width: f64,
    pub n: usize,
    /// Two-sided Mann–Whitney p between the arms at this fraction.
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseReport {
    pub trials: Vec<SparseTrial>,
    pub rows: Vec<SparseRow>,
}

impl SparseReport {
    pub const CSV_HEADER: &'static str = "p,arm,mean_uar,ci95_half_width,n,mwu_p";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{},{:.6}",
                r.fraction, r.arm, r.mean_uar, r.ci_half_width, r.n, r.p_value
            );
        }
        out
    }

    pub fn trials_csv(&self) -> String {
        let mut out = String::from("p,repeat,seed,n_labeled,pretrained_uar,scratch_uar,pretrained_wa,scratch_wa\n");
        for t in &self.trials {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                t.fraction,
                t.repeat,
                t.seed,
                t.labeled.len(),
                t.pretrained_uar,
                t.scratch_uar,
                t.pretrained_wa,
                t.scratch_wa
            );
        }
        out
    }
}

/// Fine-tunes a pretrained and a from-scratch model on identical label
/// subsets for every (fraction, repeat) and summarizes test UAR per arm.
pub fn run_sparse_experiment(
    ds: &Dataset,
    split: &CvSplit,
    checkpoint: &ModelCheckpoint,
    classes: &[String],
    cfg: &SparseConfig,
) -> Result<SparseReport> {
    if cfg.fractions.is_empty() || cfg.repeats == 0 {
        return Err(Error::contract("sparse experiment needs fractions and repeats"));
    }
    let jobs: Vec<(f64, usize)> = cfg
        .fractions
        .iter()
        .flat_map(|&p| (0..cfg.repeats).map(move |r| (p, r)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(p, r)| -> Result<SparseTrial> {
            let seed = cfg.base_seed + r as u64;
            let labeled = labeled_train_indices(ds, split, classes, Some(p), seed)?;
            let ft = FinetuneConfig {
                label_fraction: Some(p),
                seed,
                ..cfg.finetune.clone()
            };
            let pre = finetune(ds, split, &ft, Some(checkpoint), classes, &labeled)?;
            let supervised = FinetuneConfig {
                freeze: false,
                ..ft.clone()
            };
            let scratch = finetune(ds, split, &supervised, None, classes, &labeled)?;
            Ok(SparseTrial {
                fraction: p,
                repeat: r,
                seed,
                labeled,
                pretrained_uar: pre.test.uar,
                scratch_uar: scratch.test.uar,
                pretrained_wa: pre.test.wa,
                scratch_wa: scratch.test.wa,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &p in &cfg.fractions {
        let at: Vec<&SparseTrial> = trials.iter().filter(|t| t.fraction == p).collect();
        let pre: Vec<f64> = at.iter().map(|t| t.pretrained_uar).collect();
        let scr: Vec<f64> = at.iter().map(|t| t.scratch_uar).collect();
        let p_value = mann_whitney_u(&pre, &scr)?.p_value;
        for (arm, vals) in [("pretrained", &pre), ("scratch", &scr)] {
            let (mean, half) = if vals.len() >= 2 {
                mean_ci95(vals)?
            } else {
                (vals[0], 0.0)
            };
            rows.push(SparseRow {
                fraction: p,
                arm: arm.to_string(),
                mean_uar: mean,
                ci_half_width: half,
                n: vals.len(),
                p_value,
            });
        }
    }
    Ok(SparseReport { trials, rows })
}

/// Ranks of `scores` sorted descending (1 = best); ties share the mean rank.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
    rank_with_ties(&neg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub temperatures: Vec<f64>,
    pub freeze_options: Vec<bool>,
    /// Views that are fine-tuned and scored; all of `pretrain.views` are pre-trained.
    pub eval_views: Vec<String>,
    pub splits: Vec<CvSplit>,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    /// Adds a supervised-from-scratch row.
    pub include_supervised: bool,
}

/// Fold-averaged `[val_uar, val_wa, test_uar, test_wa]` per evaluated view.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub temperature: Option<f64>,
    pub freeze: Option<bool>,
    pub scores: Vec<[f64; 4]>,
    pub val_rank: Option<f64>,
    pub test_rank: Option<f64>,
}

impl GridCell {
    pub fn label(&self) -> String {
        match (self.temperature, self.freeze) {
            (Some(t), Some(f)) => format!("tau={t} {}", if f { "frozen" } else { "tuned" }),
            _ => "supervised".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub views: Vec<String>,
    pub cells: Vec<GridCell>,
}

impl GridReport {
    pub fn to_csv(&self) -> String {
        let ranked = self.cells.len() >= 2;
        let mut out = String::from("method,tau,freeze");
        for v in &self.views {
            let _ = write!(out, ",{v}_val_uar,{v}_val_wa,{v}_test_uar,{v}_test_wa");
        }
        if ranked {
            out.push_str(",avg_rank_val,avg_rank_test");
        }
        out.push('\n');
        for c in &self.cells {
            let method = if c.temperature.is_some() {
                "pairwise-cl"
            } else {
                "supervised"
            };
            let tau = c.temperature.map(|t| t.to_string()).unwrap_or_default();
            let freeze = c.freeze.map(|f| if f { "frozen" } else { "tuned" }).unwrap_or_default();
            let _ = write!(out, "{method},{tau},{freeze}");
            for s in &c.scores {
                let _ = write!(out, ",{:.6},{:.6},{:.6},{:.6}", s[0], s[1], s[2], s[3]);
            }
            if ranked {
                let _ = write!(
                    out,
                    ",{:.3},{:.3}",
                    c.val_rank.unwrap_or_default(),
                    c.test_rank.unwrap_or_default()
                );
            }
            out.push('\n');
        }
        out
    }

    /// Fills per-row average ranks over the val and test metric columns.
    pub fn compute_ranks(&mut self) {
        let n = self.cells.len();
        if n < 2 {
            for c in &mut self.cells {
                c.val_rank = None;
                c.test_rank = None;
            }
            return;
        }
        let mut val_sum = vec![0.0; n];
        let mut test_sum = vec![0.0; n];
        let mut val_cols = 0usize;
        let mut test_cols = 0usize;
        for v in 0..self.views.len() {
            for m in 0..4 {
                let col: Vec<f64> = self.cells.iter().map(|c| c.scores[v][m]).collect();
                let ranks = average_ranks(&col);
                let (sum, count) = if m < 2 {
                    (&mut val_sum, &mut val_cols)
                } else {
                    (&mut test_sum, &mut test_cols)
                };
                for (s, r) in sum.iter_mut().zip(&ranks) {
                    *s += r;
                }
                *count += 1;
            }
        }
        for (i, c) in self.cells.iter_mut().enumerate() {
            c.val_rank = Some(val_sum[i] / val_cols as f64);
            c.test_rank = Some(test_sum[i] / test_cols as f64);
        }
    }
}

/// Pre-trains per temperature and fold, fine-tunes every evaluated view with
/// full labels under each freeze option, and averages over folds.
pub fn run_temperature_grid(ds: &Dataset, classes: &[String], cfg: &GridConfig) -> Result<GridReport> {
    if cfg.temperatures.is_empty() || cfg.freeze_options.is_empty() || cfg.splits.is_empty() {
        return Err(Error::contract("temperature grid must be nonempty"));
    }
    let pre_jobs: Vec<(usize, usize)> = (0..cfg.temperatures.len())
        .flat_map(|t| (0..cfg.splits.len()).map(move |f| (t, f)))
        .collect();
    let checkpoints: Vec<ModelCheckpoint> = pre_jobs
        .par_iter()
        .map(|&(t, f)| {
            let pc = PretrainConfig {
                temperature: cfg.temperatures[t],
                ..cfg.pretrain.clone()
            };
            pretrain(ds, &cfg.splits[f], &pc).map(|(c, _)| c)
        })
        .collect::<Result<Vec<_>>>()?;

    // (temperature index or None, freeze)
    let mut rows: Vec<(Option<usize>, bool)> = Vec::new();
    if cfg.include_supervised {
        rows.push((None, false));
    }
    for t in 0..cfg.temperatures.len() {
        for &f in &cfg.freeze_options {
            rows.push((Some(t), f));
        }
    }
    let nf = cfg.splits.len();
    let jobs: Vec<(usize, usize, usize)> = (0..rows.len())
        .flat_map(|r| (0..cfg.eval_views.len()).flat_map(move |v| (0..nf).map(move |f| (r, v, f))))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(r, v, f)| -> Result<[f64; 4]> {
            let (t, freeze) = rows[r];
            let split = &cfg.splits[f];
            let ft = FinetuneConfig {
                view: cfg.eval_views[v].clone(),
                freeze,
                label_fraction: None,
                ..cfg.finetune.clone()
            };
            let labeled = labeled_train_indices(ds, split, classes, None, ft.seed)?;
            let ckpt = t.map(|t| &checkpoints[t * nf + f]);
            let out = finetune(ds, split, &ft, ckpt, classes, &labeled)?;
            Ok([out.val.uar, out.val.wa, out.test.uar, out.test.wa])
        })
        .collect::<Result<Vec<_>>>()?;

    let nv = cfg.eval_views.len();
    let cells = rows
        .iter()
        .enumerate()
        .map(|(r, &(t, freeze))| {
            let scores = (0..nv)
                .map(|v| {
                    let mut acc = [0.0; 4];
                    for f in 0..nf {
                        let s = results[(r * nv + v) * nf + f];
                        for m in 0..4 {
                            acc[m] += s[m] / nf as f64;
                        }
                    }
                    acc
                })
                .collect();
            GridCell {
                temperature: t.map(|t| cfg.temperatures[t]),
                freeze: t.map(|_| freeze),
                scores,
                val_rank: None,
                test_rank: None,
            }
        })
        .collect();
    let mut report = GridReport {
        views: cfg.eval_views.clone(),
        cells,
    };
    report.compute_ranks();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descending_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), vec![1.0, 3.0, 2.0]);
        assert_eq!(average_ranks(&[2.0, 2.0, 1.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(average_ranks(&[0.7]), vec![1.0]);
    }

    fn cell(t: f64, s: f64) -> GridCell {
        GridCell {
            temperature: Some(t),
            freeze: Some(false),
            scores: vec![[s, s, s, s]],
            val_rank: None,
            test_rank: None,
        }
    }

    #[test]
    fn grid_ranks_and_csv() {
        let mut g = GridReport {
            views: vec!["a".into()],
            cells: vec![cell(0.1, 0.5), cell(0.5, 0.7)],
        };
        g.compute_ranks();
        assert_eq!(g.cells[1].val_rank, Some(1.0));
        assert_eq!(g.cells[0].test_rank, Some(2.0));
        assert!(g
            .to_csv()
            .lines()
            .next()
            .unwrap()
            .ends_with("avg_rank_val,avg_rank_test"));

        let mut single = GridReport {
            views: vec!["a".into()],
            cells: vec![cell(0.5, 0.7)],
        };
        single.compute_ranks();
        assert!(!single.to_csv().contains("avg_rank"));
    }
}
