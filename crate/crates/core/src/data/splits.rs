//! Leave-one-session-out folds and per-class sparse label sampling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::UtteranceRecord;
use crate::error::{Error, Result};

/// Label fractions used for sparse-annotation replication runs.
pub const SPARSE_FRACTIONS: [f64; 4] = [0.02, 0.05, 0.10, 0.25];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CvSplit {
    pub fold: usize,
    pub train: Vec<u32>,
    pub val: u32,
    pub test: u32,
}

impl CvSplit {
    pub fn part_of(&self, session: u32) -> Part {
        if session == self.test {
            Part::Test
        } else if session == self.val {
            Part::Val
        } else if self.train.contains(&session) {
            Part::Train
        } else {
            Part::Unused
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
    Unused,
}

/// Test session `fold`, validation session `fold + 1 (mod S)`, the rest train.
pub fn make_cv_splits(sessions: &[u32], fold: usize) -> Result<CvSplit> {
    let s = sessions.len();
    if s < 3 {
        return Err(Error::contract(format!(
            "cross-validation needs at least 3 sessions, got {s}"
        )));
    }
    if fold >= s {
        return Err(Error::contract(format!("fold {fold} out of range for {s} sessions")));
    }
    let test = sessions[fold];
    let val = sessions[(fold + 1) % s];
    let train = sessions.iter().copied().filter(|&x| x != test && x != val).collect();
    Ok(CvSplit { fold, train, val, test })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseLabelConfig {
    pub fraction: f64,
}

impl SparseLabelConfig {
    pub fn new(fraction: f64) -> Result<Self> {
        if fraction > 0.0 && fraction <= 1.0 {
            Ok(SparseLabelConfig { fraction })
        } else {
            Err(Error::contract(format!(
                "label fraction must be in (0, 1], got {fraction}"
            )))
        }
    }

    /// `max(1, round(p * n_c))`, never more than `n_c`.
    pub fn per_class_count(&self, n_c: usize) -> usize {
        ((self.fraction * n_c as f64).round() as usize).clamp(1, n_c.max(1))
    }
}

/// Picks `max(1, round(p * n_c))` records of every class uniformly without
/// replacement. Candidates are ordered by id before sampling, so the result
/// depends only on the seed and the record set. Returns ascending indices
/// into `records`.
pub fn sample_sparse_labels(
    records: &[UtteranceRecord],
    classes: &[String],
    cfg: SparseLabelConfig,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].id.cmp(&records[b].id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for class in classes {
        let mut members: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| records[i].label.as_deref() == Some(class.as_str()))
            .collect();
        if members.is_empty() {
            return Err(Error::EmptyClass(class.clone()));
        }
        let k = cfg.per_class_count(members.len());
        members.shuffle(&mut rng);
        picked.extend_from_slice(&members[..k]);
    }
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn records(per_class: usize) -> (Vec<UtteranceRecord>, Vec<String>) {
        let classes: Vec<String> = ["neutral", "angry", "sad", "happy"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut out = Vec::new();
        for (c, label) in classes.iter().enumerate() {
            for i in 0..per_class {
                out.push(UtteranceRecord {
                    id: format!("r{c}_{i:04}"),
                    session: 1,
                    speaker: "s".into(),
                    label: Some(label.clone()),
                    view_paths: BTreeMap::new(),
                });
            }
        }
        (out, classes)
    }

    #[test]
    fn fold_zero_and_four() {
        let s = [1, 2, 3, 4, 5];
        let f0 = make_cv_splits(&s, 0).unwrap();
        assert_eq!((f0.test, f0.val, f0.train.clone()), (1, 2, vec![3, 4, 5]));
        let f4 = make_cv_splits(&s, 4).unwrap();
        assert_eq!((f4.test, f4.val, f4.train.clone()), (5, 1, vec![2, 3, 4]));
    }

    #[test]
    fn folds_partition_sessions() {
        let s = [1, 2, 3, 4, 5];
        for fold in 0..5 {
            let f = make_cv_splits(&s, fold).unwrap();
            let mut all = f.train.clone();
            all.push(f.val);
            all.push(f.test);
            all.sort();
            assert_eq!(all, s.to_vec());
            assert_ne!(f.val, f.test);
        }
        assert!(matches!(make_cv_splits(&[1, 2], 0), Err(Error::Contract(_))));
        assert!(make_cv_splits(&s, 5).is_err());
    }

    #[test]
    fn two_percent_of_hundred() {
        let (recs, classes) = records(100);
        let cfg = SparseLabelConfig::new(0.02).unwrap();
        let idx = sample_sparse_labels(&recs, &classes, cfg, 1).unwrap();
        assert_eq!(idx.len(), 8);
        for c in &classes {
            assert_eq!(idx.iter().filter(|&&i| recs[i].label.as_ref() == Some(c)).count(), 2);
        }
    }

    #[test]
    fn floor_guard_keeps_one() {
        let (recs, classes) = records(10);
        let idx = sample_sparse_labels(&recs, &classes, SparseLabelConfig::new(0.02).unwrap(), 1).unwrap();
        assert_eq!(idx.len(), 4);
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let (recs, classes) = records(100);
        let cfg = SparseLabelConfig::new(0.05).unwrap();
        let a = sample_sparse_labels(&recs, &classes, cfg, 7).unwrap();
        assert_eq!(a, sample_sparse_labels(&recs, &classes, cfg, 7).unwrap());
        let distinct: std::collections::BTreeSet<Vec<usize>> = (0..10)
            .map(|s| sample_sparse_labels(&recs, &classes, cfg, s).unwrap())
            .collect();
        assert!(distinct.len() >= 9);
    }

    #[test]
    fn record_order_does_not_matter() {
        let (recs, classes) = records(30);
        let cfg = SparseLabelConfig::new(0.1).unwrap();
        let a: Vec<String> = sample_sparse_labels(&recs, &classes, cfg, 3)
            .unwrap()
            .into_iter()
            .map(|i| recs[i].id.clone())
            .collect();
        let mut rev = recs.clone();
        rev.reverse();
        let mut b: Vec<String> = sample_sparse_labels(&rev, &classes, cfg, 3)
            .unwrap()
            .into_iter()
            .map(|i| rev[i].id.clone())
            .collect();
        let mut a = a;
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_class_errors() {
        let (mut recs, classes) = records(5);
        recs.retain(|r| r.label.as_deref() != Some("sad"));
        let r = sample_sparse_labels(&recs, &classes, SparseLabelConfig::new(0.5).unwrap(), 0);
        assert!(matches!(r, Err(Error::EmptyClass(c)) if c == "sad"));
        assert!(SparseLabelConfig::new(0.0).is_err());
        assert!(SparseLabelConfig::new(1.5).is_err());
    }
}
