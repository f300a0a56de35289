use crate::error::{Error, Result};

/// Confusion-matrix metrics. Rows of `confusion` are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub uar: f64,
    pub wa: f64,
    pub confusion: Vec<Vec<usize>>,
    /// `None` for classes without test instances; those are left out of the UAR.
    pub recalls: Vec<Option<f64>>,
    pub fold: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_predictions(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        if truth.is_empty() {
            return Err(Error::EmptyDataset("no labeled instances to evaluate".into()));
        }
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::contract(format!("class index out of range: {t}/{p}")));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let recalls: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect();
        let present: Vec<f64> = recalls.iter().flatten().copied().collect();
        let uar = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..confusion.len()).map(|c| confusion[c][c]).sum();
        let wa = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        MetricsReport {
            uar,
            wa,
            confusion,
            recalls,
            fold: 0,
            seed: 0,
        }
    }

    /// Classes whose recall was undefined for lack of instances.
    pub fn absent_classes(&self) -> Vec<usize> {
        self.recalls
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_none())
            .map(|(c, _)| c)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = [0, 1, 2, 3, 1];
        let m = MetricsReport::from_predictions(&t, &t, 4).unwrap();
        assert_eq!((m.uar, m.wa), (1.0, 1.0));
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let t: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let m = MetricsReport::from_predictions(&t, &[0; 40], 4).unwrap();
        assert_eq!((m.uar, m.wa), (0.25, 0.25));
    }

    #[test]
    fn hand_confusion() {
        let m = MetricsReport::from_confusion(vec![vec![2, 0], vec![1, 1]]);
        assert_eq!(m.recalls, vec![Some(1.0), Some(0.5)]);
        assert_eq!(m.uar, 0.75);
        assert_eq!(m.wa, 0.75);
    }

    #[test]
    fn absent_class_is_excluded() {
        let m = MetricsReport::from_predictions(&[0, 0, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(m.absent_classes(), vec![2]);
        assert!((m.uar - 0.75).abs() < 1e-12);
    }
}
