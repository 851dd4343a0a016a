//! Binary confusion matrix and the five reported metrics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts with class 1 (impaired) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn from_predictions(predicted: &[usize], actual: &[usize]) -> Self {
        let mut cm = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == 1, a == 1) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fp += 1,
                (false, false) => cm.tn += 1,
                (false, true) => cm.fn_ += 1,
            }
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Percentages in `[0, 100]`. `warnings` names metrics whose denominator was
/// zero and which were therefore set to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["accuracy", "precision", "recall", "f1", "specificity"];

    pub fn values(&self) -> [f64; 5] {
        [
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.specificity,
        ]
    }

    /// Same metrics rounded to 2 decimals.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| (v * 100.0).round() / 100.0;
        Self {
            accuracy: r(self.accuracy),
            precision: r(self.precision),
            recall: r(self.recall),
            f1: r(self.f1),
            specificity: r(self.specificity),
            warnings: self.warnings.clone(),
        }
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let mut warnings = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            warn!("{name} undefined (zero denominator), reported as 0");
            warnings.push(name.to_string());
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let precision = ratio("precision", cm.tp, cm.tp + cm.fp);
    let recall = ratio("recall", cm.tp, cm.tp + cm.fn_);
    let specificity = ratio("specificity", cm.tn, cm.tn + cm.fp);
    let accuracy = 100.0 * (cm.tp + cm.tn) as f64 / cm.total() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        warn!("f1 undefined (precision and recall are 0), reported as 0");
        warnings.push("f1".to_string());
        0.0
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        specificity,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn reference_matrix() {
        let m = compute_metrics(&ConfusionMatrix::new(21, 4, 20, 3))
            .unwrap()
            .rounded();
        assert_eq!(
            (m.precision, m.recall, m.f1, m.accuracy, m.specificity),
            (84.00, 87.50, 85.71, 85.42, 83.33)
        );
        assert!(m.warnings.is_empty());
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = compute_metrics(&ConfusionMatrix::new(24, 0, 24, 0)).unwrap();
        assert_eq!(m.values(), [100.0; 5]);
        let m = compute_metrics(&ConfusionMatrix::new(0, 0, 5, 3)).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.warnings, vec!["precision", "f1"]);
        assert!(compute_metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn from_predictions_counts() {
        let cm = ConfusionMatrix::from_predictions(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]);
        assert_eq!(cm, ConfusionMatrix::new(2, 1, 1, 1));
        let json = serde_json::to_string(&cm).unwrap();
        assert_eq!(json, r#"{"tp":2,"fp":1,"tn":1,"fn":1}"#);
    }

    proptest! {
        #[test]
        fn accuracy_between_recall_and_specificity(
            tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50,
        ) {
            prop_assume!(tp + fn_ > 0 && tn + fp > 0);
            let m = compute_metrics(&ConfusionMatrix::new(tp, fp, tn, fn_)).unwrap();
            let lo = m.recall.min(m.specificity);
            let hi = m.recall.max(m.specificity);
            prop_assert!(m.accuracy >= lo - 1e-9 && m.accuracy <= hi + 1e-9);
        }

        #[test]
        fn symmetric_matrix_has_f1_equal_accuracy(a in 1u64..50, b in 0u64..50) {
            let m = compute_metrics(&ConfusionMatrix::new(a, b, a, b)).unwrap();
            assert_abs_diff_eq!(m.f1, m.accuracy, epsilon = 1e-10);
        }
    }
}
