//! JSON run reports with mean ± population standard deviation.

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{ConfusionMatrix, Metrics};
use super::run::RunOutcome;
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// Counts and 2-decimal metrics on one evaluated set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub n: usize,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<SplitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<SplitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn completed(run: usize, out: &RunOutcome) -> Self {
        Self {
            run,
            seed: out.seed,
            status: RunStatus::Ok,
            epochs: Some(out.epochs),
            best_epoch: Some(out.best_epoch),
            best_val_loss: Some(out.best_val_loss),
            val_losses: out.val_losses.clone(),
            val: Some(SplitResult::from_evaluation(&out.val)),
            test: out.test.as_ref().map(SplitResult::from_evaluation),
            error: None,
        }
    }

    pub fn failed(run: usize, seed: u64, error: &Error) -> Self {
        Self {
            run,
            seed,
            status: RunStatus::Failed,
            epochs: None,
            best_epoch: None,
            best_val_loss: None,
            val_losses: Vec::new(),
            val: None,
            test: None,
            error: Some(error.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation, both rounded to 2 decimals.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let r = |v: f64| (v * 100.0).round() / 100.0;
        Self {
            mean: r(mean),
            std: r(var.sqrt()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
    pub specificity: MeanStd,
}

impl MetricSummary {
    /// `None` when `metrics` is empty.
    pub fn of<'a>(metrics: impl IntoIterator<Item = &'a Metrics>) -> Option<Self> {
        let rows: Vec<[f64; 5]> = metrics.into_iter().map(Metrics::values).collect();
        if rows.is_empty() {
            return None;
        }
        let col = |k: usize| MeanStd::of(&rows.iter().map(|r| r[k]).collect::<Vec<_>>());
        Some(Self {
            accuracy: col(0),
            precision: col(1),
            recall: col(2),
            f1: col(3),
            specificity: col(4),
        })
    }

    pub fn get(&self, name: &str) -> Option<MeanStd> {
        match name {
            "accuracy" => Some(self.accuracy),
            "precision" => Some(self.precision),
            "recall" => Some(self.recall),
            "f1" => Some(self.f1),
            "specificity" => Some(self.specificity),
            _ => None,
        }
    }
}

/// Summaries over completed runs. `test` is present only when every
/// completed run was evaluated on a test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed: usize,
    pub val: Option<MetricSummary>,
    pub test: Option<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub config: TrainConfig,
    pub runs: usize,
    pub partial: bool,
    pub per_run: Vec<RunRecord>,
    pub aggregate: Aggregate,
}

impl Report {
    pub fn new(config: &TrainConfig, per_run: Vec<RunRecord>) -> Self {
        let done: Vec<&RunRecord> = per_run
            .iter()
            .filter(|r| r.status == RunStatus::Ok)
            .collect();
        let val = MetricSummary::of(
            done.iter()
                .filter_map(|r| r.val.as_ref())
                .map(|s| &s.metrics),
        );
        let tests: Vec<&Metrics> = done
            .iter()
            .filter_map(|r| r.test.as_ref())
            .map(|s| &s.metrics)
            .collect();
        let test = if tests.len() == done.len() {
            MetricSummary::of(tests)
        } else {
            None
        };
        Self {
            config_digest: config.digest(),
            config: config.clone(),
            runs: config.runs,
            partial: done.len() < per_run.len(),
            aggregate: Aggregate {
                completed: done.len(),
                val,
                test,
            },
            per_run,
        }
    }

    /// Headline summary: test metrics when available, otherwise validation.
    pub fn headline(&self) -> Option<&MetricSummary> {
        self.aggregate.test.as_ref().or(self.aggregate.val.as_ref())
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::train::metrics::compute_metrics;

    fn record(run: usize, cm: ConfusionMatrix) -> RunRecord {
        let metrics = compute_metrics(&cm).unwrap().rounded();
        let split = SplitResult {
            n: cm.total() as usize,
            loss: 0.5,
            confusion: cm,
            metrics,
        };
        RunRecord {
            run,
            seed: run as u64,
            status: RunStatus::Ok,
            epochs: Some(10),
            best_epoch: Some(2),
            best_val_loss: Some(0.5),
            val_losses: vec![0.5],
            val: Some(split.clone()),
            test: Some(split),
            error: None,
        }
    }

    #[test]
    fn population_std() {
        let s = MeanStd::of(&[80.0, 90.0]);
        assert_eq!((s.mean, s.std), (85.0, 5.0));
        let s = MeanStd::of(&[70.0]);
        assert_eq!(s.std, 0.0);
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(s.std, 1.12, epsilon = 1e-12);
    }

    #[test]
    fn single_run_has_zero_spread() {
        let cfg = TrainConfig {
            runs: 1,
            ..Default::default()
        };
        let r = Report::new(&cfg, vec![record(0, ConfusionMatrix::new(21, 4, 20, 3))]);
        let t = r.aggregate.test.as_ref().unwrap();
        assert_eq!(
            t.accuracy,
            MeanStd {
                mean: 85.42,
                std: 0.0
            }
        );
        assert_eq!(t.f1.std, 0.0);
        assert!(!r.partial);
        assert_eq!(r.headline(), Some(t));
    }

    #[test]
    fn failures_mark_partial_and_are_excluded() {
        let cfg = TrainConfig {
            runs: 2,
            ..Default::default()
        };
        let failed = RunRecord::failed(1, 1, &Error::Data("boom".into()));
        let r = Report::new(
            &cfg,
            vec![record(0, ConfusionMatrix::new(5, 0, 5, 0)), failed],
        );
        assert!(r.partial);
        assert_eq!(r.aggregate.completed, 1);
        assert_eq!(r.aggregate.test.as_ref().unwrap().accuracy.mean, 100.0);
        let json = r.to_json();
        assert!(json.contains("\"status\": \"failed\""));
        let back: Report = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn json_has_expected_top_level_keys() {
        let cfg = TrainConfig {
            runs: 1,
            ..Default::default()
        };
        let r = Report::new(&cfg, vec![record(0, ConfusionMatrix::new(1, 1, 1, 1))]);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["config_digest", "config", "per_run", "aggregate", "partial"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["per_run"][0]["test"]["confusion"]["fn"], 1);
    }
}
