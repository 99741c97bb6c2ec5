use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Per-split values of one metric with their mean and the half-width of a
/// 95% t-interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci95: f64,
    pub splits: Vec<f64>,
}

/// Two-sided 97.5% quantile of Student's t with `n - 1` degrees of freedom.
pub fn t_multiplier(n: usize) -> f64 {
    if n < 2 {
        return f64::NAN;
    }
    StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975)
}

impl Summary {
    pub fn new(splits: Vec<f64>) -> Self {
        let n = splits.len();
        let mean = splits.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = splits.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            t_multiplier(n) * (var / n as f64).sqrt()
        };
        Self { mean, ci95, splits }
    }
}

/// Outcome of an evaluation run. Link prediction fills `accuracy` and `f1`;
/// node dynamics fills `mae`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub examples: usize,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<Summary>,
}

impl MetricsReport {
    fn metrics(&self) -> Vec<(&'static str, &Summary)> {
        [
            ("accuracy", &self.accuracy),
            ("f1", &self.f1),
            ("mae", &self.mae),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|s| (k, s)))
        .collect()
    }

    /// One `key=value` pair per line, in a fixed order.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "task={}", self.task).unwrap();
        writeln!(out, "examples={}", self.examples).unwrap();
        writeln!(out, "skipped={}", self.skipped).unwrap();
        for (name, s) in self.metrics() {
            writeln!(out, "{name}.mean={}", s.mean).unwrap();
            writeln!(out, "{name}.ci95={}", s.ci95).unwrap();
            for (i, v) in s.splits.iter().enumerate() {
                writeln!(out, "{name}.split{i}={v}").unwrap();
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable `name: mean ± ci` lines.
    pub fn summary_lines(&self) -> Vec<String> {
        self.metrics()
            .into_iter()
            .map(|(name, s)| format!("{name}: {:.4} ± {:.4}", s.mean, s.ci95))
            .collect()
    }
}

/// Binary confusion counts with positives as the target class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (p, t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.tp + self.fp + self.tn + self.fn_;
        (self.tp + self.tn) as f64 / n.max(1) as f64
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}
