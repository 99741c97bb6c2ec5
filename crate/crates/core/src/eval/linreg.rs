use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const RIDGE: f64 = 1e-8;

/// Least-squares fit `y ≈ x·w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinReg {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Whether the normal equations needed the ridge term.
    pub ridged: bool,
}

impl LinReg {
    /// Solves the normal equations by Cholesky. A singular system is retried
    /// with `1e-8 · I` added. Constant targets give an intercept-only model.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::DegenerateData(format!(
                "regression on {} rows with {} targets",
                x.len(),
                y.len()
            )));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        if y.iter().all(|v| *v == y[0]) {
            return Ok(Self {
                weights: vec![0.0; d],
                intercept: y[0],
                ridged: false,
            });
        }
        let design = DMatrix::from_fn(x.len(), d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
        let target = DVector::from_column_slice(y);
        let gram = design.transpose() * &design;
        let rhs = design.transpose() * target;
        // a pivot this small relative to the diagonal means rank deficiency
        let scale = gram.diagonal().max();
        let chol = gram.clone().cholesky().filter(|c| {
            let l = c.l_dirty();
            (0..=d).all(|i| l[(i, i)] * l[(i, i)] > 1e-12 * scale)
        });
        let (beta, ridged) = match chol {
            Some(c) => (c.solve(&rhs), false),
            None => {
                warn!("singular design matrix; refitting with ridge {RIDGE}");
                let reg = gram + DMatrix::identity(d + 1, d + 1) * RIDGE;
                let c = reg.cholesky().ok_or_else(|| {
                    Error::Numeric("normal equations singular even with ridge".into())
                })?;
                (c.solve(&rhs), true)
            }
        };
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite regression coefficients".into()));
        }
        Ok(Self {
            weights: beta.iter().take(d).copied().collect(),
            intercept: beta[d],
            ridged,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.intercept
    }
}

pub fn mean_absolute_error(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_target_is_intercept_only() {
        let x = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let m = LinReg::fit(&x, &[4.0, 4.0, 4.0]).unwrap();
        let pred: Vec<f64> = x.iter().map(|r| m.predict(r)).collect();
        assert_eq!(mean_absolute_error(&pred, &[4.0, 4.0, 4.0]), 0.0);
        assert_eq!(m.weights, vec![0.0, 0.0]);
    }

    #[test]
    fn exact_linear_target_is_recovered() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64 * 0.3, ((i * 7) % 5) as f64, (i as f64).sin()])
            .collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] - r[1] + 0.5 * r[2] + 3.0).collect();
        let m = LinReg::fit(&x, &y).unwrap();
        let pred: Vec<f64> = x.iter().map(|r| m.predict(r)).collect();
        assert!(mean_absolute_error(&pred, &y) < 1e-8);
        assert!(!m.ridged);
    }

    #[test]
    fn duplicate_columns_fall_back_to_ridge() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64 + 1.0).collect();
        let m = LinReg::fit(&x, &y).unwrap();
        assert!(m.ridged);
        let pred: Vec<f64> = x.iter().map(|r| m.predict(r)).collect();
        assert!(mean_absolute_error(&pred, &y) < 1e-4);
    }
}
