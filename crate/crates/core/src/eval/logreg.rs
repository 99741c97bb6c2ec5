use crate::error::{Error, Result};

/// Binary logistic regression `p(y=1|x) = sigmoid(x·w + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogReg {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Gradient norm at the returned weights.
    pub grad_norm: f64,
    pub iterations: usize,
}

pub const GRAD_TOL: f64 = 1e-6;

fn objective_and_grad(x: &[Vec<f64>], y: &[bool], w: &[f64], b: f64, l2: f64) -> (f64, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let z: f64 = xi.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b;
        let t = if *yi { 1.0 } else { 0.0 };
        loss += crate::autodiff::softplus(z) - t * z;
        let r = crate::autodiff::sigmoid(z) - t;
        gw.iter_mut().zip(xi).for_each(|(g, a)| *g += r * a);
        gb += r;
    }
    loss /= n;
    gb /= n;
    for (g, wk) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wk;
    }
    loss += 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss, gw, gb)
}

impl LogReg {
    /// Minimizes the mean logistic loss plus `l2/2 · ‖w‖²` (bias unpenalized)
    /// by gradient descent with step `1/L`, where `L` bounds the Hessian.
    pub fn fit(x: &[Vec<f64>], y: &[bool], l2: f64, max_iter: usize) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!("{} rows but {} labels", x.len(), y.len())));
        }
        let pos = y.iter().filter(|v| **v).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::DegenerateData(format!(
                "logistic regression needs both labels ({pos} positives of {})",
                y.len()
            )));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged feature rows".into()));
        }
        let max_sq = x
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0)
            .fold(0.0, f64::max);
        let step = 1.0 / (0.25 * max_sq + l2);
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut iterations = 0;
        let mut grad_norm;
        loop {
            let (_, gw, gb) = objective_and_grad(x, y, &w, b, l2);
            grad_norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
            if grad_norm < GRAD_TOL || iterations >= max_iter {
                break;
            }
            w.iter_mut().zip(&gw).for_each(|(v, g)| *v -= step * g);
            b -= step * gb;
            iterations += 1;
        }
        Ok(Self {
            weights: w,
            bias: b,
            grad_norm,
            iterations,
        })
    }

    pub fn objective(&self, x: &[Vec<f64>], y: &[bool], l2: f64) -> f64 {
        objective_and_grad(x, y, &self.weights, self.bias, l2).0
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias > 0.0
    }
}

/// Per-column mean and standard deviation (1 for constant columns).
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale = (0..d)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}
