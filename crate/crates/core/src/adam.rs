use crate::autodiff::ParamTensors;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates, one tensor per parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn for_params<P: ParamTensors>(params: &P) -> Self {
        let zeros: Vec<Tensor> = (0..params.tensor_count())
            .map(|i| Tensor::zeros(params.tensor(i).shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update. Tensors with `frozen[i]` set are left
    /// untouched. Every gradient is checked before anything is modified, and
    /// the gradients are zeroed after a successful step.
    pub fn step<P: ParamTensors>(
        &mut self,
        params: &mut P,
        grads: &mut [Vec<f64>],
        lr: f64,
        frozen: &[bool],
    ) -> Result<()> {
        let n = params.tensor_count();
        if grads.len() != n || self.m.len() != n || self.v.len() != n {
            return Err(Error::dim(format!(
                "adam step over {n} parameters with {} gradients and {} moments",
                grads.len(),
                self.m.len()
            )));
        }
        let names = params.tensor_names();
        for (i, g) in grads.iter().enumerate() {
            if g.len() != params.tensor(i).len() {
                return Err(Error::dim(format!(
                    "gradient for {} has {} entries, parameter has {}",
                    names[i],
                    g.len(),
                    params.tensor(i).len()
                )));
            }
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad} for parameter {}",
                    names[i]
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powf(self.step as f64);
        let bc2 = 1.0 - BETA2.powf(self.step as f64);
        for (i, g) in grads.iter_mut().enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                g.fill(0.0);
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensor_mut(i).data_mut();
            for k in 0..p.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
            g.fill(0.0);
        }
        Ok(())
    }
}
