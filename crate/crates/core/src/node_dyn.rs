//! Node-dynamics head: predicts how many new events a node receives at a
//! time from its embedding, `ΔN̂ = ReLU(h W_n + b_n)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{scaled_uniform, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDynParams {
    pub w_n: Tensor,
    pub b_n: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundNodeDyn {
    pub w_n: Var,
    pub b_n: Var,
}

impl NodeDynParams {
    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            w_n: scaled_uniform(rng, vec![dim, 1], dim),
            b_n: Tensor::zeros(vec![1, 1]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundNodeDyn {
        BoundNodeDyn {
            w_n: tape.leaf(&self.w_n, requires_grad),
            b_n: tape.leaf(&self.b_n, requires_grad),
        }
    }
}

/// Estimated `ΔN̂` for an embedding `[1, d]`, shape `[1, 1]`.
pub fn estimate(tape: &mut Tape, p: &BoundNodeDyn, h: Var) -> Result<Var> {
    let z = tape.matmul(h, p.w_n)?;
    let z = tape.add(z, p.b_n)?;
    tape.relu(z)
}

/// Smooth-L1 loss between an estimate and the observed count.
pub fn loss(tape: &mut Tape, estimate: Var, observed: usize) -> Result<Var> {
    let target = tape.scalar(observed as f64);
    let diff = tape.sub(estimate, target)?;
    let l = tape.smooth_l1(diff)?;
    tape.sum(l)
}
