//! Event intensity and its per-event adaptation.
//!
//! The intensity of an event between `i` and `j` is
//! `λ = sigmoid((h_i - h_j)^2 · w + b)` where `θ = [w; b]` is the transfer
//! function. A global prior `θ_e` is adapted per event by feature-wise linear
//! modulation conditioned on `h_i ∥ h_j`:
//!
//! ```text
//! α = LeakyReLU((h_i ∥ h_j) W_α + b_α)
//! β = LeakyReLU((h_i ∥ h_j) W_β + b_β)
//! θ = (α + 1) ⊙ θ_e + β
//! ```

use rand::Rng;

use crate::autodiff::{sigmoid, softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{scaled_uniform, Tensor};

/// Global transfer function, shape `[1, d + 1]` (weights then bias).
#[derive(Debug, Clone, PartialEq)]
pub struct EventPrior {
    pub theta_e: Tensor,
}

impl EventPrior {
    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            theta_e: scaled_uniform(rng, vec![1, dim + 1], dim),
        }
    }
}

/// Generators of the scaling (`α`) and shifting (`β`) operators.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub w_alpha: Tensor,
    pub b_alpha: Tensor,
    pub w_beta: Tensor,
    pub b_beta: Tensor,
}

impl FilmParams {
    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        Self {
            w_alpha: scaled_uniform(rng, vec![2 * dim, dim + 1], 2 * dim),
            b_alpha: Tensor::zeros(vec![1, dim + 1]),
            w_beta: scaled_uniform(rng, vec![2 * dim, dim + 1], 2 * dim),
            b_beta: Tensor::zeros(vec![1, dim + 1]),
        }
    }

    /// All-zero generators, which make `α = β = 0` and `θ = θ_e`.
    pub fn zeros(dim: usize) -> Self {
        Self {
            w_alpha: Tensor::zeros(vec![2 * dim, dim + 1]),
            b_alpha: Tensor::zeros(vec![1, dim + 1]),
            w_beta: Tensor::zeros(vec![2 * dim, dim + 1]),
            b_beta: Tensor::zeros(vec![1, dim + 1]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundFilm {
    pub w_alpha: Var,
    pub b_alpha: Var,
    pub w_beta: Var,
    pub b_beta: Var,
}

impl FilmParams {
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundFilm {
        BoundFilm {
            w_alpha: tape.leaf(&self.w_alpha, requires_grad),
            b_alpha: tape.leaf(&self.b_alpha, requires_grad),
            w_beta: tape.leaf(&self.w_beta, requires_grad),
            b_beta: tape.leaf(&self.b_beta, requires_grad),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Adapted {
    pub theta: Var,
    pub alpha: Var,
    pub beta: Var,
}

/// Event-specific transfer function from the pair `(h_i, h_j)`, each `[1, d]`.
pub fn film_adapt(
    tape: &mut Tape,
    film: &BoundFilm,
    theta_e: Var,
    h_i: Var,
    h_j: Var,
    slope: f64,
) -> Result<Adapted> {
    let cond = tape.concat(h_i, h_j, 1)?;
    let za = tape.matmul(cond, film.w_alpha)?;
    let za = tape.add(za, film.b_alpha)?;
    let alpha = tape.leaky_relu(za, slope)?;
    let zb = tape.matmul(cond, film.w_beta)?;
    let zb = tape.add(zb, film.b_beta)?;
    let beta = tape.leaky_relu(zb, slope)?;
    let one = tape.scalar(1.0);
    let gain = tape.add(alpha, one)?;
    let scaled = tape.mul(gain, theta_e)?;
    let theta = tape.add(scaled, beta)?;
    Ok(Adapted { theta, alpha, beta })
}

/// Pre-sigmoid intensity `(h_i - h_j)^2 · w + b` with `θ = [w; b]`, shape `[1, 1]`.
pub fn intensity_logit(tape: &mut Tape, theta: Var, h_i: Var, h_j: Var) -> Result<Var> {
    let d = tape.shape(h_i)[1];
    if tape.shape(theta) != [1, d + 1] {
        return Err(Error::Dimension(format!(
            "transfer function of shape {:?} does not fit embeddings of width {d} (expected [1, {}])",
            tape.shape(theta),
            d + 1
        )));
    }
    let diff = tape.sub(h_i, h_j)?;
    let sq = tape.square(diff)?;
    let w = tape.slice(theta, 1, 0, d)?;
    let w = tape.reshape(w, vec![d, 1])?;
    let b = tape.slice(theta, 1, d, 1)?;
    let lin = tape.matmul(sq, w)?;
    tape.add(lin, b)
}

pub fn intensity(tape: &mut Tape, theta: Var, h_i: Var, h_j: Var) -> Result<Var> {
    let z = intensity_logit(tape, theta, h_i, h_j)?;
    tape.sigmoid(z)
}

/// Plain-value intensity for a fixed transfer function.
pub fn intensity_value(theta: &[f64], h_i: &[f64], h_j: &[f64]) -> Result<f64> {
    if theta.len() != h_i.len() + 1 || h_i.len() != h_j.len() {
        return Err(Error::Dimension(format!(
            "transfer function of width {} with embeddings of widths {} and {}",
            theta.len(),
            h_i.len(),
            h_j.len()
        )));
    }
    let d = h_i.len();
    let z: f64 = h_i
        .iter()
        .zip(h_j)
        .zip(&theta[..d])
        .map(|((a, b), w)| (a - b) * (a - b) * w)
        .sum::<f64>()
        + theta[d];
    Ok(sigmoid(z))
}

/// `-log λ_pos - Σ log(1 - λ_neg)` over intensities in `(0, 1)`.
pub fn event_loss(positive: f64, negatives: &[f64]) -> Result<f64> {
    for l in std::iter::once(&positive).chain(negatives) {
        if !(*l > 0.0 && *l < 1.0) {
            return Err(Error::Domain(format!("intensity {l} outside (0, 1)")));
        }
    }
    Ok(-positive.ln() - negatives.iter().map(|l| (1.0 - l).ln()).sum::<f64>())
}

/// Same loss from logits: `softplus(-z_pos) + Σ softplus(z_neg)`.
pub fn event_loss_from_logits(positive: f64, negatives: &[f64]) -> f64 {
    softplus(-positive) + negatives.iter().map(|z| softplus(*z)).sum::<f64>()
}

/// Tape version of [`event_loss_from_logits`] for `[1, 1]` logits.
pub fn event_loss_var(tape: &mut Tape, positive: Var, negatives: &[Var]) -> Result<Var> {
    let np = tape.neg(positive)?;
    let mut loss = tape.softplus(np)?;
    for z in negatives {
        let term = tape.softplus(*z)?;
        loss = tape.add(loss, term)?;
    }
    tape.sum(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(vec![1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn intensity_examples() {
        let mut tape = Tape::new();
        let theta = row(&mut tape, &[1.0, 0.0]);
        let a = row(&mut tape, &[1.0]);
        let b = row(&mut tape, &[1.0]);
        let l = intensity(&mut tape, theta, a, b).unwrap();
        assert_eq!(tape.item(l).unwrap(), 0.5);

        let theta = row(&mut tape, &[1.0, 0.0]);
        let c = row(&mut tape, &[2.0]);
        let d = row(&mut tape, &[0.0]);
        let l = intensity(&mut tape, theta, c, d).unwrap();
        let expect = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((tape.item(l).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.9820).abs() < 1e-4);
        assert_eq!(intensity_value(&[1.0, 0.0], &[2.0], &[0.0]).unwrap(), expect);
    }

    #[test]
    fn intensity_rejects_mismatched_theta() {
        let mut tape = Tape::new();
        let theta = row(&mut tape, &[1.0, 0.0, 0.0]);
        let a = row(&mut tape, &[1.0]);
        assert!(matches!(
            intensity(&mut tape, theta, a, a),
            Err(Error::Dimension(_))
        ));
        assert!(intensity_value(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn event_loss_examples() {
        let l = event_loss(0.5, &[0.5]).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((event_loss_from_logits(0.0, &[0.0]) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(event_loss(0.999999, &[1e-6]).unwrap() < 1e-5);
        assert!(event_loss(1.0, &[0.5]).is_err());
        assert!(event_loss(0.5, &[0.0]).is_err());
    }

    #[test]
    fn zero_generators_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let prior = EventPrior::init(&mut rng, 3);
        let mut tape = Tape::new();
        let film = FilmParams::zeros(3).bind(&mut tape, false);
        let theta_e = tape.leaf(&prior.theta_e, false);
        let hi = row(&mut tape, &[0.3, -1.0, 2.0]);
        let hj = row(&mut tape, &[1.5, 0.2, -0.7]);
        let a = film_adapt(&mut tape, &film, theta_e, hi, hj, 0.01).unwrap();
        assert_eq!(tape.value(a.theta), prior.theta_e.data());
        assert!(tape.value(a.alpha).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn film_matches_manual_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = EventPrior::init(&mut rng, 2);
        let film = FilmParams::init(&mut rng, 2);
        let hi = [0.4, -0.9];
        let hj = [1.1, 0.3];
        let mut tape = Tape::new();
        let bf = film.bind(&mut tape, false);
        let te = tape.leaf(&prior.theta_e, false);
        let vi = row(&mut tape, &hi);
        let vj = row(&mut tape, &hj);
        let a = film_adapt(&mut tape, &bf, te, vi, vj, 0.2).unwrap();

        let cond = [hi[0], hi[1], hj[0], hj[1]];
        let lrelu = |x: f64| if x > 0.0 { x } else { 0.2 * x };
        for c in 0..3 {
            let za: f64 = (0..4).map(|r| cond[r] * film.w_alpha.data()[r * 3 + c]).sum();
            let zb: f64 = (0..4).map(|r| cond[r] * film.w_beta.data()[r * 3 + c]).sum();
            let theta = (lrelu(za) + 1.0) * prior.theta_e.data()[c] + lrelu(zb);
            assert!((tape.value(a.theta)[c] - theta).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn intensity_is_strictly_inside_unit_interval(
            // |logit| stays below 36, where sigmoid is still representable below 1.0
            hi in prop::collection::vec(-1.0f64..1.0, 4),
            hj in prop::collection::vec(-1.0f64..1.0, 4),
            theta in prop::collection::vec(-2.0f64..2.0, 5),
        ) {
            let l = intensity_value(&theta, &hi, &hj).unwrap();
            prop_assert!(l > 0.0 && l < 1.0);
        }

        #[test]
        fn logit_loss_matches_log_form(
            zp in -10.0f64..10.0,
            zn in prop::collection::vec(-10.0f64..10.0, 0..4),
        ) {
            let negs: Vec<f64> = zn.iter().map(|z| sigmoid(*z)).collect();
            let direct = event_loss(sigmoid(zp), &negs).unwrap();
            let stable = event_loss_from_logits(zp, &zn);
            prop_assert!((direct - stable).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }
}
