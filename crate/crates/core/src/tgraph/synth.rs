//! Planted-community Hawkes graph generator, used as a test oracle and for
//! desk-scale experiments.
//!
//! Every unordered pair `(i, j)` runs an independent Hawkes process with
//! exponential kernel
//!
//! ```text
//! λ_ij(t) = μ + Σ_{s < t, s event of (i,j)} a_ij · exp(−decay · (t − s))
//! ```
//!
//! where `a_ij = excitation` when `i` and `j` share a community and 0
//! otherwise. Nodes alternate between two communities; each node's feature is
//! its 2-d community indicator plus Gaussian noise.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};

use super::{Event, EventStore, Features};
use crate::error::{Error, Result};

pub const FEATURE_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub n_nodes: usize,
    pub horizon: f64,
    pub base_rate: f64,
    pub excitation: f64,
    pub decay: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::Config(format!("n_nodes = {} must be at least 2", self.n_nodes)));
        }
        for (name, v) in [
            ("horizon", self.horizon),
            ("base_rate", self.base_rate),
            ("decay", self.decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.excitation >= 0.0 && self.excitation < self.decay) {
            return Err(Error::Config(format!(
                "excitation = {} must lie in [0, decay = {}) for a stationary process",
                self.excitation, self.decay
            )));
        }
        Ok(())
    }
}

pub fn community(node: usize) -> usize {
    node % 2
}

/// Ogata thinning for one pair. Between events the intensity only decays,
/// so its value right after the last point bounds it until the next one.
fn simulate_pair<R: Rng>(
    rng: &mut R,
    mu: f64,
    alpha: f64,
    decay: f64,
    horizon: f64,
    out: &mut Vec<f64>,
) {
    let mut t = 0.0;
    let mut excite = 0.0;
    loop {
        let bound = mu + excite;
        let w: f64 = Exp1.sample(rng);
        let w = w / bound;
        t += w;
        if t > horizon {
            break;
        }
        excite *= (-decay * w).exp();
        let u: f64 = rng.random();
        if u * bound <= mu + excite {
            out.push(t);
            excite += alpha;
        }
    }
}

pub fn synth_hawkes_graph(p: &SynthParams) -> Result<EventStore> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut events = Vec::new();
    let mut times = Vec::new();
    for i in 0..p.n_nodes {
        for j in i + 1..p.n_nodes {
            let alpha = if community(i) == community(j) {
                p.excitation
            } else {
                0.0
            };
            times.clear();
            simulate_pair(&mut rng, p.base_rate, alpha, p.decay, p.horizon, &mut times);
            for &t in &times {
                let (src, dst) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
                events.push(Event { src, dst, time: t });
            }
        }
    }
    let noise = Normal::new(0.0, FEATURE_NOISE).expect("valid normal");
    let mut data = Vec::with_capacity(2 * p.n_nodes);
    for i in 0..p.n_nodes {
        let c = community(i);
        data.push(if c == 0 { 1.0 } else { 0.0 } + noise.sample(&mut rng));
        data.push(if c == 1 { 1.0 } else { 0.0 } + noise.sample(&mut rng));
    }
    let features = Features::new(p.n_nodes, 2, data)?;
    EventStore::from_events(events, Some(features))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(excitation: f64, seed: u64) -> SynthParams {
        SynthParams {
            n_nodes: 6,
            horizon: 10.0,
            base_rate: 0.2,
            excitation,
            decay: 1.0,
            seed,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_hawkes_graph(&params(0.5, 3)).unwrap();
        let b = synth_hawkes_graph(&params(0.5, 3)).unwrap();
        assert_eq!(a.events(), b.events());
        assert_eq!(a.features(), b.features());
        let c = synth_hawkes_graph(&params(0.5, 4)).unwrap();
        assert_ne!(a.events(), c.events());
    }

    #[test]
    fn poisson_counts_without_excitation() {
        // 15 pairs, each Poisson(0.2 * 10 = 2): total ~ Poisson(30)
        let runs = 200;
        let mean_rate = 15.0 * 0.2 * 10.0;
        let total: usize = (0..runs)
            .map(|s| synth_hawkes_graph(&params(0.0, s)).unwrap().num_events())
            .sum();
        let mean = total as f64 / runs as f64;
        let sigma = (mean_rate / runs as f64).sqrt();
        assert!((mean - mean_rate).abs() < 3.0 * sigma, "mean {mean} vs {mean_rate}");
    }

    #[test]
    fn excitation_increases_event_counts() {
        let (mut base, mut excited) = (0, 0);
        for s in 0..50 {
            base += synth_hawkes_graph(&params(0.0, s)).unwrap().num_events();
            excited += synth_hawkes_graph(&params(0.6, s)).unwrap().num_events();
        }
        assert!(excited > base, "{excited} <= {base}");
    }

    #[test]
    fn rejects_invalid_parameters() {
        let mut p = params(1.0, 0);
        assert!(matches!(synth_hawkes_graph(&p), Err(Error::Config(_))));
        p.excitation = 0.5;
        p.base_rate = 0.0;
        assert!(matches!(synth_hawkes_graph(&p), Err(Error::Config(_))));
    }

    #[test]
    fn features_mark_communities() {
        let s = synth_hawkes_graph(&params(0.5, 9)).unwrap();
        for n in 0..6 {
            let f = s.feature(n).unwrap();
            assert_eq!(f[0] > f[1], community(n) == 0);
        }
    }
}
