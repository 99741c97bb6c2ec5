use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{EventStore, NodeId};
use crate::error::{Error, Result};

const MAX_REDRAWS: usize = 100;

/// Node distribution `P(v) ∝ deg(v)^{3/4}` over a store's degrees.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    probs: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl NegativeSampler {
    pub fn new(store: &EventStore) -> Result<Self> {
        Self::from_degrees(store.degrees())
    }

    pub fn from_degrees(degrees: &[usize]) -> Result<Self> {
        if degrees.is_empty() {
            return Err(Error::DegenerateData(
                "negative distribution over zero nodes".into(),
            ));
        }
        let mut weights: Vec<f64> = degrees.iter().map(|d| (*d as f64).powf(0.75)).collect();
        let mut total: f64 = weights.iter().sum();
        if total == 0.0 {
            warn!("all node degrees are zero; negative distribution falls back to uniform");
            weights.iter_mut().for_each(|w| *w = 1.0);
            total = weights.len() as f64;
        }
        let probs = weights.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&weights)
            .map_err(|e| Error::DegenerateData(format!("negative distribution: {e}")))?;
        Ok(Self { probs, index })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> NodeId {
        self.index.sample(rng)
    }

    /// Draws `k` such that `(src, k, t)` is not an observed event and
    /// `k != src`. After 100 rejected draws it falls back to a uniform choice
    /// among the nodes that satisfy the constraint; `None` if there is none.
    pub fn draw_negative<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        store: &EventStore,
        src: NodeId,
        t: f64,
    ) -> Option<NodeId> {
        for _ in 0..MAX_REDRAWS {
            let k = self.draw(rng);
            if k != src && !store.is_observed(src, k, t) {
                return Some(k);
            }
        }
        let candidates: Vec<NodeId> = (0..self.probs.len())
            .filter(|k| *k != src && !store.is_observed(src, *k, t))
            .collect();
        if candidates.is_empty() {
            None
        } else {
            Some(candidates[rng.random_range(0..candidates.len())])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tgraph::Event;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degree_power_three_quarters() {
        let s = NegativeSampler::from_degrees(&[1, 16]).unwrap();
        let p = s.probabilities();
        assert!((p[0] - 1.0 / 9.0).abs() < 1e-15);
        assert!((p[1] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn equal_degrees_are_uniform() {
        let s = NegativeSampler::from_degrees(&[3, 3, 3, 3]).unwrap();
        assert!(s.probabilities().iter().all(|p| (*p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_degrees_fall_back_to_uniform() {
        let s = NegativeSampler::from_degrees(&[0, 0]).unwrap();
        assert_eq!(s.probabilities(), &[0.5, 0.5]);
        assert!(NegativeSampler::from_degrees(&[]).is_err());
    }

    #[test]
    fn guard_rejects_observed_partners() {
        // node 0 linked to 1 and 2 at t=1; only 3 is a valid negative
        let events = vec![
            Event::new(0, 1, 1.0),
            Event::new(0, 2, 1.0),
            Event::new(1, 2, 0.5),
            Event::new(3, 1, 0.5),
        ];
        let store = EventStore::from_events(events, None).unwrap();
        let s = NegativeSampler::new(&store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert_eq!(s.draw_negative(&mut rng, &store, 0, 1.0), Some(3));
        }
    }

    #[test]
    fn fallback_when_weighted_draws_keep_failing() {
        // only node 1 carries weight, and it is observed with 0 at t=1
        let events = vec![Event::new(0, 1, 1.0)];
        let mut store = EventStore::from_events(events, None).unwrap();
        store = store
            .with_events(&[])
            .unwrap();
        let s = NegativeSampler::from_degrees(&[0, 1, 0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(s.draw_negative(&mut rng, &store, 0, 1.0), Some(2));
        let tiny = NegativeSampler::from_degrees(&[1, 1]).unwrap();
        assert_eq!(tiny.draw_negative(&mut rng, &store, 0, 1.0), None);
    }
}
