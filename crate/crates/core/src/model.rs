//! Forward composition: embeddings, intensities, and the joint objective
//!
//! ```text
//! L = Σ_events L_e + η1 · L_n + η2 · (‖α‖² + ‖β‖²)
//! ```
//!
//! where ablation modes drop the terms they do not use.

use crate::autodiff::{sigmoid, Tape, Var};
use crate::config::{Ablation, FilmOrder, NodeLossEndpoints, TrainConfig};
use crate::error::{Error, Result};
use crate::event_dyn::{event_loss_var, film_adapt, intensity_logit};
use crate::node_dyn;
use crate::params::{BoundParams, TrendParams};
use crate::tgnn::Encoder;
use crate::tgraph::{Event, EventStore, NodeId};

/// A training event with the negative partners drawn for its source node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEvent {
    pub event: Event,
    pub negatives: Vec<NodeId>,
}

/// Scalar loss on the tape plus the value of each term before weighting.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub event: f64,
    pub node: f64,
    pub film: f64,
}

/// Logit of the intensity for the pair `(a, b)`. Adapted modes also return
/// the FiLM operators of the pair.
#[allow(clippy::too_many_arguments)]
fn pair_logit(
    tape: &mut Tape,
    bound: &BoundParams,
    config: &TrainConfig,
    a: NodeId,
    b: NodeId,
    h_a: Var,
    h_b: Var,
) -> Result<(Var, Option<(Var, Var)>)> {
    match config.ablation {
        Ablation::Tgnn => {
            let d = tape.shape(h_b)[1];
            let col = tape.reshape(h_b, vec![d, 1])?;
            Ok((tape.matmul(h_a, col)?, None))
        }
        Ablation::TgnnH | Ablation::TgnnHN => {
            Ok((intensity_logit(tape, bound.theta_e, h_a, h_b)?, None))
        }
        Ablation::TgnnHE | Ablation::Full => {
            let (first, second) = match config.film_order {
                FilmOrder::Sorted if b < a => (h_b, h_a),
                _ => (h_a, h_b),
            };
            let ad = film_adapt(
                tape,
                &bound.film,
                bound.theta_e,
                first,
                second,
                config.leaky_slope,
            )?;
            let z = intensity_logit(tape, ad.theta, h_a, h_b)?;
            Ok((z, Some((ad.alpha, ad.beta))))
        }
    }
}

fn accumulate(tape: &mut Tape, acc: &mut Option<Var>, term: Var) -> Result<()> {
    *acc = Some(match *acc {
        None => term,
        Some(a) => tape.add(a, term)?,
    });
    Ok(())
}

/// Joint loss summed over `batch`, built on `tape`. Node-dynamics targets
/// come from `store`, which must be the training view.
pub fn total_loss(
    tape: &mut Tape,
    bound: &BoundParams,
    store: &EventStore,
    batch: &[BatchEvent],
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Contract("total loss of an empty batch".into()));
    }
    let mut enc = Encoder::new(store, config.neighbor_limit);
    let layers = bound.tgnn.layers();
    let mut event_sum = None;
    let mut node_sum = None;
    let mut film_sum = None;

    for item in batch {
        let Event { src, dst, time } = item.event;
        let h_i = enc.embed(tape, &bound.tgnn, src, time, layers)?;
        let h_j = enc.embed(tape, &bound.tgnn, dst, time, layers)?;

        let (z_pos, ops) = pair_logit(tape, bound, config, src, dst, h_i, h_j)?;
        let mut z_neg = Vec::with_capacity(item.negatives.len());
        for &k in &item.negatives {
            let h_k = enc.embed(tape, &bound.tgnn, k, time, layers)?;
            z_neg.push(pair_logit(tape, bound, config, src, k, h_i, h_k)?.0);
        }
        let le = event_loss_var(tape, z_pos, &z_neg)?;
        accumulate(tape, &mut event_sum, le)?;

        if config.ablation.uses_node_loss() {
            let endpoints: &[(NodeId, Var)] = match config.node_loss_endpoints {
                NodeLossEndpoints::Both => &[(src, h_i), (dst, h_j)],
                NodeLossEndpoints::Source => &[(src, h_i)],
            };
            for &(n, h) in endpoints {
                let est = node_dyn::estimate(tape, &bound.node, h)?;
                let truth = store.delta_events_within(n, time, config.dynamics_window);
                let ln = node_dyn::loss(tape, est, truth)?;
                accumulate(tape, &mut node_sum, ln)?;
            }
        }
        if let Some((alpha, beta)) = ops {
            let a2 = tape.square(alpha)?;
            let a2 = tape.sum(a2)?;
            let b2 = tape.square(beta)?;
            let b2 = tape.sum(b2)?;
            let r = tape.add(a2, b2)?;
            accumulate(tape, &mut film_sum, r)?;
        }
    }

    let event_sum = event_sum.expect("non-empty batch");
    let mut total = event_sum;
    let mut node_value = 0.0;
    if let Some(n) = node_sum {
        node_value = tape.item(n)?;
        let weighted = tape.scale(n, config.eta1)?;
        total = tape.add(total, weighted)?;
    }
    let mut film_value = 0.0;
    if let Some(f) = film_sum {
        film_value = tape.item(f)?;
        let weighted = tape.scale(f, config.eta2)?;
        total = tape.add(total, weighted)?;
    }
    Ok(LossBreakdown {
        total,
        event: tape.item(event_sum)?,
        node: node_value,
        film: film_value,
    })
}

/// Loss value and gradients for every parameter tensor, in
/// [`crate::autodiff::ParamTensors`] order.
pub fn loss_and_grads(
    params: &TrendParams,
    store: &EventStore,
    batch: &[BatchEvent],
    config: &TrainConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = total_loss(&mut tape, &bound, store, batch, config)?;
    tape.backward(loss.total)?;
    Ok((tape.item(loss.total)?, bound.grads(&tape)))
}

/// Output-layer embeddings for `(node, time)` queries against `store`,
/// without gradient tracking.
pub fn embed_nodes(
    params: &TrendParams,
    store: &EventStore,
    neighbor_limit: usize,
    queries: &[(NodeId, f64)],
) -> Result<Vec<Vec<f64>>> {
    if store.feature_dim() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "store features have dimension {} but the model expects {}",
            store.feature_dim(),
            params.input_dim()
        )));
    }
    let mut out = Vec::with_capacity(queries.len());
    // a fresh tape per chunk bounds memory on large query sets
    for chunk in queries.chunks(512) {
        let mut tape = Tape::new();
        let bound = params.tgnn.bind(&mut tape, false);
        let mut enc = Encoder::new(store, neighbor_limit);
        for v in enc.embed_batch(&mut tape, &bound, chunk)? {
            out.push(tape.value(v).to_vec());
        }
    }
    Ok(out)
}

/// Intensity of a link between `a` and `b` at `t` under `config.ablation`.
pub fn event_intensity(
    params: &TrendParams,
    store: &EventStore,
    config: &TrainConfig,
    a: NodeId,
    b: NodeId,
    t: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let mut enc = Encoder::new(store, config.neighbor_limit);
    let layers = bound.tgnn.layers();
    let h_a = enc.embed(&mut tape, &bound.tgnn, a, t, layers)?;
    let h_b = enc.embed(&mut tape, &bound.tgnn, b, t, layers)?;
    let (z, _) = pair_logit(&mut tape, &bound, config, a, b, h_a, h_b)?;
    Ok(sigmoid(tape.item(z)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{smooth_l1, softplus};
    use crate::event_dyn::{event_loss, intensity_value};
    use crate::tgnn::decay_weights;
    use crate::tgraph::tests::{toy_events, A, B, C, D, E, T2};
    use crate::tgraph::Features;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(ablation: Ablation) -> TrainConfig {
        TrainConfig {
            hidden_dim: 3,
            out_dim: 2,
            ablation,
            eta1: 0.3,
            eta2: 0.2,
            leaky_slope: 0.1,
            ..TrainConfig::default()
        }
    }

    fn toy() -> EventStore {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = (0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        EventStore::from_events(toy_events(), Some(Features::new(5, 3, data).unwrap())).unwrap()
    }

    fn loss_value(p: &TrendParams, store: &EventStore, batch: &[BatchEvent], c: &TrainConfig) -> f64 {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let l = total_loss(&mut tape, &b, store, batch, c).unwrap();
        tape.item(l.total).unwrap()
    }

    // ----- plain-f64 oracle ---------------------------------------------

    fn row_times(x: &[f64], w: &crate::tensor::Tensor) -> Vec<f64> {
        let (r, c) = (w.shape()[0], w.shape()[1]);
        (0..c)
            .map(|j| (0..r).map(|i| x[i] * w.data()[i * c + j]).sum())
            .collect()
    }

    fn oracle_embed(p: &TrendParams, s: &EventStore, n: NodeId, t: f64, layer: usize) -> Vec<f64> {
        if layer == 0 {
            return s.feature(n).unwrap().to_vec();
        }
        let prev = oracle_embed(p, s, n, t, layer - 1);
        let mut out = row_times(&prev, &p.tgnn.w_self[layer - 1]);
        let hist = s.historical_neighbors(n, t, 10);
        if !hist.is_empty() {
            let w = decay_weights(t, hist, p.tgnn.decay_raw.data()[0], s.time_scale()).unwrap();
            let mut pooled = vec![0.0; prev.len()];
            for ((nb, ts), wk) in hist.iter().zip(&w) {
                let h = oracle_embed(p, s, *nb, *ts, layer - 1);
                pooled.iter_mut().zip(&h).for_each(|(a, b)| *a += wk * b);
            }
            let ht = row_times(&pooled, &p.tgnn.w_hist[layer - 1]);
            out.iter_mut().zip(&ht).for_each(|(a, b)| *a += b);
        }
        if layer < p.layers() {
            out.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        out
    }

    fn oracle_film(p: &TrendParams, hi: &[f64], hj: &[f64], slope: f64) -> (Vec<f64>, f64) {
        let cond: Vec<f64> = hi.iter().chain(hj).copied().collect();
        let lrelu = |x: f64| if x > 0.0 { x } else { slope * x };
        let add = |z: Vec<f64>, b: &[f64]| -> Vec<f64> {
            z.iter().zip(b).map(|(x, y)| lrelu(x + y)).collect()
        };
        let alpha = add(row_times(&cond, &p.film.w_alpha), p.film.b_alpha.data());
        let beta = add(row_times(&cond, &p.film.w_beta), p.film.b_beta.data());
        let theta = p
            .prior
            .theta_e
            .data()
            .iter()
            .zip(&alpha)
            .zip(&beta)
            .map(|((t, a), b)| (a + 1.0) * t + b)
            .collect();
        let reg = alpha.iter().chain(&beta).map(|x| x * x).sum();
        (theta, reg)
    }

    #[test]
    fn single_event_matches_module_oracles() {
        let store = toy();
        let c = small_config(Ablation::Full);
        let mut p = TrendParams::init(&c, 3, 4).unwrap();
        // nonzero biases so every parameter enters the comparison
        p.film.b_alpha.data_mut().copy_from_slice(&[0.1, -0.2, 0.05]);
        p.node.b_n.data_mut()[0] = 0.4;
        let batch = [BatchEvent {
            event: Event::new(C, D, T2),
            negatives: vec![A],
        }];
        let got = loss_value(&p, &store, &batch, &c);

        let hc = oracle_embed(&p, &store, C, T2, 2);
        let hd = oracle_embed(&p, &store, D, T2, 2);
        let ha = oracle_embed(&p, &store, A, T2, 2);
        let (theta_pos, reg) = oracle_film(&p, &hc, &hd, 0.1);
        let (theta_neg, _) = oracle_film(&p, &hc, &ha, 0.1);
        let lp = intensity_value(&theta_pos, &hc, &hd).unwrap();
        let ln = intensity_value(&theta_neg, &hc, &ha).unwrap();
        let le = event_loss(lp, &[ln]).unwrap();
        let est = |h: &[f64]| {
            let z: f64 = h.iter().zip(p.node.w_n.data()).map(|(a, b)| a * b).sum::<f64>()
                + p.node.b_n.data()[0];
            z.max(0.0)
        };
        let node = smooth_l1(est(&hc) - 2.0) + smooth_l1(est(&hd) - 1.0);
        let expect = le + 0.3 * node + 0.2 * reg;
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn toy_node_loss_with_zero_estimator() {
        let store = toy();
        let c = TrainConfig {
            eta1: 1.0,
            ..small_config(Ablation::TgnnHN)
        };
        let mut p = TrendParams::init(&c, 3, 4).unwrap();
        p.node.w_n.fill(0.0);
        let batch = [BatchEvent {
            event: Event::new(C, D, T2),
            negatives: vec![],
        }];
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let l = total_loss(&mut tape, &b, &store, &batch, &c).unwrap();
        assert_eq!(l.node, 2.0);
    }

    #[test]
    fn zero_weights_leave_only_event_loss() {
        let store = toy();
        let c = TrainConfig {
            eta1: 0.0,
            eta2: 0.0,
            ..small_config(Ablation::Full)
        };
        let p = TrendParams::init(&c, 3, 5).unwrap();
        let batch = [
            BatchEvent {
                event: Event::new(B, C, 3.0),
                negatives: vec![E],
            },
            BatchEvent {
                event: Event::new(C, E, T2),
                negatives: vec![A, B],
            },
        ];
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let l = total_loss(&mut tape, &b, &store, &batch, &c).unwrap();
        assert_eq!(tape.item(l.total).unwrap(), l.event);
        assert!(l.node > 0.0 && l.film > 0.0);
    }

    #[test]
    fn zero_film_regularizer_is_zero() {
        let store = toy();
        let c = small_config(Ablation::TgnnHE);
        let mut p = TrendParams::init(&c, 3, 5).unwrap();
        p.zero_film();
        let batch = [BatchEvent {
            event: Event::new(B, C, 3.0),
            negatives: vec![E],
        }];
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        let l = total_loss(&mut tape, &b, &store, &batch, &c).unwrap();
        assert_eq!(l.film, 0.0);
    }

    #[test]
    fn ablation_terms_are_absent() {
        let store = toy();
        let batch = [BatchEvent {
            event: Event::new(B, C, 3.0),
            negatives: vec![E],
        }];
        for a in Ablation::ALL {
            let c = small_config(a);
            let p = TrendParams::init(&c, 3, 6).unwrap();
            let mut tape = Tape::new();
            let b = p.bind(&mut tape, false);
            let l = total_loss(&mut tape, &b, &store, &batch, &c).unwrap();
            assert_eq!(l.node > 0.0, a.uses_node_loss(), "{a}");
            assert_eq!(l.film > 0.0, a.uses_adaptation(), "{a}");
        }
    }

    #[test]
    fn tgnn_mode_uses_inner_product() {
        let store = toy();
        let c = small_config(Ablation::Tgnn);
        let p = TrendParams::init(&c, 3, 6).unwrap();
        let hb = oracle_embed(&p, &store, B, 3.0, 2);
        let hc = oracle_embed(&p, &store, C, 3.0, 2);
        let dot: f64 = hb.iter().zip(&hc).map(|(a, b)| a * b).sum();
        let got = event_intensity(&p, &store, &c, B, C, 3.0).unwrap();
        assert!((got - sigmoid(dot)).abs() < 1e-14);
        let batch = [BatchEvent {
            event: Event::new(B, C, 3.0),
            negatives: vec![],
        }];
        assert!((loss_value(&p, &store, &batch, &c) - softplus(-dot)).abs() < 1e-14);
    }

    #[test]
    fn sorted_film_order_is_symmetric() {
        let store = toy();
        let mut c = small_config(Ablation::Full);
        let p = TrendParams::init(&c, 3, 6).unwrap();
        let fwd = event_intensity(&p, &store, &c, B, C, 3.0).unwrap();
        let rev = event_intensity(&p, &store, &c, C, B, 3.0).unwrap();
        assert_ne!(fwd, rev);
        c.film_order = FilmOrder::Sorted;
        let fwd = event_intensity(&p, &store, &c, B, C, 3.0).unwrap();
        let rev = event_intensity(&p, &store, &c, C, B, 3.0).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let store = toy();
        let c = small_config(Ablation::Full);
        let p = TrendParams::init(&c, 3, 6).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, false);
        assert!(matches!(
            total_loss(&mut tape, &b, &store, &[], &c),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn embed_nodes_matches_oracle_and_checks_dims() {
        let store = toy();
        let c = small_config(Ablation::Full);
        let p = TrendParams::init(&c, 3, 6).unwrap();
        let q = [(C, 3.0), (E, 2.5), (A, 0.5)];
        let got = embed_nodes(&p, &store, 10, &q).unwrap();
        for ((n, t), h) in q.iter().zip(&got) {
            let o = oracle_embed(&p, &store, *n, *t, 2);
            for (x, y) in h.iter().zip(&o) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        let wrong = TrendParams::init(&c, 4, 6).unwrap();
        assert!(matches!(
            embed_nodes(&wrong, &store, 10, &q),
            Err(Error::Dimension(_))
        ));
    }
    fn synthetic_check_case(ablation: Ablation) -> (EventStore, TrainConfig, TrendParams, Vec<BatchEvent>) {
        use crate::autodiff::ParamTensors;
        use crate::tgraph::{synth_hawkes_graph, NegativeSampler, SynthParams};
        let store = synth_hawkes_graph(&SynthParams {
            n_nodes: 5,
            horizon: 10.0,
            base_rate: 0.3,
            excitation: 0.5,
            decay: 1.0,
            seed: 1,
        })
        .unwrap();
        let c = small_config(ablation);
        let mut p = TrendParams::init(&c, store.feature_dim(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..p.tensor_count() {
            for v in p.tensor_mut(i).data_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let sampler = NegativeSampler::new(&store).unwrap();
        let n = store.num_events();
        let batch = crate::trainer::sample_batch(&mut rng, &sampler, &store, &store.events()[n - 4..], 2);
        (store, c, p, batch)
    }

    #[test]
    fn full_loss_gradients_match_finite_differences() {
        for ablation in Ablation::ALL {
            let (store, c, mut p, batch) = synthetic_check_case(ablation);
            let r = crate::autodiff::grad_check(&mut p, 1e-5, |p| loss_and_grads(p, &store, &batch, &c))
                .unwrap();
            assert!(r.max_rel_error < 1e-4, "{ablation}: {:?}", r.worst);
        }
    }

    #[test]
    fn grad_check_catches_a_corrupted_backward_rule() {
        use crate::autodiff::CORRUPT_SOFTPLUS_BACKWARD;
        let (store, c, mut p, batch) = synthetic_check_case(Ablation::Full);
        CORRUPT_SOFTPLUS_BACKWARD.with(|f| f.set(1.5));
        let r = crate::autodiff::grad_check(&mut p, 1e-5, |p| loss_and_grads(p, &store, &batch, &c));
        CORRUPT_SOFTPLUS_BACKWARD.with(|f| f.set(1.0));
        let r = r.unwrap();
        assert!(r.max_rel_error > 0.1, "{}", r.max_rel_error);
        let worst = r.worst_group().unwrap();
        assert!(r.per_tensor.iter().any(|(n, _)| n == worst));
    }
}
