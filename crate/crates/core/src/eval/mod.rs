//! Downstream evaluation of learned embeddings: temporal link prediction
//! with logistic regression on `|h_i - h_j|`, and node-dynamics prediction
//! with linear regression.
//!
//! Embeddings for test-time queries are computed against the training view
//! only, so test events never leak into the representations.

mod linreg;
mod logreg;
mod report;

use std::collections::{BTreeSet, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use linreg::{mean_absolute_error, LinReg, RIDGE};
pub use logreg::{LogReg, Standardizer, GRAD_TOL};
pub use report::{t_multiplier, Confusion, MetricsReport, Summary};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::embed_nodes;
use crate::params::TrendParams;
use crate::tgraph::{Event, EventStore, NodeId};

pub const DEFAULT_SPLITS: usize = 5;
pub const LOGREG_L2: f64 = 1e-3;
pub const LOGREG_MAX_ITER: usize = 5000;
const NEGATIVE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LinkExample {
    pub feature: Vec<f64>,
    pub label: bool,
}

/// Elementwise `|a - b|`.
pub fn pair_feature(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect()
}

fn pair_key(a: NodeId, b: NodeId, t: f64) -> (NodeId, NodeId, u64) {
    (a.min(b), a.max(b), t.to_bits())
}

/// Link-prediction examples and the number of test events skipped.
#[derive(Debug, Clone)]
pub struct LinkDataset {
    pub examples: Vec<LinkExample>,
    /// Positive/negative node pairs with their times, parallel to `examples`.
    pub pairs: Vec<(NodeId, NodeId, f64)>,
    pub skipped: usize,
}

/// One positive example per test event and one negative per positive. The
/// negative pair is drawn uniformly from nodes active in the test events and
/// never forms a test link at that time.
pub fn build_link_dataset(
    test_events: &[Event],
    params: &TrendParams,
    train_view: &EventStore,
    neighbor_limit: usize,
    seed: u64,
) -> Result<LinkDataset> {
    let active: Vec<NodeId> = test_events
        .iter()
        .flat_map(|e| [e.src, e.dst])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let positives: HashSet<_> = test_events
        .iter()
        .map(|e| pair_key(e.src, e.dst, e.time))
        .collect();
    let has_features = |n: NodeId| train_view.feature(n).is_ok();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(2 * test_events.len());
    let mut skipped = 0;
    for e in test_events {
        if !has_features(e.src) || !has_features(e.dst) || active.len() < 2 {
            skipped += 1;
            continue;
        }
        let neg = (0..NEGATIVE_ATTEMPTS).find_map(|_| {
            let a = active[rng.random_range(0..active.len())];
            let b = active[rng.random_range(0..active.len())];
            let ok = a != b
                && has_features(a)
                && has_features(b)
                && !positives.contains(&pair_key(a, b, e.time));
            ok.then_some((a, b))
        });
        match neg {
            Some((a, b)) => {
                pairs.push((e.src, e.dst, e.time));
                pairs.push((a, b, e.time));
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} test events without features or a valid negative pair");
    }
    let queries: Vec<(NodeId, f64)> = pairs
        .iter()
        .flat_map(|&(a, b, t)| [(a, t), (b, t)])
        .collect();
    let emb = embed_nodes(params, train_view, neighbor_limit, &queries)?;
    let examples = emb
        .chunks(2)
        .enumerate()
        .map(|(k, h)| LinkExample {
            feature: pair_feature(&h[0], &h[1]),
            label: k % 2 == 0,
        })
        .collect();
    Ok(LinkDataset {
        examples,
        pairs,
        skipped,
    })
}

/// Seeded 80/20 partition of `0..n`.
pub fn split_indices(n: usize, seed: u64, split: usize) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 + 1);
    idx.shuffle(&mut rng);
    let cut = (n * 4).div_ceil(5);
    let test = idx.split_off(cut);
    (idx, test)
}

/// Accuracy and F1 over `splits` seeded 80/20 splits of `examples`.
pub fn score_link_examples(
    examples: &[LinkExample],
    splits: usize,
    seed: u64,
) -> Result<(Summary, Summary)> {
    if splits == 0 {
        return Err(Error::Config("at least one evaluation split is required".into()));
    }
    let mut acc = Vec::with_capacity(splits);
    let mut f1 = Vec::with_capacity(splits);
    for s in 0..splits {
        let (tr, te) = split_indices(examples.len(), seed, s);
        if te.is_empty() {
            return Err(Error::DegenerateData("too few link examples to split".into()));
        }
        let raw: Vec<Vec<f64>> = tr.iter().map(|&i| examples[i].feature.clone()).collect();
        let std = Standardizer::fit(&raw);
        let x: Vec<Vec<f64>> = raw.iter().map(|r| std.apply(r)).collect();
        let y: Vec<bool> = tr.iter().map(|&i| examples[i].label).collect();
        let model = LogReg::fit(&x, &y, LOGREG_L2, LOGREG_MAX_ITER)?;
        let pred: Vec<bool> = te
            .iter()
            .map(|&i| model.predict(&std.apply(&examples[i].feature)))
            .collect();
        let truth: Vec<bool> = te.iter().map(|&i| examples[i].label).collect();
        let c = Confusion::from_predictions(&pred, &truth);
        acc.push(c.accuracy());
        f1.push(c.f1());
    }
    Ok((Summary::new(acc), Summary::new(f1)))
}

/// Temporal link prediction on the events of `store` after `t_tr`.
pub fn eval_link(
    params: &TrendParams,
    config: &TrainConfig,
    store: &EventStore,
    t_tr: f64,
    splits: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let (train_view, test) = store.split(t_tr)?;
    if test.is_empty() {
        return Err(Error::DegenerateData(format!("no test events after t_tr = {t_tr}")));
    }
    if test.len() < 10 {
        warn!("only {} test events; confidence intervals are unreliable", test.len());
    }
    let data = build_link_dataset(&test, params, &train_view, config.neighbor_limit, seed)?;
    let (accuracy, f1) = score_link_examples(&data.examples, splits, seed)?;
    Ok(MetricsReport {
        task: "link".into(),
        examples: data.examples.len(),
        skipped: data.skipped,
        accuracy: Some(accuracy),
        f1: Some(f1),
        mae: None,
    })
}

/// Node-dynamics regression: for every `(node, time)` endpoint of a test
/// event, predict the node's event count at that time from its embedding.
/// Each split holds out 20% of the nodes.
pub fn eval_node_dynamics(
    params: &TrendParams,
    config: &TrainConfig,
    store: &EventStore,
    t_tr: f64,
    splits: usize,
    seed: u64,
) -> Result<MetricsReport> {
    if splits == 0 {
        return Err(Error::Config("at least one evaluation split is required".into()));
    }
    let (train_view, test) = store.split(t_tr)?;
    let endpoints: Vec<(NodeId, f64)> = test
        .iter()
        .flat_map(|e| [(e.src, e.time), (e.dst, e.time)])
        .collect();
    let usable: BTreeSet<(NodeId, u64)> = endpoints
        .iter()
        .filter(|(n, _)| train_view.feature(*n).is_ok())
        .map(|(n, t)| (*n, t.to_bits()))
        .collect();
    let skipped = endpoints
        .iter()
        .filter(|(n, _)| train_view.feature(*n).is_err())
        .count();
    let queries: Vec<(NodeId, f64)> = usable
        .into_iter()
        .map(|(n, t)| (n, f64::from_bits(t)))
        .collect();
    let nodes: Vec<NodeId> = queries
        .iter()
        .map(|q| q.0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if nodes.len() < 2 {
        return Err(Error::DegenerateData(
            "node-dynamics evaluation needs at least two test nodes".into(),
        ));
    }
    let emb = embed_nodes(params, &train_view, config.neighbor_limit, &queries)?;
    let truth: Vec<f64> = queries
        .iter()
        .map(|&(n, t)| store.delta_events_within(n, t, config.dynamics_window) as f64)
        .collect();

    let mut maes = Vec::with_capacity(splits);
    for s in 0..splits {
        let (tr_nodes, te_nodes) = split_indices(nodes.len(), seed, s);
        let held: HashSet<NodeId> = te_nodes.iter().map(|&i| nodes[i]).collect();
        debug_assert_eq!(tr_nodes.len() + held.len(), nodes.len());
        let (mut xtr, mut ytr, mut xte, mut yte) = (vec![], vec![], vec![], vec![]);
        for (k, (n, _)) in queries.iter().enumerate() {
            if held.contains(n) {
                xte.push(emb[k].clone());
                yte.push(truth[k]);
            } else {
                xtr.push(emb[k].clone());
                ytr.push(truth[k]);
            }
        }
        let model = LinReg::fit(&xtr, &ytr)?;
        let pred: Vec<f64> = xte.iter().map(|r| model.predict(r)).collect();
        maes.push(mean_absolute_error(&pred, &yte));
    }
    Ok(MetricsReport {
        task: "node".into(),
        examples: queries.len(),
        skipped,
        accuracy: None,
        f1: None,
        mae: Some(Summary::new(maes)),
    })
}
