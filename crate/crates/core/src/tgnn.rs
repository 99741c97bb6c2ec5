//! Temporal GNN encoder.
//!
//! Layer `l` of node `i` at time `t` combines the node's own layer `l-1`
//! representation with its historical neighbors' layer `l-1` representations,
//! each taken at the neighbor's event time `t'` and weighted by the
//! normalized exponential decay `exp(-δ(t-t')) / Σ exp(-δ(t-t''))`:
//!
//! ```text
//! h_i^{t,l} = σ( h_i^{t,l-1} W_self^l + Σ_{(j',t') ∈ H_i(t)} w(t-t') h_{j'}^{t',l-1} W_hist^l )
//! ```
//!
//! `σ` is ReLU on hidden layers and identity on the output layer. The decay
//! rate is `δ = softplus(decay_raw)`, which keeps it positive.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{scaled_uniform, Tensor};
use crate::tgraph::{EventStore, NodeId, TimeScale};

/// `softplus^{-1}(1)`: the raw decay that gives `δ = 1` at initialization.
pub const UNIT_DECAY_RAW: f64 = 0.541_324_854_612_918_1;

#[derive(Debug, Clone, PartialEq)]
pub struct TgnnParams {
    pub w_self: Vec<Tensor>,
    pub w_hist: Vec<Tensor>,
    /// Shape `[1]` (shared) or `[layers]` (one rate per layer).
    pub decay_raw: Tensor,
}

impl TgnnParams {
    pub fn init<R: Rng>(rng: &mut R, dims: &[usize], per_layer_decay: bool) -> Self {
        let mut w_self = Vec::new();
        let mut w_hist = Vec::new();
        for pair in dims.windows(2) {
            w_self.push(scaled_uniform(rng, vec![pair[0], pair[1]], pair[0]));
            w_hist.push(scaled_uniform(rng, vec![pair[0], pair[1]], pair[0]));
        }
        let n_decay = if per_layer_decay { dims.len() - 1 } else { 1 };
        let decay_raw = Tensor::new(vec![n_decay], vec![UNIT_DECAY_RAW; n_decay])
            .expect("decay shape");
        Self {
            w_self,
            w_hist,
            decay_raw,
        }
    }

    pub fn layers(&self) -> usize {
        self.w_self.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_self[0].shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.w_self[self.layers() - 1].shape()[1]
    }

    /// Positive decay rate used by `layer` (1-based).
    pub fn decay(&self, layer: usize) -> f64 {
        let d = self.decay_raw.data();
        softplus(if d.len() == 1 { d[0] } else { d[layer - 1] })
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundTgnn {
        BoundTgnn {
            w_self: self.w_self.iter().map(|w| tape.leaf(w, requires_grad)).collect(),
            w_hist: self.w_hist.iter().map(|w| tape.leaf(w, requires_grad)).collect(),
            decay_raw: tape.leaf(&self.decay_raw, requires_grad),
            per_layer: self.decay_raw.len() > 1,
        }
    }
}

/// [`TgnnParams`] placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundTgnn {
    pub w_self: Vec<Var>,
    pub w_hist: Vec<Var>,
    pub decay_raw: Var,
    per_layer: bool,
}

impl BoundTgnn {
    pub fn layers(&self) -> usize {
        self.w_self.len()
    }
}

/// Time-decay kernel `exp(-softplus(decay_raw) * dt)`.
pub fn kernel(dt: f64, decay_raw: f64) -> Result<f64> {
    if dt.is_nan() || dt < 0.0 {
        return Err(Error::Contract(format!(
            "kernel evaluated at negative lag {dt}: future events cannot excite the past"
        )));
    }
    Ok((-softplus(decay_raw) * dt).exp())
}

/// Differentiable kernel on a tape; `decay_raw` is a scalar var.
pub fn kernel_var(tape: &mut Tape, dt: f64, decay_raw: Var) -> Result<Var> {
    if dt.is_nan() || dt < 0.0 {
        return Err(Error::Contract(format!("kernel evaluated at negative lag {dt}")));
    }
    let delta = tape.softplus(decay_raw)?;
    let x = tape.scale(delta, -dt)?;
    tape.exp(x)
}

/// Normalized decay weights of `hist` seen from time `t`, with lags measured
/// in the model time units of `scale`.
pub fn decay_weights(
    t: f64,
    hist: &[(NodeId, f64)],
    decay_raw: f64,
    scale: TimeScale,
) -> Result<Vec<f64>> {
    if hist.is_empty() {
        return Err(Error::Contract("decay weights of an empty history".into()));
    }
    if let Some((_, late)) = hist.iter().find(|(_, s)| s.partial_cmp(&t) != Some(std::cmp::Ordering::Less)) {
        return Err(Error::Contract(format!(
            "history entry at {late} is not before query time {t}"
        )));
    }
    let delta = softplus(decay_raw);
    let logits: Vec<f64> = hist
        .iter()
        .map(|(_, s)| -delta * scale.interval(t - s))
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let k: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = k.iter().sum();
    Ok(k.into_iter().map(|x| x / total).collect())
}

/// Builds node embeddings on a tape, memoizing every `(node, time, layer)`
/// representation so shared subtrees are computed once per tape.
pub struct Encoder<'s> {
    store: &'s EventStore,
    limit: usize,
    cache: HashMap<(NodeId, u64, usize), Var>,
    deltas: HashMap<usize, Var>,
}

impl<'s> Encoder<'s> {
    pub fn new(store: &'s EventStore, limit: usize) -> Self {
        Self {
            store,
            limit,
            cache: HashMap::new(),
            deltas: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s EventStore {
        self.store
    }

    fn delta(&mut self, tape: &mut Tape, p: &BoundTgnn, layer: usize) -> Result<Var> {
        let key = if p.per_layer { layer } else { 0 };
        if let Some(v) = self.deltas.get(&key) {
            return Ok(*v);
        }
        let raw = if p.per_layer {
            tape.slice(p.decay_raw, 0, layer - 1, 1)?
        } else {
            p.decay_raw
        };
        let d = tape.softplus(raw)?;
        self.deltas.insert(key, d);
        Ok(d)
    }

    /// Representation of `node` at time `t` after `layer` layers, shape `[1, d_layer]`.
    pub fn embed(
        &mut self,
        tape: &mut Tape,
        p: &BoundTgnn,
        node: NodeId,
        t: f64,
        layer: usize,
    ) -> Result<Var> {
        if layer > p.layers() {
            return Err(Error::Contract(format!(
                "layer {layer} requested from a {}-layer encoder",
                p.layers()
            )));
        }
        let key = (node, if layer == 0 { 0 } else { t.to_bits() }, layer);
        if let Some(v) = self.cache.get(&key) {
            return Ok(*v);
        }
        let out = if layer == 0 {
            let row = self.store.feature(node)?;
            tape.constant(vec![1, row.len()], row.to_vec())?
        } else {
            let prev = self.embed(tape, p, node, t, layer - 1)?;
            let self_term = tape.matmul(prev, p.w_self[layer - 1])?;
            let hist = self.store.historical_neighbors(node, t, self.limit);
            let pre = if hist.is_empty() {
                self_term
            } else {
                let mut reps = Vec::with_capacity(hist.len());
                for &(nb, s) in hist {
                    reps.push(self.embed(tape, p, nb, s, layer - 1)?);
                }
                let stacked = tape.concat_many(&reps, 0)?;
                let scale = self.store.time_scale();
                let lags: Vec<f64> = hist.iter().map(|(_, s)| scale.interval(t - s)).collect();
                let lags = tape.constant(vec![1, lags.len()], lags)?;
                let delta = self.delta(tape, p, layer)?;
                let scaled = tape.mul(lags, delta)?;
                let logits = tape.neg(scaled)?;
                let weights = tape.softmax(logits)?;
                let pooled = tape.matmul(weights, stacked)?;
                let hist_term = tape.matmul(pooled, p.w_hist[layer - 1])?;
                tape.add(self_term, hist_term)?
            };
            if layer < p.layers() {
                tape.relu(pre)?
            } else {
                pre
            }
        };
        self.cache.insert(key, out);
        Ok(out)
    }

    /// Output-layer embeddings for each `(node, time)` query.
    pub fn embed_batch(
        &mut self,
        tape: &mut Tape,
        p: &BoundTgnn,
        queries: &[(NodeId, f64)],
    ) -> Result<Vec<Var>> {
        queries
            .iter()
            .map(|&(n, t)| self.embed(tape, p, n, t, p.layers()))
            .collect()
    }
}
