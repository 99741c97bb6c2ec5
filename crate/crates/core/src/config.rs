use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Temporal GNN only; intensity is the sigmoid of the embedding inner product.
    Tgnn,
    /// Adds the global transfer function.
    TgnnH,
    /// Global transfer function adapted per event (FiLM).
    TgnnHE,
    /// Global transfer function plus the node-dynamics loss.
    TgnnHN,
    /// Adapted transfer function plus node-dynamics loss.
    #[default]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Tgnn,
        Ablation::TgnnH,
        Ablation::TgnnHE,
        Ablation::TgnnHN,
        Ablation::Full,
    ];

    pub fn uses_transfer_function(self) -> bool {
        self != Ablation::Tgnn
    }

    pub fn uses_adaptation(self) -> bool {
        matches!(self, Ablation::TgnnHE | Ablation::Full)
    }

    pub fn uses_node_loss(self) -> bool {
        matches!(self, Ablation::TgnnHN | Ablation::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Tgnn => "tgnn",
            Ablation::TgnnH => "tgnn_h",
            Ablation::TgnnHE => "tgnn_h_e",
            Ablation::TgnnHN => "tgnn_h_n",
            Ablation::Full => "full",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation {s:?}; expected one of tgnn, tgnn_h, tgnn_h_e, tgnn_h_n, full"
                ))
            })
    }
}

/// Endpoint order of the FiLM conditioning input `h_i ∥ h_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilmOrder {
    /// Source then destination, as recorded in the event.
    #[default]
    Event,
    /// Smaller node id first.
    Sorted,
}

/// Which endpoints of an event contribute a node-dynamics term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NodeLossEndpoints {
    #[default]
    Both,
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub layers: usize,
    pub neighbor_limit: usize,
    /// Negative samples per positive event.
    pub negatives: usize,
    /// Node-dynamics loss weight.
    pub eta1: f64,
    /// L2 weight on the FiLM scaling/shifting operators.
    pub eta2: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub leaky_slope: f64,
    pub per_layer_decay: bool,
    pub film_order: FilmOrder,
    pub node_loss_endpoints: NodeLossEndpoints,
    /// Half-width of the window used to count new events on a node; 0 counts
    /// exact timestamps only.
    pub dynamics_window: f64,
    /// Keep the FiLM generator parameters at their initial values.
    pub freeze_film: bool,
    pub early_stop_patience: usize,
    pub early_stop_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            out_dim: 32,
            layers: 2,
            neighbor_limit: 10,
            negatives: 1,
            eta1: 0.01,
            eta2: 0.001,
            lr: 0.001,
            batch_size: 128,
            epochs: 50,
            seed: 0,
            ablation: Ablation::Full,
            leaky_slope: 0.01,
            per_layer_decay: false,
            film_order: FilmOrder::Event,
            node_loss_endpoints: NodeLossEndpoints::Both,
            dynamics_window: 0.0,
            freeze_film: false,
            early_stop_patience: 5,
            early_stop_tolerance: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("out_dim", self.out_dim),
            ("layers", self.layers),
            ("neighbor_limit", self.neighbor_limit),
            ("negatives", self.negatives),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, v) in [
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("dynamics_window", self.dynamics_window),
            ("early_stop_tolerance", self.early_stop_tolerance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a non-negative number")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    /// Layer widths `[d0, hidden, ..., out]`.
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.layers - 1));
        dims.push(self.out_dim);
        dims
    }

    /// Effective node-loss weight under the current ablation.
    pub fn node_weight(&self) -> f64 {
        if self.ablation.uses_node_loss() {
            self.eta1
        } else {
            0.0
        }
    }

    /// Effective FiLM regularizer weight under the current ablation.
    pub fn film_weight(&self) -> f64 {
        if self.ablation.uses_adaptation() {
            self.eta2
        } else {
            0.0
        }
    }
}
