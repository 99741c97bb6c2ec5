//! Temporal graph network with Hawkes-process event intensities, event-level
//! adaptation of the transfer function, and a node-dynamics objective.

pub mod adam;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod event_dyn;
pub mod model;
pub mod node_dyn;
pub mod params;
pub mod tensor;
pub mod tgnn;
pub mod tgraph;
pub mod trainer;

pub use config::{Ablation, FilmOrder, NodeLossEndpoints, TrainConfig};
pub use error::{Error, Result};
pub use params::TrendParams;
pub use tensor::Tensor;
