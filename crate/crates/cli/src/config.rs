//! Run configuration: a TOML file with `[data]`, `[train]`, `[eval]` and
//! `[synth]` sections, overlaid by command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use trend_core::tgraph::SynthParams;
use trend_core::{Error, Result, TrainConfig};

pub const OUT_DIR_ENV: &str = "TREND_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub events: Option<PathBuf>,
    pub features: Option<PathBuf>,
    /// Fraction of events (in time order) used for training.
    pub split_fraction: f64,
    /// Absolute split time; takes precedence over `split_fraction`.
    pub split_time: Option<f64>,
    pub output_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            events: None,
            features: None,
            split_fraction: 0.8,
            split_time: None,
            output_dir: PathBuf::from("trend-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub splits: usize,
    pub eval_seed: u64,
    /// Defaults to `checkpoint.txt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    /// Events in the frozen batch used by `grad-check`.
    pub check_events: usize,
    pub check_step: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            splits: trend_core::eval::DEFAULT_SPLITS,
            eval_seed: 0,
            checkpoint: None,
            check_events: 8,
            check_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub nodes: usize,
    pub horizon: f64,
    pub base_rate: f64,
    pub excitation: f64,
    pub decay: f64,
    pub synth_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 100,
            horizon: 100.0,
            base_rate: 0.002,
            excitation: 0.9,
            decay: 1.0,
            synth_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn params(&self) -> SynthParams {
        SynthParams {
            n_nodes: self.nodes,
            horizon: self.horizon,
            base_rate: self.base_rate,
            excitation: self.excitation,
            decay: self.decay,
            seed: self.synth_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

/// One flag per config key. Unset flags leave the file value in place.
#[derive(Debug, Clone, Default, Args, Serialize)]
pub struct Overrides {
    // [data]
    #[arg(long, help_heading = "Data")]
    pub events: Option<PathBuf>,
    #[arg(long, help_heading = "Data")]
    pub features: Option<PathBuf>,
    #[arg(long, help_heading = "Data")]
    pub split_fraction: Option<f64>,
    #[arg(long, help_heading = "Data")]
    pub split_time: Option<f64>,
    #[arg(long, help_heading = "Data")]
    pub output_dir: Option<PathBuf>,

    // [train]
    #[arg(long, help_heading = "Model and training")]
    pub hidden_dim: Option<usize>,
    #[arg(long, help_heading = "Model and training")]
    pub out_dim: Option<usize>,
    #[arg(long, help_heading = "Model and training")]
    pub layers: Option<usize>,
    #[arg(long, help_heading = "Model and training")]
    pub neighbor_limit: Option<usize>,
    #[arg(long, help_heading = "Model and training")]
    pub negatives: Option<usize>,
    #[arg(long, help_heading = "Model and training")]
    pub eta1: Option<f64>,
    #[arg(long, help_heading = "Model and training")]
    pub eta2: Option<f64>,
    #[arg(long, help_heading = "Model and training")]
    pub lr: Option<f64>,
    #[arg(long, help_heading = "Model and training")]
    pub batch_size: Option<usize>,
    #[arg(long, help_heading = "Model and training")]
    pub epochs: Option<usize>,
    #[arg(long, help_heading = "Model and training")]
    pub seed: Option<u64>,
    /// tgnn, tgnn_h, tgnn_h_e, tgnn_h_n or full
    #[arg(long, help_heading = "Model and training")]
    pub ablation: Option<String>,
    #[arg(long, help_heading = "Model and training")]
    pub leaky_slope: Option<f64>,
    #[arg(long, help_heading = "Model and training")]
    pub per_layer_decay: Option<bool>,
    /// event or sorted
    #[arg(long, help_heading = "Model and training")]
    pub film_order: Option<String>,
    /// both or source
    #[arg(long, help_heading = "Model and training")]
    pub node_loss_endpoints: Option<String>,
    #[arg(long, help_heading = "Model and training")]
    pub dynamics_window: Option<f64>,
    #[arg(long, help_heading = "Model and training")]
    pub freeze_film: Option<bool>,
    #[arg(long, help_heading = "Model and training")]
    pub early_stop_patience: Option<usize>,
    #[arg(long, help_heading = "Model and training")]
    pub early_stop_tolerance: Option<f64>,

    // [eval]
    #[arg(long, help_heading = "Evaluation")]
    pub splits: Option<usize>,
    #[arg(long, help_heading = "Evaluation")]
    pub eval_seed: Option<u64>,
    #[arg(long, help_heading = "Evaluation")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, help_heading = "Evaluation")]
    pub check_events: Option<usize>,
    #[arg(long, help_heading = "Evaluation")]
    pub check_step: Option<f64>,

    // [synth]
    #[arg(long, help_heading = "Synthetic graph")]
    pub nodes: Option<usize>,
    #[arg(long, help_heading = "Synthetic graph")]
    pub horizon: Option<f64>,
    #[arg(long, help_heading = "Synthetic graph")]
    pub base_rate: Option<f64>,
    #[arg(long, help_heading = "Synthetic graph")]
    pub excitation: Option<f64>,
    #[arg(long, help_heading = "Synthetic graph")]
    pub decay: Option<f64>,
    #[arg(long, help_heading = "Synthetic graph")]
    pub synth_seed: Option<u64>,
}

const SECTIONS: [(&str, &[&str]); 4] = [
    ("data", &["events", "features", "split_fraction", "split_time", "output_dir"]),
    (
        "train",
        &[
            "hidden_dim",
            "out_dim",
            "layers",
            "neighbor_limit",
            "negatives",
            "eta1",
            "eta2",
            "lr",
            "batch_size",
            "epochs",
            "seed",
            "ablation",
            "leaky_slope",
            "per_layer_decay",
            "film_order",
            "node_loss_endpoints",
            "dynamics_window",
            "freeze_film",
            "early_stop_patience",
            "early_stop_tolerance",
        ],
    ),
    ("eval", &["splits", "eval_seed", "checkpoint", "check_events", "check_step"]),
    ("synth", &["nodes", "horizon", "base_rate", "excitation", "decay", "synth_seed"]),
];

fn section_of(key: &str) -> &'static str {
    SECTIONS
        .iter()
        .find(|(_, keys)| keys.contains(&key))
        .map(|(s, _)| *s)
        .expect("every override belongs to a section")
}

const PATH_KEYS: [(&str, &str); 4] = [
    ("data", "events"),
    ("data", "features"),
    ("data", "output_dir"),
    ("eval", "checkpoint"),
];

/// Makes relative paths written in a config file relative to that file.
fn anchor_paths(table: &mut toml::Table, base: &Path) {
    for (section, key) in PATH_KEYS {
        let Some(toml::Value::Table(s)) = table.get_mut(section) else { continue };
        if let Some(toml::Value::String(p)) = s.get_mut(key) {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    /// Reads `path` (if any), applies flag overrides and then the output
    /// directory environment override, and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        if let Some(base) = path.and_then(Path::parent) {
            anchor_paths(&mut table, base);
        }
        let flags = toml::Table::try_from(overrides).map_err(config_error)?;
        for (key, value) in flags {
            let section = table
                .entry(section_of(&key))
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(section) = section else {
                return Err(Error::Config(format!("[{}] must be a table", section_of(&key))));
            };
            section.insert(key, value);
        }
        let mut config: RunConfig = table.try_into().map_err(config_error)?;
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            config.data.output_dir = PathBuf::from(dir);
        }
        config.train.validate()?;
        if !(config.data.split_fraction > 0.0 && config.data.split_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "split_fraction = {} must lie in (0, 1]",
                config.data.split_fraction
            )));
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.data.output_dir.join("checkpoint.txt"))
    }
}
