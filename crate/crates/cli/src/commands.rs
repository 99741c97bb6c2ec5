use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trend_core::autodiff::grad_check;
use trend_core::checkpoint::{load_checkpoint, write_checkpoint};
use trend_core::eval::MetricsReport;
use trend_core::eval::{eval_link, eval_node_dynamics};
use trend_core::model::loss_and_grads;
use trend_core::tgraph::{parse_events, synth_hawkes_graph, write_events, write_features, EventStore, NegativeSampler};
use trend_core::trainer::{sample_batch, train};
use trend_core::{Error, Result, TrainConfig, TrendParams};

use crate::config::RunConfig;

/// Gradient checks pass below this relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn load_store(config: &RunConfig) -> Result<EventStore> {
    let events = config
        .data
        .events
        .as_deref()
        .ok_or_else(|| Error::Config("no events file given (set data.events or --events)".into()))?;
    let events = open(events)?;
    let features = config.data.features.as_deref().map(open).transpose()?;
    let store = parse_events(events, features)?;
    info!(
        "loaded {} events over {} nodes (feature dim {})",
        store.num_events(),
        store.num_nodes(),
        store.feature_dim()
    );
    Ok(store)
}

fn split_time(config: &RunConfig, store: &EventStore) -> Result<f64> {
    match config.data.split_time {
        Some(t) => Ok(t),
        None => store.split_time_for_fraction(config.data.split_fraction),
    }
}

/// Files are only written once every result is in hand, so a failed run
/// leaves no partial output.
struct Outputs {
    dir: PathBuf,
    files: Vec<(PathBuf, String)>,
}

impl Outputs {
    fn new(config: &RunConfig) -> Self {
        Self {
            dir: config.data.output_dir.clone(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl AsRef<Path>, contents: String) {
        let path = self.dir.join(name);
        self.files.push((path, contents));
    }

    fn add_at(&mut self, path: PathBuf, contents: String) {
        self.files.push((path, contents));
    }

    fn write(self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for (path, contents) in self.files {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
            info!("wrote {}", path.display());
        }
        Ok(())
    }
}

fn snapshot_name(command: &str) -> String {
    format!("{command}.config.toml")
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let store = load_store(config)?;
    let t_tr = split_time(config, &store)?;
    let (train_view, test) = store.split(t_tr)?;
    info!(
        "training on {} events up to t = {t_tr} ({} held out)",
        train_view.num_events(),
        test.len()
    );
    let outcome = train(&train_view, &config.train)?;

    let mut checkpoint = Vec::new();
    write_checkpoint(&mut checkpoint, &config.train, &outcome.params)
        .map_err(|e| Error::io(config.checkpoint_path(), e))?;
    let mut history = String::from("epoch,loss,seconds\n");
    for r in &outcome.history {
        writeln!(history, "{},{},{}", r.epoch, r.loss, r.seconds).unwrap();
    }
    let mut out = Outputs::new(config);
    out.add_at(
        config.checkpoint_path(),
        String::from_utf8(checkpoint).expect("checkpoint is text"),
    );
    out.add("loss_history.csv", history);
    out.add(snapshot_name("train"), config.to_toml());
    out.write()?;

    let last = outcome.history.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "trained {} epochs{}; final loss {last:.6}; checkpoint {}",
        outcome.history.len(),
        if outcome.stopped_early { " (converged)" } else { "" },
        config.checkpoint_path().display()
    );
    Ok(())
}

/// Loads the checkpoint and checks it against the run configuration and the
/// data. The checkpoint's own training configuration drives the model.
fn load_model(config: &RunConfig, store: &EventStore) -> Result<(TrainConfig, TrendParams)> {
    let path = config.checkpoint_path();
    let (model_config, params) = load_checkpoint(&path)?;
    let pairs = [
        ("hidden_dim", model_config.hidden_dim, config.train.hidden_dim),
        ("out_dim", model_config.out_dim, config.train.out_dim),
        ("layers", model_config.layers, config.train.layers),
    ];
    for (name, saved, wanted) in pairs {
        if saved != wanted {
            return Err(Error::Dimension(format!(
                "checkpoint {} has {name} = {saved} but the configuration has {name} = {wanted}",
                path.display()
            )));
        }
    }
    if store.feature_dim() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "checkpoint {} expects input dimension {} but the features have dimension {}",
            path.display(),
            params.input_dim(),
            store.feature_dim()
        )));
    }
    Ok((model_config, params))
}

fn finish_eval(config: &RunConfig, command: &str, stem: &str, report: &MetricsReport) -> Result<()> {
    let mut out = Outputs::new(config);
    out.add(format!("{stem}.txt"), report.to_key_values());
    out.add(format!("{stem}.json"), report.to_json());
    out.add(snapshot_name(command), config.to_toml());
    out.write()?;
    println!(
        "{} task: {} examples ({} skipped), {} splits",
        report.task, report.examples, report.skipped, config.eval.splits
    );
    for line in report.summary_lines() {
        println!("{line}");
    }
    Ok(())
}

pub fn cmd_eval_link(config: &RunConfig) -> Result<()> {
    let store = load_store(config)?;
    let (model_config, params) = load_model(config, &store)?;
    let t_tr = split_time(config, &store)?;
    let report = eval_link(
        &params,
        &model_config,
        &store,
        t_tr,
        config.eval.splits,
        config.eval.eval_seed,
    )?;
    finish_eval(config, "eval-link", "metrics_link", &report)
}

pub fn cmd_eval_node(config: &RunConfig) -> Result<()> {
    let store = load_store(config)?;
    let (model_config, params) = load_model(config, &store)?;
    let t_tr = split_time(config, &store)?;
    let report = eval_node_dynamics(
        &params,
        &model_config,
        &store,
        t_tr,
        config.eval.splits,
        config.eval.eval_seed,
    )?;
    finish_eval(config, "eval-node", "metrics_node", &report)
}

pub fn cmd_gen_synth(config: &RunConfig) -> Result<()> {
    let store = synth_hawkes_graph(&config.synth.params())?;
    let mut events = Vec::new();
    let mut features = Vec::new();
    write_events(&mut events, store.events()).expect("writing to memory");
    write_features(&mut features, store.features()).expect("writing to memory");
    let mut out = Outputs::new(config);
    out.add("events.txt", String::from_utf8(events).expect("utf-8"));
    out.add("features.txt", String::from_utf8(features).expect("utf-8"));
    out.add(snapshot_name("gen-synth"), config.to_toml());
    let dir = out.dir.clone();
    out.write()?;
    println!(
        "generated {} events over {} nodes into {}",
        store.num_events(),
        config.synth.nodes,
        dir.display()
    );
    Ok(())
}

/// Checks analytic gradients of the full loss on the last training events,
/// with negatives drawn once and frozen.
pub fn cmd_grad_check(config: &RunConfig) -> Result<()> {
    let store = load_store(config)?;
    let t_tr = split_time(config, &store)?;
    let (train_view, _) = store.split(t_tr)?;
    let n = train_view.num_events();
    let k = config.eval.check_events.min(n);
    if k == 0 {
        return Err(Error::DegenerateData("no training events to check".into()));
    }
    let c = &config.train;
    let mut params = TrendParams::init(c, train_view.feature_dim(), c.seed)?;
    let sampler = NegativeSampler::new(&train_view)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let batch = sample_batch(&mut rng, &sampler, &train_view, &train_view.events()[n - k..], c.negatives);
    let report = grad_check(&mut params, config.eval.check_step, |p| {
        loss_and_grads(p, &train_view, &batch, c)
    })?;

    let mut text = String::new();
    for (name, err) in &report.per_tensor {
        writeln!(text, "{name}: {err:.3e}").unwrap();
    }
    print!("{text}");
    println!("max relative error: {:.3e} over {} entries", report.max_rel_error, report.entries_checked);
    if let Some((name, idx, analytic, numeric)) = &report.worst {
        println!("worst parameter group: {name} (entry {idx}: analytic {analytic:.6e}, numeric {numeric:.6e})");
    }
    let mut out = Outputs::new(config);
    writeln!(text, "max_rel_error={}", report.max_rel_error).unwrap();
    out.add("grad_check.txt", text);
    out.add(snapshot_name("grad-check"), config.to_toml());
    out.write()?;
    if report.max_rel_error < GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "max relative gradient error {:.3e} is not below {GRAD_CHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}
