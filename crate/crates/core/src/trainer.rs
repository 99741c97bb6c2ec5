//! Epoch loop: shuffle the training events, draw fresh negatives, and take
//! one Adam step per batch.

use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamTensors;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, BatchEvent};
use crate::params::TrendParams;
use crate::tgraph::{Event, EventStore, NegativeSampler};

/// RNG stream for shuffling and negatives, separate from initialization.
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean total loss per training event.
    pub loss: f64,
    pub seconds: f64,
    /// Wall time of each batch (forward, backward and update).
    pub batch_seconds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TrendParams,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Stops once the loss fails to improve on the best value so far by more
/// than `tolerance` (relative) for `patience` consecutive epochs. A patience
/// of 0 disables stopping.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    tolerance: f64,
    best: f64,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, tolerance: f64) -> Self {
        Self {
            patience,
            tolerance,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch loss; true when training should stop.
    pub fn update(&mut self, loss: f64) -> bool {
        if self.patience == 0 {
            return false;
        }
        let improved = self.best.is_infinite() || self.best - loss > self.tolerance * self.best.abs();
        self.best = self.best.min(loss);
        if improved {
            self.stale = 0;
        } else {
            self.stale += 1;
            debug!("no relative improvement ({}/{})", self.stale, self.patience);
        }
        self.stale >= self.patience
    }
}

/// Pairs each event with `q` negatives for its source. Events whose source
/// has no valid negative get fewer.
pub fn sample_batch(
    rng: &mut ChaCha8Rng,
    sampler: &NegativeSampler,
    store: &EventStore,
    events: &[Event],
    q: usize,
) -> Vec<BatchEvent> {
    events
        .iter()
        .map(|e| {
            let negatives = (0..q)
                .filter_map(|_| sampler.draw_negative(rng, store, e.src, e.time))
                .collect();
            BatchEvent {
                event: *e,
                negatives,
            }
        })
        .collect()
}

/// Which tensors the optimizer leaves untouched under `config`.
pub fn frozen_mask(params: &TrendParams, config: &TrainConfig) -> Vec<bool> {
    (0..params.tensor_count())
        .map(|i| config.freeze_film && params.is_film_tensor(i))
        .collect()
}

pub fn adam_step(
    params: &mut TrendParams,
    grads: &mut [Vec<f64>],
    config: &TrainConfig,
) -> Result<()> {
    let frozen = frozen_mask(params, config);
    let mut state = std::mem::take(&mut params.adam);
    let out = state.step(params, grads, config.lr, &frozen);
    params.adam = state;
    out
}

/// Initializes parameters from `config.seed` and trains on `store`.
pub fn train(store: &EventStore, config: &TrainConfig) -> Result<TrainOutcome> {
    let params = TrendParams::init(config, store.feature_dim(), config.seed)?;
    train_from(params, store, config)
}

fn check_compatible(params: &TrendParams, store: &EventStore, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if store.feature_dim() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "store features have dimension {} but the model expects {}",
            store.feature_dim(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Training state advanced one batch at a time. [`train_from`] drives it
/// epoch by epoch; callers that need per-batch control can step it directly.
pub struct Session<'a> {
    params: TrendParams,
    store: &'a EventStore,
    config: &'a TrainConfig,
    sampler: NegativeSampler,
    rng: ChaCha8Rng,
    order: Vec<Event>,
    epoch: usize,
}

impl<'a> Session<'a> {
    pub fn new(params: TrendParams, store: &'a EventStore, config: &'a TrainConfig) -> Result<Self> {
        check_compatible(&params, store, config)?;
        if store.is_empty() {
            return Err(Error::DegenerateData("no training events".into()));
        }
        let sampler = NegativeSampler::new(store)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            params,
            store,
            config,
            sampler,
            rng,
            order: store.events().to_vec(),
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.config.batch_size)
    }

    pub fn num_events(&self) -> usize {
        self.order.len()
    }

    /// Shuffles the training events for the next epoch.
    pub fn start_epoch(&mut self) {
        self.epoch += 1;
        self.order.shuffle(&mut self.rng);
    }

    /// Draws negatives for batch `b` of the current epoch, takes one Adam
    /// step, and returns the batch loss (summed over its events).
    pub fn run_batch(&mut self, b: usize) -> Result<f64> {
        let size = self.config.batch_size;
        let chunk = &self.order[b * size..((b + 1) * size).min(self.order.len())];
        let batch = sample_batch(
            &mut self.rng,
            &self.sampler,
            self.store,
            chunk,
            self.config.negatives,
        );
        let (loss, mut grads) = loss_and_grads(&self.params, self.store, &batch, self.config)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                batch: b,
                loss,
            });
        }
        adam_step(&mut self.params, &mut grads, self.config)?;
        Ok(loss)
    }

    pub fn params(&self) -> &TrendParams {
        &self.params
    }

    pub fn into_params(self) -> TrendParams {
        self.params
    }
}

/// Continues training from `params` (including their optimizer state).
pub fn train_from(
    params: TrendParams,
    store: &EventStore,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    check_compatible(&params, store, config)?;
    let mut history = Vec::new();
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            history,
            stopped_early: false,
        });
    }
    let mut session = Session::new(params, store, config)?;
    let mut stopper = EarlyStop::new(config.early_stop_patience, config.early_stop_tolerance);
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        session.start_epoch();
        let mut total = 0.0;
        let mut batch_seconds = Vec::with_capacity(session.batches_per_epoch());
        for b in 0..session.batches_per_epoch() {
            let batch_start = Instant::now();
            total += session.run_batch(b)?;
            batch_seconds.push(batch_start.elapsed().as_secs_f64());
        }
        let loss = total / session.num_events() as f64;
        let seconds = start.elapsed().as_secs_f64();
        info!("epoch {epoch}: loss {loss:.6} ({seconds:.2}s)");
        history.push(EpochRecord {
            epoch,
            loss,
            seconds,
            batch_seconds,
        });
        if !session.params().is_finite() {
            return Err(Error::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }

        if stopper.update(loss) {
            stopped_early = true;
            break;
        }
    }
    if stopped_early {
        info!("converged after {} epochs", history.len());
    } else if config.early_stop_patience > 0 && history.len() == config.epochs {
        warn!("epoch budget of {} exhausted before convergence", config.epochs);
    }
    Ok(TrainOutcome {
        params: session.into_params(),
        history,
        stopped_early,
    })
}
