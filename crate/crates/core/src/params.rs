use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::autodiff::{ParamTensors, Tape, Var};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::event_dyn::{BoundFilm, EventPrior, FilmParams};
use crate::node_dyn::{BoundNodeDyn, NodeDynParams};
use crate::tensor::Tensor;
use crate::tgnn::{BoundTgnn, TgnnParams};

/// Every trainable tensor of the model plus the optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendParams {
    pub tgnn: TgnnParams,
    pub prior: EventPrior,
    pub film: FilmParams,
    pub node: NodeDynParams,
    pub adam: AdamState,
}

/// Parameters placed on a tape, in the same order as [`ParamTensors`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub tgnn: BoundTgnn,
    pub theta_e: Var,
    pub film: BoundFilm,
    pub node: BoundNodeDyn,
}

const FILM_NAMES: [&str; 4] = ["w_alpha", "b_alpha", "w_beta", "b_beta"];

impl TrendParams {
    /// Scaled-uniform weights, zero biases, and a decay rate of 1. All
    /// parameter groups are drawn in a fixed order whatever the ablation, so
    /// the same seed gives the same shared parameters across ablations.
    pub fn init(config: &TrainConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input feature dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = config.layer_dims(input_dim);
        let d = config.out_dim;
        let tgnn = TgnnParams::init(&mut rng, &dims, config.per_layer_decay);
        let prior = EventPrior::init(&mut rng, d);
        let film = FilmParams::init(&mut rng, d);
        let node = NodeDynParams::init(&mut rng, d);
        let mut params = Self {
            tgnn,
            prior,
            film,
            node,
            adam: AdamState::default(),
        };
        params.adam = AdamState::for_params(&params);
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.tgnn.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.tgnn.output_dim()
    }

    pub fn layers(&self) -> usize {
        self.tgnn.layers()
    }

    /// Sets the FiLM generators to zero, making every adapted transfer
    /// function equal to the prior.
    pub fn zero_film(&mut self) {
        self.film = FilmParams::zeros(self.embedding_dim());
    }

    /// Whether tensor `idx` belongs to the FiLM generators.
    pub fn is_film_tensor(&self, idx: usize) -> bool {
        let start = 2 * self.layers() + 2;
        (start..start + FILM_NAMES.len()).contains(&idx)
    }

    pub fn is_finite(&self) -> bool {
        (0..self.tensor_count()).all(|i| self.tensor(i).is_finite())
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            tgnn: self.tgnn.bind(tape, requires_grad),
            theta_e: tape.leaf(&self.prior.theta_e, requires_grad),
            film: self.film.bind(tape, requires_grad),
            node: self.node.bind(tape, requires_grad),
        }
    }
}

impl BoundParams {
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.tgnn.w_self.clone();
        v.extend(&self.tgnn.w_hist);
        v.push(self.tgnn.decay_raw);
        v.push(self.theta_e);
        v.extend([
            self.film.w_alpha,
            self.film.b_alpha,
            self.film.w_beta,
            self.film.b_beta,
        ]);
        v.extend([self.node.w_n, self.node.b_n]);
        v
    }

    /// Gradients after a backward pass, zeros where none reached a tensor.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .map(|v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).len()],
            })
            .collect()
    }
}

impl ParamTensors for TrendParams {
    fn tensor_names(&self) -> Vec<String> {
        let l = self.layers();
        let mut names: Vec<String> = (0..l).map(|i| format!("w_self.{i}")).collect();
        names.extend((0..l).map(|i| format!("w_hist.{i}")));
        names.push("decay_raw".into());
        names.push("theta_e".into());
        names.extend(FILM_NAMES.iter().map(|s| s.to_string()));
        names.push("w_n".into());
        names.push("b_n".into());
        names
    }

    fn tensor(&self, idx: usize) -> &Tensor {
        let l = self.layers();
        match idx {
            i if i < l => &self.tgnn.w_self[i],
            i if i < 2 * l => &self.tgnn.w_hist[i - l],
            i => match i - 2 * l {
                0 => &self.tgnn.decay_raw,
                1 => &self.prior.theta_e,
                2 => &self.film.w_alpha,
                3 => &self.film.b_alpha,
                4 => &self.film.w_beta,
                5 => &self.film.b_beta,
                6 => &self.node.w_n,
                7 => &self.node.b_n,
                _ => panic!("parameter index {idx} out of range"),
            },
        }
    }

    fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        let l = self.layers();
        match idx {
            i if i < l => &mut self.tgnn.w_self[i],
            i if i < 2 * l => &mut self.tgnn.w_hist[i - l],
            i => match i - 2 * l {
                0 => &mut self.tgnn.decay_raw,
                1 => &mut self.prior.theta_e,
                2 => &mut self.film.w_alpha,
                3 => &mut self.film.b_alpha,
                4 => &mut self.film.w_beta,
                5 => &mut self.film.b_beta,
                6 => &mut self.node.w_n,
                7 => &mut self.node.b_n,
                _ => panic!("parameter index {idx} out of range"),
            },
        }
    }

    fn tensor_count(&self) -> usize {
        2 * self.layers() + 8
    }
}
