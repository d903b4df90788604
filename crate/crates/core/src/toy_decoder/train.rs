use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::seeded_rng;

use super::conditioning::ConditioningSource;
use super::latent::{add_noise, LatentGrid};
use super::network::{loss_and_gradients, VelocityExample};
use super::params::{Activation, DecoderDims, DecoderParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub init_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Constant `w_t` of the velocity loss.
    pub loss_weight: f64,
    pub dims: DecoderDims,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            step_size: 3e-3,
            batch_size: 8,
            seed: 0,
            init_scale: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss_weight: 1.0,
            dims: DecoderDims::default(),
            activation: Activation::Tanh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return bad(format!("step_size {} must be finite and >= 0", self.step_size));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.loss_weight > 0.0) {
            return bad("adam_eps and loss_weight must be positive".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad(format!("init_scale {} must be finite and >= 0", self.init_scale));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// Clean latent with the conditioning inputs it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub clean: LatentGrid,
    pub source: ConditioningSource,
}

/// One sampled training term: which example, at what time, with what noise.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDraw {
    pub index: usize,
    pub t: f64,
    pub noise: LatentGrid,
}

/// Draws a minibatch: `t ~ U[0, 1)`, `σ = t`, standard normal noise.
pub fn draw_batch(rng: &mut ChaCha8Rng, examples: &[TrainingExample], batch: usize) -> Result<Vec<StepDraw>> {
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    (0..batch)
        .map(|_| {
            let index = rng.random_range(0..examples.len());
            let t = rng.random::<f64>();
            let (h, w, c) = examples[index].clean.shape();
            let noise = LatentGrid::gaussian(h, w, c, rng)?;
            Ok(StepDraw { index, t, noise })
        })
        .collect()
}

/// Mean loss and mean gradient over a batch of draws.
pub fn batch_loss_and_gradients(
    params: &DecoderParams,
    examples: &[TrainingExample],
    draws: &[StepDraw],
    loss_weight: f64,
) -> Result<(f64, DecoderParams)> {
    if draws.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let terms: Vec<Result<(f64, DecoderParams)>> = draws
        .par_iter()
        .map(|d| {
            let ex = &examples[d.index];
            let noisy = add_noise(&ex.clean, d.t, &d.noise)?;
            loss_and_gradients(
                params,
                &VelocityExample {
                    noisy: &noisy,
                    clean: &ex.clean,
                    noise: &d.noise,
                    source: &ex.source,
                    t: d.t,
                    weight: loss_weight,
                },
            )
        })
        .collect();
    let mut grad = DecoderParams::zeros(params.dims, params.activation)?;
    let mut loss = 0.0;
    for term in terms {
        let (l, g) = term?;
        loss += l;
        grad.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / draws.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

/// First and second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(num_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, params: &mut DecoderParams, grad: &DecoderParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut off = 0;
        for (p, g) in params.arrays_mut().into_iter().zip(grad.arrays()) {
            for (j, (x, &gj)) in p.iter_mut().zip(g).enumerate() {
                let (m, v) = (&mut self.m[off + j], &mut self.v[off + j]);
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            off += g.len();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
}

/// Runs Adam from `params`, drawing batches from `rng`.
pub fn train_from(
    mut params: DecoderParams,
    examples: &[TrainingExample],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    config.validate()?;
    if params.dims != config.dims {
        return Err(Error::InvalidConfig("parameter dims differ from the config".into()));
    }
    let mut adam = Adam::new(params.num_params(), config.beta1, config.beta2, config.adam_eps);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let draws = draw_batch(rng, examples, config.batch_size)?;
        let (loss, grad) = batch_loss_and_gradients(&params, examples, &draws, config.loss_weight)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        losses.push(loss);
        adam.step(&mut params, &grad, config.step_size);
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
    }
    Ok(TrainOutcome { params, losses })
}

/// Seeds one generator, initialises parameters from it, then trains.
pub fn train(examples: &[TrainingExample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let params = DecoderParams::init(config.dims, config.activation, config.init_scale, &mut rng)?;
    train_from(params, examples, config, &mut rng)
}
