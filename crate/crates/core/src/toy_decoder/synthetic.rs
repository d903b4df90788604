use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationParams;
use crate::distribution::LogitGrid;
use crate::error::{Error, Result};
use crate::lcdm::{lcdm_pipeline, Codebook};
use crate::matrix::Matrix;
use crate::synth::{seeded_rng, unit_codebook};

use super::conditioning::{encode_conditioning, ConditioningSource};
use super::latent::LatentGrid;
use super::params::DecoderParams;
use super::sample::{sample, FlowSchedule};
use super::train::TrainingExample;

/// Layout of the synthetic rendering task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderingConfig {
    pub vocab: usize,
    pub code_dim: usize,
    /// Code grid; the latent is twice as large on each axis.
    pub grid: [usize; 2],
    pub latent_channels: usize,
    /// Logit bonus of the rendered code over `N(0, 1)` distractors.
    pub logit_peak: f64,
    pub latent_noise: f64,
}

impl Default for RenderingConfig {
    fn default() -> Self {
        RenderingConfig {
            vocab: 32,
            code_dim: 4,
            grid: [4, 4],
            latent_channels: 2,
            logit_peak: 5.0,
            latent_noise: 0.05,
        }
    }
}

impl RenderingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.code_dim == 0 || self.latent_channels == 0 || self.grid[0] * self.grid[1] == 0 {
            return Err(Error::InvalidConfig(format!("degenerate rendering layout {self:?}")));
        }
        if !(self.logit_peak.is_finite() && self.latent_noise.is_finite() && self.latent_noise >= 0.0) {
            return Err(Error::InvalidConfig("logit_peak and latent_noise must be finite".into()));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (2 * self.grid[0], 2 * self.grid[1], self.latent_channels)
    }
}

/// Codebook plus the linear renderer mapping each code to one 2×2 patch.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderingTask {
    pub config: RenderingConfig,
    pub codebook: Codebook,
    /// `D × 4D_z`.
    pub renderer: Matrix,
}

/// One rendered scene with the logits a code predictor would emit for it.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    pub codes: Vec<usize>,
    pub logits: LogitGrid,
    pub clean: LatentGrid,
    pub source: ConditioningSource,
}

impl RenderingTask {
    pub fn new(config: RenderingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let codebook = unit_codebook(&mut rng, config.vocab, config.code_dim)?;
        let width = 4 * config.latent_channels;
        let scale = (width as f64 / config.code_dim as f64).sqrt();
        let data = (0..config.code_dim * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        Ok(RenderingTask { config, codebook, renderer: Matrix::from_vec(config.code_dim, width, data)? })
    }

    /// Random code layout, its logits, clean latent and identity-calibrated
    /// conditioning inputs.
    pub fn scene(&self, rng: &mut ChaCha8Rng) -> Result<RenderedScene> {
        let c = &self.config;
        let n = c.grid[0] * c.grid[1];
        let codes: Vec<usize> = (0..n).map(|_| rng.random_range(0..c.vocab)).collect();

        let mut logits = Matrix::zeros(n, c.vocab);
        for (i, &k) in codes.iter().enumerate() {
            let row = logits.row_mut(i);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            row[k] += c.logit_peak;
        }
        let logits = LogitGrid::new(logits)?;

        let width = 4 * c.latent_channels;
        let mut tokens = Matrix::zeros(n, width);
        for (i, &k) in codes.iter().enumerate() {
            let e = self.codebook.vector(k);
            for (j, o) in tokens.row_mut(i).iter_mut().enumerate() {
                let jitter: f64 = StandardNormal.sample(rng);
                *o = (0..c.code_dim).map(|d| e[d] * self.renderer.get(d, j)).sum::<f64>() + c.latent_noise * jitter;
            }
        }
        let (h, w, ch) = c.latent_shape();
        let clean = LatentGrid::unpack(&tokens, h, w, ch)?;

        let mapped = lcdm_pipeline(&logits, &self.codebook, &CalibrationParams::IDENTITY)?;
        let grid = (c.grid[0], c.grid[1]);
        let source = ConditioningSource::resampled(&mapped.codes, &mapped.uncertainty, grid, clean.token_grid())?;
        Ok(RenderedScene { codes, logits, clean, source })
    }

    pub fn scenes(&self, count: usize, seed: u64) -> Result<Vec<RenderedScene>> {
        let mut rng = seeded_rng(seed);
        (0..count).map(|_| self.scene(&mut rng)).collect()
    }

    pub fn training_set(&self, count: usize, seed: u64) -> Result<Vec<TrainingExample>> {
        Ok(self
            .scenes(count, seed)?
            .into_iter()
            .map(|s| TrainingExample { clean: s.clean, source: s.source })
            .collect())
    }
}

/// Mean reconstruction MSE of sampled latents; example `i` starts from noise
/// seeded with `seed + i`. With `zero_conditioning` the encoded conditioning
/// is replaced by zeros.
pub fn sampling_mse(
    params: &DecoderParams,
    examples: &[TrainingExample],
    schedule: FlowSchedule,
    seed: u64,
    zero_conditioning: bool,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let errs: Vec<Result<f64>> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut cond = encode_conditioning(params, &ex.source)?;
            if zero_conditioning {
                cond = cond.zeros_like();
            }
            let z = sample(params, &cond, schedule, seed.wrapping_add(i as u64))?;
            z.mse(&ex.clean)
        })
        .collect();
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / examples.len() as f64)
}
