use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::seeded_rng;

use super::conditioning::Conditioning;
use super::latent::LatentGrid;
use super::network::predict_velocity;
use super::params::DecoderParams;

/// Linear noise levels `σ_i = 1 − i / steps`, `i = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSchedule {
    pub steps: usize,
}

impl FlowSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("sampling needs at least one step".into()));
        }
        Ok(FlowSchedule { steps })
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| 1.0 - i as f64 / self.steps as f64).collect()
    }
}

/// Anything that predicts a velocity at noise level `σ`.
pub trait VelocityModel {
    fn velocity(&self, z: &LatentGrid, sigma: f64) -> Result<LatentGrid>;
}

/// Trained decoder bound to one conditioning grid.
pub struct ConditionedDecoder<'a> {
    pub params: &'a DecoderParams,
    pub conditioning: &'a Conditioning,
}

impl VelocityModel for ConditionedDecoder<'_> {
    fn velocity(&self, z: &LatentGrid, sigma: f64) -> Result<LatentGrid> {
        predict_velocity(self.params, z, self.conditioning, sigma)
    }
}

/// Returns the exact velocity `noise − target` of the straight path.
pub struct OracleVelocity {
    pub velocity: LatentGrid,
}

impl OracleVelocity {
    pub fn new(target: &LatentGrid, noise: &LatentGrid) -> Result<Self> {
        Ok(OracleVelocity { velocity: noise.axpby(1.0, target, -1.0)? })
    }
}

impl VelocityModel for OracleVelocity {
    fn velocity(&self, z: &LatentGrid, _sigma: f64) -> Result<LatentGrid> {
        z.same_shape(&self.velocity)?;
        Ok(self.velocity.clone())
    }
}

/// Standard normal starting latent for a seed.
pub fn initial_noise(shape: (usize, usize, usize), seed: u64) -> Result<LatentGrid> {
    LatentGrid::gaussian(shape.0, shape.1, shape.2, &mut seeded_rng(seed))
}

/// Euler integration `z ← z − (σ_i − σ_{i+1})·v(z, σ_i)` from `start`.
pub fn integrate(model: &impl VelocityModel, start: LatentGrid, schedule: FlowSchedule) -> Result<LatentGrid> {
    let sigmas = schedule.sigmas();
    let mut z = start;
    for w in sigmas.windows(2) {
        let v = model.velocity(&z, w[0])?;
        z = z.axpby(1.0, &v, -(w[0] - w[1]))?;
    }
    Ok(z)
}

/// Decodes a latent for `conditioning`, starting from seeded noise.
pub fn sample(
    params: &DecoderParams,
    conditioning: &Conditioning,
    schedule: FlowSchedule,
    seed: u64,
) -> Result<LatentGrid> {
    let (rows, cols) = conditioning.grid();
    let start = initial_noise((2 * rows, 2 * cols, params.dims.latent_channels), seed)?;
    integrate(&ConditionedDecoder { params, conditioning }, start, schedule)
}
