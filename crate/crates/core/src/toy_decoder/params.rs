use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Uncertainty channels carried per conditioning token.
pub const UNCERTAINTY_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderDims {
    /// Code vector width D.
    pub code_dim: usize,
    /// Code encoder width D_h.
    pub code_hidden: usize,
    /// Denoiser width D_θ.
    pub model_dim: usize,
    /// Latent channels D_z.
    pub latent_channels: usize,
}

impl Default for DecoderDims {
    fn default() -> Self {
        DecoderDims { code_dim: 4, code_hidden: 16, model_dim: 32, latent_channels: 2 }
    }
}

impl DecoderDims {
    pub fn validate(&self) -> Result<()> {
        if self.code_dim == 0 || self.code_hidden == 0 || self.model_dim == 0 || self.latent_channels == 0 {
            return Err(Error::InvalidConfig(format!("decoder dims must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn token_width(&self) -> usize {
        4 * self.latent_channels
    }

    pub fn cond_width(&self) -> usize {
        self.code_hidden + UNCERTAINTY_CHANNELS
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation {other:?}"))),
        }
    }
}

/// Every trainable array of the decoder. Gradients reuse the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub dims: DecoderDims,
    pub activation: Activation,
    pub code_weight: Matrix,
    pub code_bias: Vec<f64>,
    pub mix_weight: Matrix,
    pub mix_bias: Vec<f64>,
    pub img_weight: Matrix,
    pub img_bias: Vec<f64>,
    pub cond_weight: Matrix,
    pub cond_bias: Vec<f64>,
    /// Rows multiply `sin(2πt)` and `cos(2πt)`.
    pub time_embed: Matrix,
    pub body_weight1: Matrix,
    pub body_bias1: Vec<f64>,
    pub global_weight: Matrix,
    pub body_weight2: Matrix,
    pub body_bias2: Vec<f64>,
    pub out_weight: Matrix,
    pub out_bias: Vec<f64>,
}

impl DecoderParams {
    pub fn zeros(dims: DecoderDims, activation: Activation) -> Result<Self> {
        dims.validate()?;
        let (d, dh, dt, tw, cw) =
            (dims.code_dim, dims.code_hidden, dims.model_dim, dims.token_width(), dims.cond_width());
        Ok(DecoderParams {
            dims,
            activation,
            code_weight: Matrix::zeros(d, dh),
            code_bias: vec![0.0; dh],
            mix_weight: Matrix::zeros(dh, dh),
            mix_bias: vec![0.0; dh],
            img_weight: Matrix::zeros(tw, dt),
            img_bias: vec![0.0; dt],
            cond_weight: Matrix::zeros(cw, dt),
            cond_bias: vec![0.0; dt],
            time_embed: Matrix::zeros(2, dt),
            body_weight1: Matrix::zeros(dt, dt),
            body_bias1: vec![0.0; dt],
            global_weight: Matrix::zeros(dt, dt),
            body_weight2: Matrix::zeros(dt, dt),
            body_bias2: vec![0.0; dt],
            out_weight: Matrix::zeros(dt, tw),
            out_bias: vec![0.0; tw],
        })
    }

    /// Weights drawn as `N(0, scale² / fan_in)`, biases zero.
    pub fn init(dims: DecoderDims, activation: Activation, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(Error::InvalidConfig(format!("init scale {scale} must be finite and >= 0")));
        }
        let mut p = Self::zeros(dims, activation)?;
        for m in p.weights_mut() {
            let std = scale / (m.rows() as f64).sqrt();
            for v in m.as_mut_slice() {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        }
        Ok(p)
    }

    fn weights_mut(&mut self) -> [&mut Matrix; 9] {
        [
            &mut self.code_weight,
            &mut self.mix_weight,
            &mut self.img_weight,
            &mut self.cond_weight,
            &mut self.time_embed,
            &mut self.body_weight1,
            &mut self.global_weight,
            &mut self.body_weight2,
            &mut self.out_weight,
        ]
    }

    /// Arrays in serialization order.
    pub fn arrays(&self) -> [&[f64]; 16] {
        [
            self.code_weight.as_slice(),
            &self.code_bias,
            self.mix_weight.as_slice(),
            &self.mix_bias,
            self.img_weight.as_slice(),
            &self.img_bias,
            self.cond_weight.as_slice(),
            &self.cond_bias,
            self.time_embed.as_slice(),
            self.body_weight1.as_slice(),
            &self.body_bias1,
            self.global_weight.as_slice(),
            self.body_weight2.as_slice(),
            &self.body_bias2,
            self.out_weight.as_slice(),
            &self.out_bias,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut [f64]; 16] {
        [
            self.code_weight.as_mut_slice(),
            &mut self.code_bias,
            self.mix_weight.as_mut_slice(),
            &mut self.mix_bias,
            self.img_weight.as_mut_slice(),
            &mut self.img_bias,
            self.cond_weight.as_mut_slice(),
            &mut self.cond_bias,
            self.time_embed.as_mut_slice(),
            self.body_weight1.as_mut_slice(),
            &mut self.body_bias1,
            self.global_weight.as_mut_slice(),
            self.body_weight2.as_mut_slice(),
            &mut self.body_bias2,
            self.out_weight.as_mut_slice(),
            &mut self.out_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arrays().concat()
    }

    pub fn from_flat(dims: DecoderDims, activation: Activation, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(dims, activation)?;
        let n = p.num_params();
        if flat.len() != n {
            return Err(Error::ShapeMismatch(format!("decoder with {dims:?} has {n} parameters, got {}", flat.len())));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder parameters".into()));
        }
        let mut off = 0;
        for a in p.arrays_mut() {
            let len = a.len();
            a.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// `self += k · other`.
    pub fn add_scaled(&mut self, other: &DecoderParams, k: f64) {
        for (a, b) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += k * y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in self.arrays_mut() {
            for x in a.iter_mut() {
                *x *= k;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn flat_round_trip() {
        let dims = DecoderDims { code_dim: 3, code_hidden: 5, model_dim: 7, latent_channels: 2 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p = DecoderParams::init(dims, Activation::Tanh, 1.0, &mut rng).unwrap();
        let flat = p.to_flat();
        let expected =
            3 * 5 + 5 + 5 * 5 + 5 + 8 * 7 + 7 + 9 * 7 + 7 + 2 * 7 + 7 * 7 + 7 + 7 * 7 + 7 * 7 + 7 + 7 * 8 + 8;
        assert_eq!(flat.len(), expected);
        assert_eq!(p.num_params(), expected);
        assert_eq!(DecoderParams::from_flat(dims, Activation::Tanh, &flat).unwrap(), p);
        assert!(DecoderParams::from_flat(dims, Activation::Tanh, &flat[1..]).is_err());
    }

    #[test]
    fn zero_scale_init_is_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let p = DecoderParams::init(DecoderDims::default(), Activation::Tanh, 0.0, &mut rng).unwrap();
        assert!(p.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_dims() {
        let dims = DecoderDims { code_dim: 0, ..DecoderDims::default() };
        assert!(DecoderParams::zeros(dims, Activation::Tanh).is_err());
        assert!("relu".parse::<Activation>().is_err());
        assert_eq!("tanh".parse::<Activation>().unwrap(), Activation::Tanh);
    }
}
