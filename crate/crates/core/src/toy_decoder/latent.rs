use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_io::Tensor;

/// H×W×C latent map stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::from_vec(height, width, channels, vec![0.0; height * width * channels])
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch("latent grid has an empty axis".into()));
        }
        if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("latent {height}x{width} is not divisible into 2x2 patches")));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} latent needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent grid".into()));
        }
        Ok(LatentGrid { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::from_vec(height, width, channels, vec![value; height * width * channels])
    }

    /// Standard normal entries.
    pub fn gaussian(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        let data = (0..height * width * channels).map(|_| StandardNormal.sample(rng)).collect();
        Self::from_vec(height, width, channels, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Packed token grid shape `(H/2, W/2)`.
    pub fn token_grid(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn same_shape(&self, other: &LatentGrid) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "latent shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// 2×2 patches as rows of a `(H/2·W/2) × 4C` matrix. Within a row the
    /// layout is `[(dy·2 + dx)·C + c]`.
    pub fn pack(&self) -> Matrix {
        let (rows, cols) = self.token_grid();
        let c = self.channels;
        let mut out = Matrix::zeros(rows * cols, 4 * c);
        for r in 0..rows {
            for q in 0..cols {
                let token = out.row_mut(r * cols + q);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = ((2 * r + dy) * self.width + 2 * q + dx) * c;
                        let dst = (dy * 2 + dx) * c;
                        token[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                    }
                }
            }
        }
        out
    }

    /// Inverse of [`LatentGrid::pack`].
    pub fn unpack(tokens: &Matrix, height: usize, width: usize, channels: usize) -> Result<Self> {
        if !height.is_multiple_of(2) || !width.is_multiple_of(2) {
            return Err(Error::ShapeMismatch("odd latent size".into()));
        }
        let (rows, cols) = (height / 2, width / 2);
        if tokens.rows() != rows * cols || tokens.cols() != 4 * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} tokens do not unpack to {height}x{width}x{channels}",
                tokens.rows(),
                tokens.cols()
            )));
        }
        let c = channels;
        let mut data = vec![0.0; height * width * c];
        for r in 0..rows {
            for q in 0..cols {
                let token = tokens.row(r * cols + q);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = ((2 * r + dy) * width + 2 * q + dx) * c;
                        let src = (dy * 2 + dx) * c;
                        data[dst..dst + c].copy_from_slice(&token[src..src + c]);
                    }
                }
            }
        }
        Self::from_vec(height, width, c, data)
    }

    /// `a·self + b·other`, elementwise.
    pub fn axpby(&self, a: f64, other: &LatentGrid, b: f64) -> Result<LatentGrid> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Ok(LatentGrid { data, ..*self })
    }

    pub fn mse(&self, other: &LatentGrid) -> Result<f64> {
        self.same_shape(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone()).expect("latent shape is valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Self::from_vec(h, w, c, t.data().to_vec()),
            _ => Err(Error::ShapeMismatch(format!("latent tensor must be rank 3, got {:?}", t.shape()))),
        }
    }
}

/// Linear noising path `(1 − σ)·z + σ·noise`.
pub fn add_noise(z: &LatentGrid, sigma: f64, noise: &LatentGrid) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidArgument(format!("sigma {sigma} outside [0, 1]")));
    }
    z.axpby(1.0 - sigma, noise, sigma)
}

/// `mean(w² · (v̂ − (noise − z))²)` over every element.
pub fn v_pred_loss(v_hat: &LatentGrid, noise: &LatentGrid, z: &LatentGrid, w_t: f64) -> Result<f64> {
    v_hat.same_shape(noise)?;
    v_hat.same_shape(z)?;
    if !(w_t > 0.0) {
        return Err(Error::InvalidArgument(format!("weight {w_t} must be positive")));
    }
    let w2 = w_t * w_t;
    let s: f64 = v_hat
        .data
        .iter()
        .zip(&noise.data)
        .zip(&z.data)
        .map(|((v, e), z)| {
            let d = v - (e - z);
            d * d
        })
        .sum();
    Ok(w2 * s / v_hat.data.len() as f64)
}
