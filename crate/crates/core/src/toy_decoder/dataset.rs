use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor_io::Tensor;

use super::conditioning::ConditioningSource;
use super::latent::LatentGrid;
use super::params::UNCERTAINTY_CHANNELS;
use super::synthetic::{RenderingConfig, RenderingTask};
use super::train::{TrainConfig, TrainingExample};

/// Which synthetic scenes to render for training and held-out evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataConfig {
    pub task: RenderingConfig,
    pub task_seed: u64,
    pub train_scenes: usize,
    pub train_seed: u64,
    pub test_scenes: usize,
    pub test_seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        ToyDataConfig {
            task: RenderingConfig::default(),
            task_seed: 1,
            train_scenes: 64,
            train_seed: 2,
            test_scenes: 16,
            test_seed: 3,
        }
    }
}

/// Rendered task with its train and held-out splits.
pub struct ToyData {
    pub task: RenderingTask,
    pub train: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

impl ToyDataConfig {
    pub fn build(&self) -> Result<ToyData> {
        if self.train_scenes == 0 {
            return Err(Error::InvalidConfig("train_scenes must be >= 1".into()));
        }
        let task = RenderingTask::new(self.task, self.task_seed)?;
        let train = task.training_set(self.train_scenes, self.train_seed)?;
        let test = task.training_set(self.test_scenes, self.test_seed)?;
        Ok(ToyData { task, train, test })
    }
}

/// Training hyper-parameters and dataset layout in one document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyRunConfig {
    pub train: TrainConfig,
    pub data: ToyDataConfig,
}

impl ToyRunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: ToyRunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.task.validate()?;
        if self.train.dims.code_dim != self.data.task.code_dim
            || self.train.dims.latent_channels != self.data.task.latent_channels
        {
            return Err(Error::InvalidConfig(
                "decoder dims disagree with the rendering task's code_dim or latent_channels".into(),
            ));
        }
        Ok(())
    }
}

/// Dataset as three batched tensors: latents `M×H×W×C`, codes `M×h×w×D`
/// and uncertainty `M×h×w×4`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTensors {
    pub latents: Tensor,
    pub codes: Tensor,
    pub uncertainty: Tensor,
}

pub fn examples_to_tensors(examples: &[TrainingExample]) -> Result<DatasetTensors> {
    let first = examples.first().ok_or(Error::Empty("dataset"))?;
    let (h, w, c) = first.clean.shape();
    let (rows, cols) = first.source.grid();
    let d = first.source.codes().cols();
    let m = examples.len();
    let mut latents = Vec::with_capacity(m * h * w * c);
    let mut codes = Vec::with_capacity(m * rows * cols * d);
    let mut unc = Vec::with_capacity(m * rows * cols * UNCERTAINTY_CHANNELS);
    for ex in examples {
        if ex.clean.shape() != (h, w, c) || ex.source.grid() != (rows, cols) || ex.source.codes().cols() != d {
            return Err(Error::ShapeMismatch("dataset examples differ in shape".into()));
        }
        latents.extend_from_slice(ex.clean.as_slice());
        codes.extend_from_slice(ex.source.codes().as_slice());
        unc.extend_from_slice(ex.source.uncertainty().as_slice());
    }
    Ok(DatasetTensors {
        latents: Tensor::new(vec![m, h, w, c], latents)?,
        codes: Tensor::new(vec![m, rows, cols, d], codes)?,
        uncertainty: Tensor::new(vec![m, rows, cols, UNCERTAINTY_CHANNELS], unc)?,
    })
}

/// Batched conditioning inputs `M×h×w×D` and `M×h×w×4`, each resampled to
/// the packed grid `target`.
pub fn sources_from_tensors(
    codes: &Tensor,
    uncertainty: &Tensor,
    target: Option<(usize, usize)>,
) -> Result<Vec<ConditioningSource>> {
    let (&[m, rows, cols, d], &[m2, rows2, cols2, u]) = (codes.shape(), uncertainty.shape()) else {
        return Err(Error::ShapeMismatch(format!(
            "codes {:?} and uncertainty {:?} must both be rank 4",
            codes.shape(),
            uncertainty.shape()
        )));
    };
    if (m, rows, cols) != (m2, rows2, cols2) || u != UNCERTAINTY_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "codes {:?} and uncertainty {:?} do not describe the same grid",
            codes.shape(),
            uncertainty.shape()
        )));
    }
    let target = target.unwrap_or((rows, cols));
    let (cs, us) = (rows * cols * d, rows * cols * u);
    (0..m)
        .map(|i| {
            let v = Matrix::from_vec(rows * cols, d, codes.data()[i * cs..(i + 1) * cs].to_vec())?;
            let un = Matrix::from_vec(rows * cols, u, uncertainty.data()[i * us..(i + 1) * us].to_vec())?;
            ConditioningSource::resampled(&v, &un, (rows, cols), target)
        })
        .collect()
}

/// Splits an `M×H×W×C` tensor into latent grids.
pub fn latents_from_tensor(t: &Tensor) -> Result<Vec<LatentGrid>> {
    let &[m, h, w, c] = t.shape() else {
        return Err(Error::ShapeMismatch(format!("latents must be rank 4, got {:?}", t.shape())));
    };
    let stride = h * w * c;
    (0..m).map(|i| LatentGrid::from_vec(h, w, c, t.data()[i * stride..(i + 1) * stride].to_vec())).collect()
}

/// Stacks equally shaped latent grids into an `M×H×W×C` tensor.
pub fn latents_to_tensor(latents: &[LatentGrid]) -> Result<Tensor> {
    let first = latents.first().ok_or(Error::Empty("latent batch"))?;
    let (h, w, c) = first.shape();
    let mut data = Vec::with_capacity(latents.len() * first.len());
    for z in latents {
        z.same_shape(first)?;
        data.extend_from_slice(z.as_slice());
    }
    Tensor::new(vec![latents.len(), h, w, c], data)
}

pub fn examples_from_tensors(t: &DatasetTensors) -> Result<Vec<TrainingExample>> {
    let latents = latents_from_tensor(&t.latents)?;
    let target = latents.first().ok_or(Error::Empty("dataset"))?.token_grid();
    let sources = sources_from_tensors(&t.codes, &t.uncertainty, Some(target))?;
    if sources.len() != latents.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} latents but {} conditioning entries",
            latents.len(),
            sources.len()
        )));
    }
    Ok(latents.into_iter().zip(sources).map(|(clean, source)| TrainingExample { clean, source }).collect())
}
