//! Small flow-matching decoder conditioned on code vectors and uncertainty
//! features.

mod conditioning;
mod dataset;
mod latent;
mod network;
mod params;
mod sample;
mod synthetic;
mod train;

pub use conditioning::{
    encode_conditioning, neighbour_mean, resample_bilinear, resample_nearest, Conditioning, ConditioningSource,
};
pub use dataset::{
    examples_from_tensors, examples_to_tensors, latents_from_tensor, latents_to_tensor, sources_from_tensors,
    DatasetTensors, ToyData, ToyDataConfig, ToyRunConfig,
};
pub use latent::{add_noise, v_pred_loss, LatentGrid};
pub use network::{
    example_loss, gradient_check, loss_and_gradients, predict_velocity, time_features, GradCheck, VelocityExample,
};
pub use params::{Activation, DecoderDims, DecoderParams, UNCERTAINTY_CHANNELS};
pub use sample::{initial_noise, integrate, sample, ConditionedDecoder, FlowSchedule, OracleVelocity, VelocityModel};
pub use synthetic::{sampling_mse, RenderedScene, RenderingConfig, RenderingTask};
pub use train::{
    batch_loss_and_gradients, draw_batch, train, train_from, Adam, StepDraw, TrainConfig, TrainOutcome, TrainingExample,
};
