//! Logit-side tooling for decoding vision-language-model image tokens
//! through a distribution-conditioned diffusion decoder.
//!
//! * [`distribution`]: softmax, smoothing and entropy statistics.
//! * [`otsu`]: between-class-variance analysis of token distributions.
//! * [`lcdm`]: expected code vectors and uncertainty features.
//! * [`calibration`]: statistic-matching calibration of proxy logits.
//! * [`toy_decoder`]: a small flow-matching decoder with analytic gradients.
//! * [`tensor_io`]: the binary tensor format and config documents.

pub mod calibration;
pub mod cli;
pub mod distribution;
pub mod error;
pub mod lcdm;
pub mod matrix;
pub mod otsu;
pub mod synth;
pub mod tensor_io;
pub mod toy_decoder;

pub use calibration::{
    apply_calibration, bisect_scale, calibrate_search, calibration_objective, CalibrationParams, CalibrationResult,
    ObjectiveWeights,
};
pub use distribution::{
    corpus_stats, label_smooth, normalized_entropy, softmax, token_stats, LogitGrid, ProbGrid, TargetStats, TokenStats,
};
pub use error::{Error, Result};
pub use lcdm::{cosine_pseudo_logits, lcdm_pipeline, uncertainty_grid, weighted_code_vectors, Codebook};
pub use matrix::Matrix;
pub use otsu::{otsu_report_grid, otsu_threshold, rank_profile, OtsuReport, OtsuWeighting};
pub use tensor_io::{read_tensor, write_tensor, DType, StatsConfig, Tensor};
