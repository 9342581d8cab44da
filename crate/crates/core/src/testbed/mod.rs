//! Desk-scale stand-ins for a full latent-diffusion pipeline.
//!
//! Two attention sources are provided: a training-free analytic field whose
//! gradients are exact and cheap, and a small trainable denoiser with one
//! cross-attention block, trained on synthetic blob scenes.

pub mod analytic;
pub mod checkpoint;
pub mod denoiser;
pub mod embedding;
pub mod nn;
pub mod occurrence;
pub mod recipe;
pub mod scene;
pub mod schedule;

pub use analytic::AnalyticAttention;
pub use denoiser::{
    denoise_step, heldout_loss, train_toy_denoiser, NoisePredictor, PromptedDenoiser, ToyDenoiser, ToyDenoiserConfig,
    TrainConfig, TrainReport,
};
pub use embedding::TokenEmbeddingTable;
pub use occurrence::{blob_occurrence, count_occurrences, BlobTemplate, Occurrence};
pub use scene::{gen_scene_dataset, SceneFamily, SceneSample, SceneSpec, TaskPrompt};
pub use schedule::{add_noise, predict_clean, DdimSampler, NoiseSchedule};
