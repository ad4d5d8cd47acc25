//! Latent diffusion fine-tuning and sampling at laptop scale.
//!
//! The [`DiffusionBackend`] trait covers the pieces sampling needs;
//! [`TrainableBackend`] adds parameter access and gradients for fine-tuning.
//! [`ToyBackend`] is a small f64 model implementing both.

pub mod backend;
pub mod error;
pub mod finetune;
pub mod generate;
pub mod latent;
pub mod scheduler;
pub mod tokenizer;

pub use backend::{fingerprint, Component, DiffusionBackend, Lineage, ParamTensor, ToyBackend, ToyBackendConfig, TrainableBackend};
pub use error::{DiffusionError, Result};
pub use finetune::{
    add_placeholder_token, denoising_loss, finetune_dreambooth, finetune_textual_inversion, FinetuneConfig, LrSchedule, Regime,
    StepRecord, TextualInversionConfig,
};
pub use generate::{generate, write_images, GeneratedImage, GenerationJob};
pub use latent::Latent;
pub use scheduler::{NoiseScheduler, SchedulerConfig};
pub use tokenizer::Tokenizer;
