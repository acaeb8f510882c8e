//! A miniature seeded latent denoiser with self- and cross-attention, and a
//! deterministic guided sampler that drives it.
//!
//! Nothing here is trained. The network exists to give the attention
//! interventions realistic data flow: latents, per-layer `Q/K/V`, prompt
//! cross-attention maps, and a two-half guidance batch.

pub mod config;
pub mod hooks;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod sampler;
pub mod scheduler;

pub use config::{DenoiserConfig, LayerId, Stage};
pub use hooks::{AttentionHook, HookChain, HookSite, ImageQkv, NoHook, ValueShift};
pub use model::{Denoiser, ForwardCtx, ForwardOutput, TapRequest, Taps};
pub use prompt::{embed_prompt, unconditional, PromptEmbedding};
pub use sampler::{
    cfg_combine, embedding_seed, sample, CaptureLog, CapturePlan, CaptureRecord, SampleOutput, SamplerSettings,
    TensorKind,
};
pub use scheduler::SchedulerState;

/// Fixed linear map from latent channels to a grey level in `[0, 255]`.
pub fn decode_grayscale(latent: &crate::tensor::Matrix) -> Vec<u8> {
    const WEIGHTS: [f32; 4] = [0.35, 0.25, 0.25, 0.15];
    latent
        .row_iter()
        .map(|row| {
            let g: f32 = row.iter().zip(WEIGHTS.iter().cycle()).map(|(x, w)| x * w).sum();
            (128.0 + 48.0 * g).clamp(0.0, 255.0).round() as u8
        })
        .collect()
}
