//! The denoising U-Net: architecture, parameters, schedule and conditioning.

mod arch;
mod autoencoder;
mod blocks;
mod params;
mod prompt;
mod schedule;
mod unet;

pub use arch::{ArchConfig, DownStage, UpStage};
pub use autoencoder::AutoencoderStub;
pub use blocks::{AttnProjection, BlockGraph, BlockKind, ParamSpec, Section, SkipAction, SubBlock, TIME_EMBED};
pub use params::ParamStore;
pub use prompt::{embed_prompt, embedding_table, token_id, PromptKind, PromptSpec, IDENTIFIER, PAD, VOCAB};
pub use schedule::{noise_latent, sample_noise, NoiseSchedule};
pub use unet::{
    build_unet_graph, run_lean, tap_forward, timestep_features, unet_forward, Route, UnetGraph, UnetInputs, IN_COND,
    IN_LATENT, IN_TAP, IN_TIME, NORM_EPS, OUT_EPS, OUT_TAP,
};

/// Checks the configuration and lays out its sub-blocks.
pub fn build_unet(config: &ArchConfig) -> crate::Result<BlockGraph> {
    BlockGraph::new(config)
}
