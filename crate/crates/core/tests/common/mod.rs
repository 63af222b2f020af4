#![allow(dead_code)]

use hollownet::model::{embed_prompt, sample_noise, ArchConfig, BlockGraph, PromptSpec};
use hollownet::numerics::Tensor;

pub fn toy() -> BlockGraph {
    BlockGraph::new(&ArchConfig::toy16()).unwrap()
}

pub fn latent(g: &BlockGraph, n: usize, seed: u64) -> Tensor {
    let c = &g.config;
    sample_noise(seed, &[n, c.latent_channels, c.latent_size, c.latent_size])
}

pub fn cond(g: &BlockGraph, class: &str, instance: bool) -> Tensor {
    let p = if instance {
        PromptSpec::instance(class, 0)
    } else {
        PromptSpec::prior(class, 1)
    };
    embed_prompt(&p, 7, g.config.context_dim, g.config.context_len).unwrap()
}

pub fn random_cond(g: &BlockGraph, seed: u64) -> Tensor {
    sample_noise(seed, &[1, g.config.context_len, g.config.context_dim])
}

/// Timesteps spread over the schedule, one per case.
pub fn timestep(case: u64) -> usize {
    1 + ((case * 7919 + 13) % 1000) as usize
}
