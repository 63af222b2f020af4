use crate::error::{Error, Result};

/// One encoder stage of the U-Net.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DownStage {
    /// Residual sub-blocks in the stage.
    pub blocks: usize,
    /// Channel multiplier relative to `base_channels`.
    pub mult: usize,
    /// Whether each residual sub-block carries a transformer (self + cross attention).
    pub attention: bool,
    /// Whether the stage ends with a stride-2 convolution.
    pub downsample: bool,
}

/// Decoder stage, derived by mirroring the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpStage {
    pub blocks: usize,
    pub mult: usize,
    pub attention: bool,
    pub upsample: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub preset: String,
    pub base_channels: usize,
    pub down: Vec<DownStage>,
    pub mid_blocks: usize,
    /// The first mid sub-block carries a transformer.
    pub mid_attention: bool,
    pub head_dim: usize,
    pub context_dim: usize,
    /// Tokens per prompt embedding.
    pub context_len: usize,
    pub latent_channels: usize,
    pub latent_size: usize,
    pub norm_groups: usize,
    /// Width of the timestep MLP; the sinusoidal input has `base_channels` features.
    pub time_embed_dim: usize,
}

impl ArchConfig {
    /// Two-stage toy network for desk-scale experiments.
    pub fn toy16() -> Self {
        Self {
            preset: "toy16".into(),
            base_channels: 16,
            down: vec![
                DownStage {
                    blocks: 2,
                    mult: 1,
                    attention: true,
                    downsample: true,
                },
                DownStage {
                    blocks: 2,
                    mult: 2,
                    attention: true,
                    downsample: false,
                },
            ],
            mid_blocks: 2,
            mid_attention: true,
            head_dim: 8,
            context_dim: 32,
            context_len: 8,
            latent_channels: 3,
            latent_size: 16,
            norm_groups: 8,
            time_embed_dim: 64,
        }
    }

    /// Stable Diffusion 2.1 shaped U-Net, used for parameter and cost accounting.
    pub fn sd21_shaped() -> Self {
        let stage = |mult, attention, downsample| DownStage {
            blocks: 2,
            mult,
            attention,
            downsample,
        };
        Self {
            preset: "sd21-shaped".into(),
            base_channels: 320,
            down: vec![
                stage(1, true, true),
                stage(2, true, true),
                stage(4, true, true),
                stage(4, false, false),
            ],
            mid_blocks: 2,
            mid_attention: true,
            head_dim: 64,
            context_dim: 1024,
            context_len: 77,
            latent_channels: 4,
            latent_size: 64,
            norm_groups: 32,
            time_embed_dim: 1280,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy16" => Ok(Self::toy16()),
            "sd21-shaped" | "sd21" => Ok(Self::sd21_shaped()),
            other => Err(Error::Config(format!("unknown architecture preset `{other}`"))),
        }
    }

    pub fn channels(&self, mult: usize) -> usize {
        self.base_channels * mult
    }

    /// Decoder stages in execution order.
    pub fn up_stages(&self) -> Vec<UpStage> {
        let d = self.down.len();
        (0..d)
            .map(|u| {
                let mirror = &self.down[d - 1 - u];
                UpStage {
                    blocks: mirror.blocks + 1,
                    mult: mirror.mult,
                    attention: mirror.attention,
                    upsample: u + 1 < d,
                }
            })
            .collect()
    }

    /// Canonical text form, stable across runs; used for artifact hashing.
    pub fn canonical(&self) -> String {
        let stages: Vec<String> = self
            .down
            .iter()
            .map(|s| format!("{}:{}:{}:{}", s.blocks, s.mult, s.attention as u8, s.downsample as u8))
            .collect();
        format!(
            "preset={};base={};down={};mid={}:{};head={};ctx={}x{};latent={}x{};groups={};temb={}",
            self.preset,
            self.base_channels,
            stages.join(","),
            self.mid_blocks,
            self.mid_attention as u8,
            self.head_dim,
            self.context_len,
            self.context_dim,
            self.latent_channels,
            self.latent_size,
            self.norm_groups,
            self.time_embed_dim
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.down.is_empty() {
            return bad("at least one down stage is required".into());
        }
        if self.base_channels == 0 || self.latent_channels == 0 || self.latent_size == 0 {
            return bad("channel and size settings must be positive".into());
        }
        if self.mid_blocks == 0 {
            return bad("the mid stage needs at least one sub-block".into());
        }
        if self.norm_groups == 0 || self.head_dim == 0 || self.context_len == 0 {
            return bad("norm groups, head dim and context length must be positive".into());
        }
        if self.base_channels % 2 != 0 {
            return bad("base channels must be even for the sinusoidal embedding".into());
        }
        let last = self.down.len() - 1;
        for (i, s) in self.down.iter().enumerate() {
            if s.blocks == 0 || s.mult == 0 {
                return bad(format!("down stage {} is empty", i + 1));
            }
            // skip pushes and pops only balance when every stage but the last downsamples
            if s.downsample != (i < last) {
                return bad(format!(
                    "down stage {} must {}have a downsampler",
                    i + 1,
                    if i < last { "" } else { "not " }
                ));
            }
        }
        if self.latent_size % (1 << last) != 0 {
            return bad(format!("latent size {} not divisible by 2^{last}", self.latent_size));
        }
        let g = self.norm_groups;
        let check = |c: usize, what: &str| -> Result<()> {
            if c % g != 0 {
                return Err(Error::Config(format!(
                    "{what} channels {c} not divisible by {g} norm groups"
                )));
            }
            Ok(())
        };
        check(self.base_channels, "base")?;
        for s in &self.down {
            check(self.channels(s.mult), "stage")?;
            if s.attention && self.channels(s.mult) % self.head_dim != 0 {
                return bad(format!(
                    "attention channels {} not divisible by head dim {}",
                    self.channels(s.mult),
                    self.head_dim
                ));
            }
        }
        if self.mid_attention && self.channels(self.down[last].mult) % self.head_dim != 0 {
            return bad("mid attention channels not divisible by head dim".into());
        }
        Ok(())
    }
}
