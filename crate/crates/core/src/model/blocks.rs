//! Sub-block inventory of a U-Net: labels, channel plumbing, skip traffic and
//! parameter shapes. The compute graph builder walks this list in order.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

use super::arch::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    ConvIn,
    /// Residual block.
    Res,
    /// Residual block followed by a transformer.
    ResAttn,
    Downsample,
    Upsample,
    ConvOut,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::ConvIn => "conv_in",
            BlockKind::Res => "R",
            BlockKind::ResAttn => "RA",
            BlockKind::Downsample => "D",
            BlockKind::Upsample => "U",
            BlockKind::ConvOut => "conv_out",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Section {
    Stem,
    Down,
    Mid,
    Up,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipAction {
    None,
    /// Output is pushed onto the skip stack.
    Push,
    /// Input is concatenated with the top of the skip stack.
    Pop,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// A projection inside a transformer that can carry a low-rank adapter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnProjection {
    /// `<block>.attn.attn{1,2}.to_{q,k,v,out}`; the weight is `<id>.weight`.
    pub id: String,
    pub block: String,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug)]
pub struct SubBlock {
    /// `"<stage>-<index>"`, or `conv_in` / `conv_out`.
    pub label: String,
    pub kind: BlockKind,
    pub section: Section,
    /// 1-based stage number; 0 for the stem and head.
    pub stage: usize,
    pub in_channels: usize,
    /// Channels popped from the skip stack (0 unless `skip == Pop`).
    pub skip_channels: usize,
    pub out_channels: usize,
    pub in_res: usize,
    pub out_res: usize,
    pub skip: SkipAction,
    pub params: Vec<ParamSpec>,
}

impl SubBlock {
    pub fn num_params(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }

    pub fn has_attention(&self) -> bool {
        self.kind == BlockKind::ResAttn
    }

    /// Conv-in and conv-out can never be removed.
    pub fn removable(&self) -> bool {
        !matches!(self.kind, BlockKind::ConvIn | BlockKind::ConvOut)
    }
}

/// Pseudo-block owning the timestep MLP.
pub const TIME_EMBED: &str = "time_embed";

#[derive(Clone, Debug)]
pub struct BlockGraph {
    pub config: ArchConfig,
    pub blocks: Vec<SubBlock>,
    /// Timestep MLP parameters, shared by every residual block.
    pub time_embed: Vec<ParamSpec>,
    index: BTreeMap<String, usize>,
}

fn spec(name: String, dims: &[usize]) -> ParamSpec {
    ParamSpec {
        name,
        dims: dims.to_vec(),
    }
}

fn res_params(p: &str, cin: usize, cout: usize, temb: usize) -> Vec<ParamSpec> {
    let mut v = vec![
        spec(format!("{p}.res.norm1.weight"), &[cin]),
        spec(format!("{p}.res.norm1.bias"), &[cin]),
        spec(format!("{p}.res.conv1.weight"), &[cout, cin, 3, 3]),
        spec(format!("{p}.res.conv1.bias"), &[cout]),
        spec(format!("{p}.res.time_proj.weight"), &[cout, temb]),
        spec(format!("{p}.res.time_proj.bias"), &[cout]),
        spec(format!("{p}.res.norm2.weight"), &[cout]),
        spec(format!("{p}.res.norm2.bias"), &[cout]),
        spec(format!("{p}.res.conv2.weight"), &[cout, cout, 3, 3]),
        spec(format!("{p}.res.conv2.bias"), &[cout]),
    ];
    if cin != cout {
        v.push(spec(format!("{p}.res.shortcut.weight"), &[cout, cin, 1, 1]));
        v.push(spec(format!("{p}.res.shortcut.bias"), &[cout]));
    }
    v
}

fn attn_params(p: &str, c: usize, ctx: usize) -> Vec<ParamSpec> {
    let a = format!("{p}.attn");
    let mut v = vec![
        spec(format!("{a}.norm.weight"), &[c]),
        spec(format!("{a}.norm.bias"), &[c]),
        spec(format!("{a}.proj_in.weight"), &[c, c]),
        spec(format!("{a}.proj_in.bias"), &[c]),
    ];
    for (ln, attn, kv) in [("ln1", "attn1", c), ("ln2", "attn2", ctx)] {
        v.push(spec(format!("{a}.{ln}.weight"), &[c]));
        v.push(spec(format!("{a}.{ln}.bias"), &[c]));
        v.push(spec(format!("{a}.{attn}.to_q.weight"), &[c, c]));
        v.push(spec(format!("{a}.{attn}.to_k.weight"), &[c, kv]));
        v.push(spec(format!("{a}.{attn}.to_v.weight"), &[c, kv]));
        v.push(spec(format!("{a}.{attn}.to_out.weight"), &[c, c]));
        v.push(spec(format!("{a}.{attn}.to_out.bias"), &[c]));
    }
    v.extend([
        spec(format!("{a}.ln3.weight"), &[c]),
        spec(format!("{a}.ln3.bias"), &[c]),
        spec(format!("{a}.ff.proj.weight"), &[8 * c, c]),
        spec(format!("{a}.ff.proj.bias"), &[8 * c]),
        spec(format!("{a}.ff.out.weight"), &[c, 4 * c]),
        spec(format!("{a}.ff.out.bias"), &[c]),
        spec(format!("{a}.proj_out.weight"), &[c, c]),
        spec(format!("{a}.proj_out.bias"), &[c]),
    ]);
    v
}

fn conv_params(p: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        spec(format!("{p}.conv.weight"), &[c, c, 3, 3]),
        spec(format!("{p}.conv.bias"), &[c]),
    ]
}

struct Builder {
    blocks: Vec<SubBlock>,
    stack: Vec<usize>,
    ch: usize,
    res: usize,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn add(
        &mut self,
        label: String,
        kind: BlockKind,
        section: Section,
        stage: usize,
        out_channels: usize,
        out_res: usize,
        skip: SkipAction,
        params: Vec<ParamSpec>,
    ) {
        let skip_channels = match skip {
            SkipAction::Pop => self.stack.pop().expect("balanced skip stack"),
            _ => 0,
        };
        if skip == SkipAction::Push {
            self.stack.push(out_channels);
        }
        self.blocks.push(SubBlock {
            label,
            kind,
            section,
            stage,
            in_channels: self.ch,
            skip_channels,
            out_channels,
            in_res: self.res,
            out_res,
            skip,
            params,
        });
        self.ch = out_channels;
        self.res = out_res;
    }
}

impl BlockGraph {
    pub fn new(config: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let temb = c.time_embed_dim;
        let ctx = c.context_dim;
        let base = c.base_channels;
        let mut b = Builder {
            blocks: Vec::new(),
            stack: Vec::new(),
            ch: c.latent_channels,
            res: c.latent_size,
        };

        b.add(
            "conv_in".into(),
            BlockKind::ConvIn,
            Section::Stem,
            0,
            base,
            c.latent_size,
            SkipAction::Push,
            vec![
                spec("conv_in.weight".into(), &[base, c.latent_channels, 3, 3]),
                spec("conv_in.bias".into(), &[base]),
            ],
        );

        let mut stage = 0;
        for s in &c.down {
            stage += 1;
            let cout = c.channels(s.mult);
            for i in 0..s.blocks {
                let label = format!("{stage}-{}", i + 1);
                let mut params = res_params(&label, b.ch, cout, temb);
                let kind = if s.attention {
                    params.extend(attn_params(&label, cout, ctx));
                    BlockKind::ResAttn
                } else {
                    BlockKind::Res
                };
                let res = b.res;
                b.add(label, kind, Section::Down, stage, cout, res, SkipAction::Push, params);
            }
            if s.downsample {
                let label = format!("{stage}-{}", s.blocks + 1);
                let params = conv_params(&label, cout);
                let res = b.res / 2;
                b.add(
                    label,
                    BlockKind::Downsample,
                    Section::Down,
                    stage,
                    cout,
                    res,
                    SkipAction::Push,
                    params,
                );
            }
        }

        stage += 1;
        let mid_ch = b.ch;
        for i in 0..c.mid_blocks {
            let label = format!("{stage}-{}", i + 1);
            let mut params = res_params(&label, mid_ch, mid_ch, temb);
            let kind = if c.mid_attention && i == 0 {
                params.extend(attn_params(&label, mid_ch, ctx));
                BlockKind::ResAttn
            } else {
                BlockKind::Res
            };
            let res = b.res;
            b.add(label, kind, Section::Mid, stage, mid_ch, res, SkipAction::None, params);
        }

        for u in c.up_stages() {
            stage += 1;
            let cout = c.channels(u.mult);
            for i in 0..u.blocks {
                let label = format!("{stage}-{}", i + 1);
                let skip_ch = *b
                    .stack
                    .last()
                    .ok_or_else(|| Error::Config("skip stack exhausted while building decoder".into()))?;
                let mut params = res_params(&label, b.ch + skip_ch, cout, temb);
                let kind = if u.attention {
                    params.extend(attn_params(&label, cout, ctx));
                    BlockKind::ResAttn
                } else {
                    BlockKind::Res
                };
                let res = b.res;
                b.add(label, kind, Section::Up, stage, cout, res, SkipAction::Pop, params);
            }
            if u.upsample {
                let label = format!("{stage}-{}", u.blocks + 1);
                let params = conv_params(&label, cout);
                let res = b.res * 2;
                b.add(
                    label,
                    BlockKind::Upsample,
                    Section::Up,
                    stage,
                    cout,
                    res,
                    SkipAction::None,
                    params,
                );
            }
        }
        if !b.stack.is_empty() {
            return Err(Error::Config(format!(
                "{} skip connections left unconsumed",
                b.stack.len()
            )));
        }

        let res = b.res;
        b.add(
            "conv_out".into(),
            BlockKind::ConvOut,
            Section::Head,
            0,
            c.latent_channels,
            res,
            SkipAction::None,
            vec![
                spec("conv_out.norm.weight".into(), &[base]),
                spec("conv_out.norm.bias".into(), &[base]),
                spec("conv_out.conv.weight".into(), &[c.latent_channels, base, 3, 3]),
                spec("conv_out.conv.bias".into(), &[c.latent_channels]),
            ],
        );

        let time_embed = vec![
            spec("time_embed.linear_1.weight".into(), &[temb, base]),
            spec("time_embed.linear_1.bias".into(), &[temb]),
            spec("time_embed.linear_2.weight".into(), &[temb, temb]),
            spec("time_embed.linear_2.bias".into(), &[temb]),
        ];
        let index = b.blocks.iter().enumerate().map(|(i, s)| (s.label.clone(), i)).collect();
        Ok(Self {
            config: config.clone(),
            blocks: b.blocks,
            time_embed,
            index,
        })
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn block(&self, label: &str) -> Option<&SubBlock> {
        self.position(label).map(|i| &self.blocks[i])
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|b| b.label.as_str())
    }

    pub fn total_params(&self) -> usize {
        self.time_embed.iter().map(ParamSpec::numel).sum::<usize>()
            + self.blocks.iter().map(SubBlock::num_params).sum::<usize>()
    }

    /// Every parameter with the label of the block that owns it.
    pub fn param_specs(&self) -> impl Iterator<Item = (&str, &ParamSpec)> {
        self.time_embed.iter().map(|p| (TIME_EMBED, p)).chain(
            self.blocks
                .iter()
                .flat_map(|b| b.params.iter().map(move |p| (b.label.as_str(), p))),
        )
    }

    /// Block owning parameter `name`, or `time_embed`.
    pub fn owner_of(&self, name: &str) -> Option<&str> {
        if name.starts_with("time_embed.") {
            return Some(TIME_EMBED);
        }
        let head = name.split('.').next()?;
        self.index.get(head).map(|&i| self.blocks[i].label.as_str())
    }

    /// Attention projections eligible for adapters, in block order.
    pub fn attn_projections(&self) -> Vec<AttnProjection> {
        let ctx = self.config.context_dim;
        let mut out = Vec::new();
        for b in self.blocks.iter().filter(|b| b.has_attention()) {
            let c = b.out_channels;
            for attn in ["attn1", "attn2"] {
                for proj in ["to_q", "to_k", "to_v", "to_out"] {
                    let d_in = if attn == "attn2" && (proj == "to_k" || proj == "to_v") {
                        ctx
                    } else {
                        c
                    };
                    out.push(AttnProjection {
                        id: format!("{}.attn.{attn}.{proj}", b.label),
                        block: b.label.clone(),
                        d_in,
                        d_out: c,
                    });
                }
            }
        }
        out
    }
}
