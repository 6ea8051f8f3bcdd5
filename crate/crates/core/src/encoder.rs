//! Four-stage hierarchical tokenizer.
//!
//! Stage 1 embeds 7×7 patches at stride 4; stages 2–4 each merge 2×2
//! patches (stride 2). Every stage then runs pre-norm transformer blocks over
//! its flattened grid, giving features at strides 4, 8, 16 and 32.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::layers::{Attention, Conv, Mlp, Norm};
use crate::params::{Init, ParamSet};
use crate::tensor::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_depths: [usize; 4],
    pub heads_per_stage: [usize; 4],
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: [32, 64, 160, 256],
            stage_depths: [2, 2, 2, 2],
            heads_per_stage: [1, 2, 4, 8],
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder in_channels and mlp_ratio must be positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) || self.stage_channels[0] == 0 {
            return Err(Error::Config(format!(
                "stage_channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        for (c, h) in self.stage_channels.iter().zip(&self.heads_per_stage) {
            if *h == 0 || c % h != 0 {
                return Err(Error::Config(format!("stage width {c} not divisible by {h} heads")));
            }
        }
        Ok(())
    }
}

/// Encoder outputs `f1..f4` as tape values, at strides 4, 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f: [Var; 4],
}

impl FeaturePyramid {
    pub fn f1(&self) -> Var {
        self.f[0]
    }

    pub fn f2(&self) -> Var {
        self.f[1]
    }
}

/// Total downsampling factor of the deepest stage.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, ps, x)?;
        let h = self.attn.forward(tape, ps, h, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, ps, x)?;
        let h = self.mlp.forward(tape, ps, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed: Conv,
    merges: Vec<Conv>,
    stages: Vec<Vec<Block>>,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, ps: &mut ParamSet, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels;
        let embed = Conv::new(ps, init, "encoder.embed", cfg.in_channels, ch[0], 7, 4, 3);
        let merges = (1..4)
            .map(|i| Conv::new(ps, init, &format!("encoder.merge{}", i + 1), ch[i - 1], ch[i], 2, 2, 0))
            .collect();
        let mut stages = Vec::new();
        for i in 0..4 {
            let mut blocks = Vec::new();
            for b in 0..cfg.stage_depths[i] {
                let name = format!("encoder.stage{}.block{b}", i + 1);
                blocks.push(Block {
                    norm1: Norm::new(ps, &format!("{name}.norm1"), ch[i]),
                    attn: Attention::new(
                        ps,
                        init,
                        &format!("{name}.attn"),
                        ch[i],
                        ch[i],
                        cfg.heads_per_stage[i],
                        true,
                    )?,
                    norm2: Norm::new(ps, &format!("{name}.norm2"), ch[i]),
                    mlp: Mlp::new(ps, init, &format!("{name}.mlp"), ch[i], ch[i] * cfg.mlp_ratio),
                });
            }
            stages.push(blocks);
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            merges,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// 7×7 stride-4 convolutional embedding, `(Cin, H, W) -> (C1, H/4, W/4)`.
    pub fn patch_embed(&self, tape: &mut Tape, ps: &ParamSet, image: Var) -> Result<Var> {
        let (c, h, w) = tape.value(image).chw()?;
        if c != self.cfg.in_channels {
            return Err(invalid(
                "patch_embed",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            ));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                multiple: INPUT_MULTIPLE,
            });
        }
        self.embed.forward(tape, ps, image)
    }

    /// 2×2 stride-2 merge into stage `stage` (2, 3 or 4).
    pub fn patch_merge(&self, tape: &mut Tape, ps: &ParamSet, x: Var, stage: usize) -> Result<Var> {
        let (_, h, w) = tape.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("patch_merge", format!("odd spatial extent {h}x{w}")));
        }
        let conv = self
            .merges
            .get(stage.wrapping_sub(2))
            .ok_or_else(|| invalid("patch_merge", format!("no merge into stage {stage}")))?;
        conv.forward(tape, ps, x)
    }

    pub fn encode(&self, tape: &mut Tape, ps: &ParamSet, image: Var) -> Result<FeaturePyramid> {
        let mut x = self.patch_embed(tape, ps, image)?;
        let mut feats = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                x = self.patch_merge(tape, ps, x, i + 1)?;
            }
            for block in &self.stages[i] {
                x = block.forward(tape, ps, x)?;
            }
            feats.push(x);
        }
        Ok(FeaturePyramid {
            f: [feats[0], feats[1], feats[2], feats[3]],
        })
    }
}
