//! Bottleneck token decoder.
//!
//! The pyramid is fused onto a stride-16 token lattice (`T0`), refined
//! globally by multi-head self-attention (`T1 = T0 + Z`) and locally by
//! parallel dilated depthwise branches (`T2 = T1 + φ(T1)`). A single
//! cross-attention reads the high-resolution stream with `T2` as queries
//! (`C`), a shallow convolutional branch restores mid-frequency texture
//! (`B`), and a per-image softmax gate blends `{T0, C, B}` into the final
//! tokens.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::layers::{Attention, Conv, Linear};
use crate::model::Components;
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

/// Input pixels per lattice cell along each axis.
pub const LATTICE_STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub width: usize,
    pub heads: usize,
    pub dilations: Vec<usize>,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            dilations: vec![1, 2, 3],
            num_classes: 6,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("decoder dilations must be non-empty and >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Per-image blend weights for `(T0, C, B)`; non-negative, summing to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateWeights {
    pub w: [f64; 3],
}

impl GateWeights {
    pub const BOTTLENECK_ONLY: GateWeights = GateWeights { w: [1.0, 0.0, 0.0] };
}

/// Tape handles for every intermediate of one decode.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub t0: Var,
    pub t1: Option<Var>,
    pub t2: Var,
    pub f_hr: Option<Var>,
    pub cross: Option<Var>,
    pub texture: Option<Var>,
    pub tokens: Var,
    pub gate: GateWeights,
    pub logits: Var,
    pub class_attn: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    proj: Vec<Linear>,
    fuse: Linear,
    attn: Attention,
    depthwise: Vec<ParamId>,
    mix: Linear,
    hr_proj: Linear,
    cross: Attention,
    texture1: Conv,
    texture2: Conv,
    gate_u: ParamId,
    gate_beta: ParamId,
    head: Linear,
    diag_head: Linear,
}

impl Decoder {
    pub fn new(
        cfg: &DecoderConfig,
        enc: &EncoderConfig,
        ps: &mut ParamSet,
        init: &mut Init,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let ch = enc.stage_channels;
        let proj = (0..4)
            .map(|i| Linear::new(ps, init, &format!("decoder.proj{}", i + 1), ch[i], d, true))
            .collect();
        let fuse = Linear::new(ps, init, "decoder.fuse", 4 * d, d, true);
        let attn = Attention::new(ps, init, "decoder.gltr.attn", d, d, cfg.heads, false)?;
        let depthwise = cfg
            .dilations
            .iter()
            .map(|dil| ps.add(format!("decoder.gltr.local.dw{dil}"), init.fan_in(&[d, 3, 3], 9)))
            .collect();
        let mix = Linear::new(ps, init, "decoder.gltr.local.mix", d, d, false);
        let hr_proj = Linear::new(ps, init, "decoder.rad.hr_proj", ch[0], d, true);
        let cross = Attention::new(ps, init, "decoder.rad.cross", d, d, cfg.heads, false)?;
        let texture1 = Conv::new(ps, init, "decoder.rad.texture1", ch[1], d, 3, 1, 1);
        let texture2 = Conv::new(ps, init, "decoder.rad.texture2", d, d, 3, 1, 1);
        let gate_u = ps.add("decoder.rad.gate.u", Tensor::zeros(&[3, d]));
        let gate_beta = ps.add("decoder.rad.gate.beta", Tensor::zeros(&[3, 1]));
        let head = Linear::new(ps, init, "decoder.head", d, cfg.num_classes, true);
        let diag_head = Linear::new(ps, init, "decoder.diag_head", d, cfg.num_classes, true);
        Ok(Self {
            cfg: cfg.clone(),
            proj,
            fuse,
            attn,
            depthwise,
            mix,
            hr_proj,
            cross,
            texture1,
            texture2,
            gate_u,
            gate_beta,
            head,
            diag_head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Lattice extent `(H_f, W_f)` implied by a pyramid: the stride-16 grid.
    pub fn lattice_of(tape: &Tape, pyr: &FeaturePyramid) -> Result<(usize, usize)> {
        let (_, h1, w1) = tape.value(pyr.f[0]).chw()?;
        for (i, f) in pyr.f.iter().enumerate() {
            let (_, h, w) = tape.value(*f).chw()?;
            let s = 1 << i;
            if h * s != h1 || w * s != w1 {
                return Err(Error::Shape {
                    op: "fuse_bottleneck",
                    lhs: vec![h1 / s, w1 / s],
                    rhs: vec![h, w],
                });
            }
        }
        Ok((h1 / 4, w1 / 4))
    }

    /// Projects each `f_i` to the decoder width, resizes onto the lattice,
    /// concatenates and reduces back to width `D` (`T0`).
    pub fn fuse_bottleneck(&self, tape: &mut Tape, ps: &ParamSet, pyr: &FeaturePyramid) -> Result<Var> {
        let (hf, wf) = Self::lattice_of(tape, pyr)?;
        let mut aligned = Vec::with_capacity(4);
        for (f, proj) in pyr.f.iter().zip(&self.proj) {
            let p = proj.forward(tape, ps, *f)?;
            aligned.push(tape.bilinear_resize(p, hf, wf)?);
        }
        let cat = tape.concat(&aligned)?;
        let fused = self.fuse.forward(tape, ps, cat)?;
        tape.relu(fused)
    }

    /// `T1 = T0 + Concat_h[softmax(Q_h K_hᵀ / √d_h) V_h] W_o`.
    pub fn global_attend(&self, tape: &mut Tape, ps: &ParamSet, t0: Var) -> Result<Var> {
        let z = self.attn.forward(tape, ps, t0, t0)?;
        tape.add(t0, z)
    }

    /// `T2 = T1 + mix(ReLU(Σ_d depthwise_d(T1)))`.
    pub fn local_refine(&self, tape: &mut Tape, ps: &ParamSet, t1: Var) -> Result<Var> {
        let mut acc = None;
        for (&k, &dil) in self.depthwise.iter().zip(&self.cfg.dilations) {
            let kv = tape.param(ps, k);
            let branch = tape.depthwise_conv2d(t1, kv, dil)?;
            acc = Some(match acc {
                None => branch,
                Some(a) => tape.add(a, branch)?,
            });
        }
        let act = tape.relu(acc.expect("at least one dilation"))?;
        let phi = self.mix.forward(tape, ps, act)?;
        tape.add(t1, phi)
    }

    /// Projects `f1` to the decoder width; the result is the high-resolution
    /// key/value source.
    pub fn hr_feature(&self, tape: &mut Tape, ps: &ParamSet, f1: Var) -> Result<Var> {
        self.hr_proj.forward(tape, ps, f1)
    }

    /// Bottleneck tokens query the high-resolution feature once (`C`).
    pub fn hr_cross_attend(&self, tape: &mut Tape, ps: &ParamSet, t2: Var, f_hr: Var) -> Result<Var> {
        self.cross.forward(tape, ps, t2, f_hr)
    }

    /// Two 3×3 conv + ReLU layers on `f2`, resized onto the lattice (`B`).
    pub fn texture_branch(&self, tape: &mut Tape, ps: &ParamSet, pyr: &FeaturePyramid) -> Result<Var> {
        let (hf, wf) = Self::lattice_of(tape, pyr)?;
        let h = self.texture1.forward(tape, ps, pyr.f2())?;
        let h = tape.relu(h)?;
        let h = self.texture2.forward(tape, ps, h)?;
        let h = tape.relu(h)?;
        tape.bilinear_resize(h, hf, wf)
    }

    /// `z = mean(T0)`, `e_k = <u_k, z> + β_k`, `w = softmax(e)`,
    /// `T̂ = w_1 T0 + w_2 C + w_3 B`.
    pub fn gated_mix(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        t0: Var,
        c: Var,
        b: Var,
    ) -> Result<(Var, GateWeights)> {
        for other in [c, b] {
            if tape.shape(other) != tape.shape(t0) {
                return Err(Error::Shape {
                    op: "gated_mix",
                    lhs: tape.shape(t0).to_vec(),
                    rhs: tape.shape(other).to_vec(),
                });
            }
        }
        let (d, hf, wf) = tape.value(t0).chw()?;
        let n = hf * wf;
        let flat = tape.reshape(t0, &[d, n])?;
        let avg = tape.constant(Tensor::full(&[n, 1], 1.0 / n as f64));
        let z = tape.matmul(flat, avg)?;
        let u = tape.param(ps, self.gate_u);
        let beta = tape.param(ps, self.gate_beta);
        let e = tape.matmul(u, z)?;
        let e = tape.add(e, beta)?;
        let w = tape.softmax(e, 0)?;
        let wv = tape.value(w).data();
        let gate = GateWeights {
            w: [wv[0], wv[1], wv[2]],
        };
        let mut mixed = None;
        for (k, src) in [t0, c, b].into_iter().enumerate() {
            let wk = tape.slice(w, k, k + 1)?;
            let term = tape.scale_by(src, wk)?;
            mixed = Some(match mixed {
                None => term,
                Some(m) => tape.add(m, term)?,
            });
        }
        Ok((mixed.expect("three branches"), gate))
    }

    /// Full decode on the lattice: fusion, optional global–local refinement,
    /// optional gated high-resolution fusion, then the classifier head.
    ///
    /// With `rad` off the final tokens are `T2` (which is `T0` when `gltr`
    /// is also off) and the gate is reported as `(1, 0, 0)`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        pyr: &FeaturePyramid,
        on: &Components,
    ) -> Result<DecodeOutput> {
        let t0 = self.fuse_bottleneck(tape, ps, pyr)?;
        let (t1, t2) = if on.gltr {
            let t1 = self.global_attend(tape, ps, t0)?;
            (Some(t1), self.local_refine(tape, ps, t1)?)
        } else {
            (None, t0)
        };
        let (tokens, gate, f_hr, cross, texture) = if on.rad {
            let f_hr = self.hr_feature(tape, ps, pyr.f1())?;
            let c = self.hr_cross_attend(tape, ps, t2, f_hr)?;
            let b = self.texture_branch(tape, ps, pyr)?;
            let (tokens, gate) = self.gated_mix(tape, ps, t0, c, b)?;
            (tokens, gate, Some(f_hr), Some(c), Some(b))
        } else {
            (t2, GateWeights::BOTTLENECK_ONLY, None, None, None)
        };
        let logits = self.head.forward(tape, ps, tokens)?;
        let class_attn = if on.rad {
            Some(self.diag_head.forward(tape, ps, tokens)?)
        } else {
            None
        };
        Ok(DecodeOutput {
            t0,
            t1,
            t2,
            f_hr,
            cross,
            texture,
            tokens,
            gate,
            logits,
            class_attn,
        })
    }
}
