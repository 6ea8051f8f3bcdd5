//! The full segmentation network: encoder, lattice decoder, point
//! refinement, and the training objective wired together.

use serde::{Deserialize, Serialize};

use crate::capr::{self, Capr, CaprConfig, UncertaintySelection};
use crate::decoder::{DecodeOutput, Decoder, DecoderConfig, GateWeights, LATTICE_STRIDE};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{invalid, Error, Result};
use crate::labels::LabelMask;
use crate::losses::{self, BoundaryBand, LossConfig, LossParts};
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

/// Component toggles. Disabled components are never evaluated, so they
/// leave no trace on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    /// Global self-attention and dilated local refinement on the lattice.
    pub gltr: bool,
    /// High-resolution cross-attention, texture branch, three-way gate and
    /// the class-attention head supervised by the diagonal loss.
    pub rad: bool,
    /// Uncertainty-selected point refinement.
    pub capr: bool,
    /// Boundary-band consistency loss (training only).
    pub bbl: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::ALL
    }
}

impl Components {
    pub const ALL: Components = Components {
        gltr: true,
        rad: true,
        capr: true,
        bbl: true,
    };
    pub const NONE: Components = Components {
        gltr: false,
        rad: false,
        capr: false,
        bbl: false,
    };
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub capr: CaprConfig,
}

impl ModelConfig {
    /// A very small network for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                in_channels: 3,
                stage_channels: [4, 6, 8, 10],
                stage_depths: [1, 1, 1, 1],
                heads_per_stage: [1, 2, 2, 2],
                mlp_ratio: 2,
            },
            decoder: DecoderConfig {
                width: 8,
                heads: 2,
                dilations: vec![1, 2, 3],
                num_classes: 6,
            },
            capr: CaprConfig {
                k: Some(48),
                iterations: 1,
                hidden: 8,
            },
        }
    }
}

/// Per-forward overrides.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Fixed refinement sites, one selection per pass, instead of the
    /// margin-based choice. Used to hold the (non-differentiable) selection
    /// constant under finite differences.
    pub selections: Option<&'a [UncertaintySelection]>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub image: Var,
    pub pyramid: FeaturePyramid,
    pub decode: DecodeOutput,
    /// Upsampled lattice logits before refinement.
    pub base_logits: Var,
    /// Final full-resolution logits.
    pub logits: Var,
    pub f_hr_up: Option<Var>,
    pub selections: Vec<UncertaintySelection>,
    pub mlp_evals: usize,
}

/// Ground truth prepared for one training sample.
#[derive(Clone, Debug)]
pub struct Targets {
    pub gt: LabelMask,
    pub gt_lattice: LabelMask,
    pub band: BoundaryBand,
}

impl Targets {
    pub fn new(gt: &LabelMask, cfg: &LossConfig) -> Result<Self> {
        let gt_lattice = losses::downsample_majority(gt, LATTICE_STRIDE)?;
        let band = losses::build_band(&gt_lattice, cfg.r_band, cfg.r_ring)?;
        Ok(Self {
            gt: gt.clone(),
            gt_lattice,
            band,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub parts: LossParts,
    pub seg_all_ignored: bool,
}

/// Values of each loss term after a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub seg: f64,
    pub diag: f64,
    pub bbl: f64,
}

impl LossBreakdown {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossValues {
            total: tape.value(self.total).item(),
            seg: tape.value(self.parts.seg).item(),
            diag: get(self.parts.diag),
            bbl: get(self.parts.bbl),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub labels: LabelMask,
    pub logits: Tensor,
    pub gate: GateWeights,
    pub mlp_evals: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    components: Components,
    params: ParamSet,
    encoder: Encoder,
    decoder: Decoder,
    capr: Capr,
    bbl_scale: ParamId,
    bbl_bias: ParamId,
}

impl Model {
    pub fn new(cfg: &ModelConfig, components: Components, seed: u64) -> Result<Self> {
        let mut ps = ParamSet::new();
        let mut init = Init::new(seed);
        let encoder = Encoder::new(&cfg.encoder, &mut ps, &mut init)?;
        let decoder = Decoder::new(&cfg.decoder, &cfg.encoder, &mut ps, &mut init)?;
        let capr = Capr::new(
            &cfg.capr,
            cfg.encoder.stage_channels[0],
            cfg.decoder.num_classes,
            &mut ps,
            &mut init,
        )?;
        if cfg.capr.iterations == 0 {
            return Err(Error::Config("capr iterations must be >= 1".into()));
        }
        let bbl_scale = ps.add("bbl.scale", Tensor::scalar(10.0));
        let bbl_bias = ps.add("bbl.bias", Tensor::scalar(0.0));
        Ok(Self {
            cfg: cfg.clone(),
            components,
            params: ps,
            encoder,
            decoder,
            capr,
            bbl_scale,
            bbl_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn components(&self) -> Components {
        self.components
    }

    pub fn set_components(&mut self, c: Components) {
        self.components = c;
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn capr(&self) -> &Capr {
        &self.capr
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.decoder.num_classes
    }

    pub fn forward(&self, tape: &mut Tape, image: Var, opts: ForwardOptions<'_>) -> Result<ForwardOutput> {
        let ps = &self.params;
        let (_, h, w) = tape.value(image).chw()?;
        let pyramid = self.encoder.encode(tape, ps, image)?;
        let decode = self.decoder.decode(tape, ps, &pyramid, &self.components)?;
        let base_logits = capr::upsample_logits(tape, decode.logits, h, w)?;

        let mut logits = base_logits;
        let mut selections = Vec::new();
        let mut mlp_evals = 0;
        let mut f_hr_up = None;
        if self.components.capr {
            let k = self.cfg.capr.points_for(h * w);
            let passes = opts.selections.map_or(self.cfg.capr.iterations, <[_]>::len);
            let hr = tape.bilinear_resize(pyramid.f1(), h, w)?;
            f_hr_up = Some(hr);
            for pass in 0..passes {
                let sel = match opts.selections {
                    Some(fixed) => fixed[pass].clone(),
                    None => {
                        let margins = capr::margin_map(tape.value(logits))?;
                        capr::select_topk(&margins, k)
                    }
                };
                let refined = self.capr.refine(tape, ps, logits, &sel, hr)?;
                logits = refined.logits;
                mlp_evals += refined.mlp_evals;
                selections.push(sel);
            }
        }
        Ok(ForwardOutput {
            image,
            pyramid,
            decode,
            base_logits,
            logits,
            f_hr_up,
            selections,
            mlp_evals,
        })
    }

    /// Objective for one sample. `progress` is the training fraction that
    /// drives the band-loss warm-up.
    pub fn losses(
        &self,
        tape: &mut Tape,
        out: &ForwardOutput,
        targets: &Targets,
        cfg: &LossConfig,
        progress: f64,
    ) -> Result<LossBreakdown> {
        let seg = losses::seg_loss(tape, out.logits, &targets.gt)?;
        let diag = match out.decode.class_attn {
            Some(attn) => Some(losses::diag_loss(tape, attn, &targets.gt_lattice)?.value),
            None => None,
        };
        let bbl = if self.components.bbl {
            let scale = tape.param(&self.params, self.bbl_scale);
            let bias = tape.param(&self.params, self.bbl_bias);
            Some(losses::bbl_loss(
                tape,
                out.decode.tokens,
                &targets.band,
                &targets.gt_lattice,
                scale,
                bias,
            )?)
        } else {
            None
        };
        let parts = LossParts {
            seg: seg.value,
            diag,
            bbl,
        };
        let total = losses::total_loss(tape, &parts, cfg, progress)?;
        Ok(LossBreakdown {
            total,
            parts,
            seg_all_ignored: seg.all_ignored,
        })
    }

    /// Inference: forward, then per-pixel argmax of the final logits.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, x, ForwardOptions::default())?;
        let logits = tape.value(out.logits).clone();
        Ok(Prediction {
            labels: argmax(&logits, self.num_classes())?,
            logits,
            gate: out.decode.gate,
            mlp_evals: out.mlp_evals,
        })
    }
}

/// Per-pixel argmax over the leading axis; ties go to the lower class.
pub fn argmax(logits: &Tensor, classes: usize) -> Result<LabelMask> {
    let (c, h, w) = logits.chw()?;
    if c != classes {
        return Err(invalid("argmax", format!("{c} logit planes for {classes} classes")));
    }
    let n = h * w;
    let d = logits.data();
    let labels = (0..n)
        .map(|j| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * n + j] > d[best * n + j] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, labels, classes)
}
