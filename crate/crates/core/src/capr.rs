//! Class-aware point refinement.
//!
//! Logits are upsampled to the output resolution, the per-pixel top-2
//! softmax margin measures uncertainty, and only the `K` smallest-margin
//! pixels receive a residual MLP correction computed from the local
//! high-resolution feature and the current logits. Every other pixel is
//! passed through bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::layers::Linear;
use crate::params::{Init, ParamSet};
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaprConfig {
    /// Points refined per pass; `None` uses `min(1024, 5% of pixels)`.
    pub k: Option<usize>,
    /// Refinement passes, re-measuring margins between passes.
    pub iterations: usize,
    pub hidden: usize,
}

impl Default for CaprConfig {
    fn default() -> Self {
        Self {
            k: None,
            iterations: 1,
            hidden: 64,
        }
    }
}

impl CaprConfig {
    pub fn points_for(&self, pixels: usize) -> usize {
        self.k.unwrap_or_else(|| default_k(pixels))
    }
}

pub fn default_k(pixels: usize) -> usize {
    1024.min(pixels / 20)
}

/// Selected pixel indices (raster order into the `H×W` grid) and their
/// margins, sorted by margin then index.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintySelection {
    pub indices: Vec<usize>,
    pub margins: Vec<f64>,
}

impl UncertaintySelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Bilinear upsampling of lattice logits to `(h, w)`.
pub fn upsample_logits(tape: &mut Tape, logits: Var, h: usize, w: usize) -> Result<Var> {
    tape.bilinear_resize(logits, h, w)
}

/// Top-2 softmax probability margin `p[1] - p[2]` at every pixel of a
/// `(classes, H, W)` logit field.
pub fn margin_map(logits_up: &Tensor) -> Result<Tensor> {
    let (c, h, w) = logits_up.chw()?;
    if c < 2 {
        return Err(invalid("margin_map", format!("need at least 2 classes, got {c}")));
    }
    let n = h * w;
    let probs = kernels::softmax(logits_up.data(), 1, c, n);
    let margins = (0..n)
        .map(|j| {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for ch in 0..c {
                let p = probs[ch * n + j];
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            (first - second).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(vec![h, w], margins)
}

/// The `k` smallest margins, ties broken by raster index; `k` is clamped to
/// the pixel count.
pub fn select_topk(margins: &Tensor, k: usize) -> UncertaintySelection {
    let m = margins.data();
    let k = k.min(m.len());
    let by_margin = |a: &usize, b: &usize| m[*a].total_cmp(&m[*b]).then(a.cmp(b));
    let mut order: Vec<usize> = (0..m.len()).collect();
    if k > 0 && k < order.len() {
        order.select_nth_unstable_by(k - 1, by_margin);
    }
    order.truncate(k);
    order.sort_unstable_by(by_margin);
    UncertaintySelection {
        margins: order.iter().map(|&i| m[i]).collect(),
        indices: order,
    }
}

/// Result of one refinement pass.
#[derive(Clone, Debug)]
pub struct Refined {
    pub logits: Var,
    /// Pixels the MLP was evaluated at.
    pub mlp_evals: usize,
}

/// Residual point MLP: `(D_hr + classes) -> hidden -> classes`, output layer
/// zero-initialized so a fresh module is the identity.
#[derive(Clone, Debug)]
pub struct Capr {
    fc1: Linear,
    fc2: Linear,
    classes: usize,
    hr_channels: usize,
}

impl Capr {
    pub fn new(
        cfg: &CaprConfig,
        hr_channels: usize,
        classes: usize,
        ps: &mut ParamSet,
        init: &mut Init,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("capr hidden width must be positive".into()));
        }
        Ok(Self {
            fc1: Linear::new(ps, init, "capr.fc1", hr_channels + classes, cfg.hidden, true),
            fc2: Linear::zeros(ps, "capr.fc2", cfg.hidden, classes, true),
            classes,
            hr_channels,
        })
    }

    /// For every selected pixel `i`:
    /// `out[:, i] = logits[:, i] + MLP([f_hr_up[:, i]; logits[:, i]])`.
    /// Unselected pixels are copied unchanged.
    pub fn refine(
        &self,
        tape: &mut Tape,
        ps: &ParamSet,
        logits_up: Var,
        selection: &UncertaintySelection,
        f_hr_up: Var,
    ) -> Result<Refined> {
        let (c, h, w) = tape.value(logits_up).chw()?;
        let (d, fh, fw) = tape.value(f_hr_up).chw()?;
        if c != self.classes || d != self.hr_channels || (fh, fw) != (h, w) {
            return Err(Error::Shape {
                op: "capr.refine",
                lhs: vec![self.hr_channels, self.classes, h, w],
                rhs: vec![d, c, fh, fw],
            });
        }
        if let Some(&bad) = selection.indices.iter().find(|&&i| i >= h * w) {
            return Err(invalid("capr.refine", format!("pixel {bad} outside {h}x{w}")));
        }
        if selection.is_empty() {
            return Ok(Refined {
                logits: logits_up,
                mlp_evals: 0,
            });
        }
        let idx = &selection.indices;
        let feats = tape.gather_cols(f_hr_up, idx)?;
        let local = tape.gather_cols(logits_up, idx)?;
        let input = tape.concat(&[feats, local])?;
        let hidden = self.fc1.forward(tape, ps, input)?;
        let hidden = tape.gelu(hidden)?;
        let delta = self.fc2.forward(tape, ps, hidden)?;
        let logits = tape.scatter_add_cols(logits_up, delta, idx)?;
        Ok(Refined {
            logits,
            mlp_evals: idx.len(),
        })
    }
}
