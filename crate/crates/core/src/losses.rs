//! Training objective: pixel cross-entropy on the refined logits, diagonal
//! supervision of the class-attention head on the lattice, and the
//! boundary-band pair consistency term, combined as
//! `L = L_seg + λ_diag L_diag + λ_bbl(t) L_bbl`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::labels::{LabelMask, IGNORE};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_diag: f64,
    pub bbl_start: f64,
    pub bbl_end: f64,
    /// Fraction of training over which `λ_bbl` ramps from start to end.
    pub bbl_ramp: f64,
    pub r_band: usize,
    pub r_ring: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_diag: 0.1,
            bbl_start: 0.01,
            bbl_end: 0.1,
            bbl_ramp: 0.5,
            r_band: 2,
            r_ring: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_diag < 0.0 || self.bbl_start < 0.0 || self.bbl_end < self.bbl_start {
            return Err(Error::Config(
                "loss weights must be non-negative with bbl_end >= bbl_start".into(),
            ));
        }
        if self.bbl_ramp <= 0.0 || self.r_band == 0 || self.r_ring == 0 {
            return Err(Error::Config("bbl_ramp, r_band and r_ring must be positive".into()));
        }
        Ok(())
    }

    /// `λ_bbl(t) = start + (end - start) · min(t / ramp, 1)` for training
    /// progress `t ∈ [0, 1]`.
    pub fn bbl_weight(&self, progress: f64) -> f64 {
        let ramp = (progress.max(0.0) / self.bbl_ramp).min(1.0);
        self.bbl_start + (self.bbl_end - self.bbl_start) * ramp
    }
}

/// A scalar loss on the tape. `all_ignored` flags a mask with no valid
/// pixel, in which case the loss is defined as 0.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub value: Var,
    pub all_ignored: bool,
}

fn masked_cross_entropy(
    tape: &mut Tape,
    op: &'static str,
    logits: Var,
    gt: &LabelMask,
) -> Result<LossTerm> {
    let (c, h, w) = tape.value(logits).chw()?;
    if (h, w) != (gt.height(), gt.width()) {
        return Err(Error::Shape {
            op,
            lhs: vec![h, w],
            rhs: vec![gt.height(), gt.width()],
        });
    }
    if gt.class_count() > c {
        return Err(invalid(op, format!("mask has {} classes, logits {c}", gt.class_count())));
    }
    let targets = gt.targets();
    let all_ignored = targets.iter().all(Option::is_none);
    let value = tape.softmax_cross_entropy(logits, &targets)?;
    Ok(LossTerm { value, all_ignored })
}

/// Mean per-pixel cross-entropy over non-ignored pixels.
pub fn seg_loss(tape: &mut Tape, logits_up: Var, gt: &LabelMask) -> Result<LossTerm> {
    masked_cross_entropy(tape, "seg_loss", logits_up, gt)
}

/// Cross-entropy of the lattice class-attention map against the
/// lattice-downsampled ground truth.
pub fn diag_loss(tape: &mut Tape, class_attn: Var, gt_ds: &LabelMask) -> Result<LossTerm> {
    masked_cross_entropy(tape, "diag_loss", class_attn, gt_ds)
}

/// Majority vote over `factor × factor` cells. Ignore wins only when it is
/// the cell's sole label; count ties go to the smaller class id.
pub fn downsample_majority(gt: &LabelMask, factor: usize) -> Result<LabelMask> {
    if factor == 0 || !gt.height().is_multiple_of(factor) || !gt.width().is_multiple_of(factor) {
        return Err(Error::Indivisible {
            height: gt.height(),
            width: gt.width(),
            multiple: factor.max(1),
        });
    }
    let (oh, ow) = (gt.height() / factor, gt.width() / factor);
    let classes = gt.class_count().min(IGNORE as usize);
    let mut counts = vec![0usize; classes];
    let mut out = Vec::with_capacity(oh * ow);
    for cy in 0..oh {
        for cx in 0..ow {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in cy * factor..(cy + 1) * factor {
                for x in cx * factor..(cx + 1) * factor {
                    let l = gt.get(y, x);
                    if l != IGNORE {
                        counts[l as usize] += 1;
                    }
                }
            }
            let mut best = IGNORE;
            let mut best_count = 0;
            for (cls, &n) in counts.iter().enumerate() {
                if n > best_count {
                    best = cls as u8;
                    best_count = n;
                }
            }
            out.push(best);
        }
    }
    LabelMask::new(oh, ow, out, gt.class_count())
}

/// Lattice cells near a class change and the ordered `(i, j)` pairs that
/// the band loss supervises.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryBand {
    pub height: usize,
    pub width: usize,
    pub band: Vec<bool>,
    pub pairs: Vec<(usize, usize)>,
}

impl BoundaryBand {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Band: cells whose `(2 r_band + 1)²` window holds at least two distinct
/// non-ignore labels. Ring `R(i)`: cells at Chebyshev distance exactly
/// `r_ring`. Pairs with an ignored endpoint are dropped.
pub fn build_band(gt_ds: &LabelMask, r_band: usize, r_ring: usize) -> Result<BoundaryBand> {
    if r_band == 0 || r_ring == 0 {
        return Err(invalid("build_band", "radii must be >= 1"));
    }
    let (h, w) = (gt_ds.height(), gt_ds.width());
    let mut band = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut first = None;
            'scan: for ny in y.saturating_sub(r_band)..(y + r_band + 1).min(h) {
                for nx in x.saturating_sub(r_band)..(x + r_band + 1).min(w) {
                    let l = gt_ds.get(ny, nx);
                    if l == IGNORE {
                        continue;
                    }
                    match first {
                        None => first = Some(l),
                        Some(f) if f != l => {
                            band[y * w + x] = true;
                            break 'scan;
                        }
                        _ => {}
                    }
                }
            }
        }
    }
    let r = r_ring as isize;
    let ring: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy.abs().max(dx.abs()) == r)
        .collect();
    let mut pairs = Vec::new();
    for i in (0..h * w).filter(|&i| band[i]) {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        if gt_ds.labels()[i] == IGNORE {
            continue;
        }
        for (dy, dx) in &ring {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if gt_ds.labels()[j] != IGNORE {
                pairs.push((i, j));
            }
        }
    }
    Ok(BoundaryBand {
        height: h,
        width: w,
        band,
        pairs,
    })
}

/// `s_ij = w_s · cos(T̂_i, T̂_j) + b_s` on a `(D, H_f, W_f)` token value.
pub fn pair_score(tokens: &Tensor, i: usize, j: usize, scale: f64, bias: f64) -> Result<f64> {
    let (d, h, w) = tokens.chw()?;
    let n = h * w;
    if i >= n || j >= n {
        return Err(invalid("pair_score", format!("cell out of range for {h}x{w} lattice")));
    }
    let t = tokens.data();
    let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
    for c in 0..d {
        let (a, b) = (t[c * n + i], t[c * n + j]);
        dot += a * b;
        ni += a * a;
        nj += b * b;
    }
    let cos = if ni == 0.0 || nj == 0.0 {
        0.0
    } else {
        dot / (ni.sqrt() * nj.sqrt())
    };
    Ok(scale * cos + bias)
}

/// `(1/|E|) Σ BCE-with-logits(s_ij, [y_i = y_j])`; exactly 0 for an empty band.
pub fn bbl_loss(
    tape: &mut Tape,
    tokens: Var,
    band: &BoundaryBand,
    gt_ds: &LabelMask,
    scale: Var,
    bias: Var,
) -> Result<Var> {
    let (_, h, w) = tape.value(tokens).chw()?;
    if (h, w) != (band.height, band.width) || (h, w) != (gt_ds.height(), gt_ds.width()) {
        return Err(Error::Shape {
            op: "bbl_loss",
            lhs: vec![h, w],
            rhs: vec![band.height, band.width],
        });
    }
    if band.pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (is, js): (Vec<usize>, Vec<usize>) = band.pairs.iter().copied().unzip();
    let labels = gt_ds.labels();
    let targets: Vec<f64> = band
        .pairs
        .iter()
        .map(|&(i, j)| if labels[i] == labels[j] { 1.0 } else { 0.0 })
        .collect();
    let a = tape.gather_cols(tokens, &is)?;
    let b = tape.gather_cols(tokens, &js)?;
    let cos = tape.column_cosine(a, b)?;
    let s = tape.scale_by(cos, scale)?;
    let s = tape.add_scalar(s, bias)?;
    tape.bce_with_logits(s, &targets)
}

/// Loss terms of one forward pass; absent terms belong to disabled
/// components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub seg: Var,
    pub diag: Option<Var>,
    pub bbl: Option<Var>,
}

pub fn total_loss(tape: &mut Tape, parts: &LossParts, cfg: &LossConfig, progress: f64) -> Result<Var> {
    let mut total = parts.seg;
    if let Some(diag) = parts.diag {
        let term = tape.scale(diag, cfg.lambda_diag)?;
        total = tape.add(total, term)?;
    }
    if let Some(bbl) = parts.bbl {
        let term = tape.scale(bbl, cfg.bbl_weight(progress))?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.bbl_weight(0.0), 0.01);
        assert_eq!(cfg.bbl_weight(0.5), 0.1);
        assert_eq!(cfg.bbl_weight(0.9), 0.1);
        assert!((cfg.bbl_weight(0.25) - 0.055).abs() < 1e-15);
    }

    #[test]
    fn majority_prefers_labels_over_ignore() {
        // One labelled pixel among ignores still wins the cell.
        let mut labels = vec![IGNORE; 4];
        labels[3] = 2;
        let m = LabelMask::new(2, 2, labels, 6).unwrap();
        assert_eq!(downsample_majority(&m, 2).unwrap().labels(), &[2]);
        let m = LabelMask::new(2, 2, vec![IGNORE; 4], 6).unwrap();
        assert_eq!(downsample_majority(&m, 2).unwrap().labels(), &[IGNORE]);
        // Tie between 1 and 4 goes to 1.
        let m = LabelMask::new(2, 2, vec![4, 1, 1, 4], 6).unwrap();
        assert_eq!(downsample_majority(&m, 2).unwrap().labels(), &[1]);
    }

    #[test]
    fn pair_score_examples() {
        let t = Tensor::new(vec![2, 1, 3], vec![1.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(pair_score(&t, 0, 1, 10.0, 0.5).unwrap(), 10.5);
        assert_eq!(pair_score(&t, 0, 2, 10.0, 0.5).unwrap(), 0.5);
        let z = Tensor::zeros(&[2, 1, 2]);
        assert_eq!(pair_score(&z, 0, 1, 10.0, -1.0).unwrap(), -1.0);
    }
}
