//! Evaluation metrics: confusion-matrix mIoU and aAcc, and boundary IoU
//! measured only on a thin band around ground-truth class changes.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Group, LabelMask, IGNORE, NUM_GROUPS};

/// `counts[gt][pred]` pixel counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn merge(&mut self, other: &Confusion) {
        debug_assert_eq!(self.classes, other.classes);
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
    }

    /// Accumulates every pixel whose ground truth is not ignored and whose
    /// `keep` flag (if given) is set.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask, keep: Option<&[bool]>) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape {
                op: "confusion",
                lhs: vec![pred.height(), pred.width()],
                rhs: vec![gt.height(), gt.width()],
            });
        }
        for (i, (&p, &g)) in pred.labels().iter().zip(gt.labels()).enumerate() {
            if g == IGNORE || keep.is_some_and(|k| !k[i]) {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.classes || p >= self.classes {
                return Err(Error::Invalid {
                    op: "confusion",
                    msg: format!("label out of range for {} classes", self.classes),
                });
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// `M[c][c] / (row_c + col_c - M[c][c])`, or `None` when class `c` is
    /// absent from both ground truth and prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        let tp = self.get(c, c);
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn summary(&self) -> Summary {
        let total = self.total();
        if total == 0 {
            return Summary {
                miou: 0.0,
                aacc: 0.0,
                empty: true,
            };
        }
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        Summary {
            miou: ious.iter().sum::<f64>() / ious.len() as f64,
            aacc: self.trace() as f64 / total as f64,
            empty: false,
        }
    }
}

/// mIoU and aAcc of a confusion matrix; `empty` marks a matrix with no
/// counted pixel, reported as `(0, 0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub miou: f64,
    pub aacc: f64,
    pub empty: bool,
}

pub fn confusion(pred: &LabelMask, gt: &LabelMask) -> Result<Confusion> {
    let mut m = Confusion::new(gt.class_count());
    m.accumulate(pred, gt, None)?;
    Ok(m)
}

pub fn miou_aacc(m: &Confusion) -> Summary {
    m.summary()
}

/// 4-connected GT boundary pixels dilated by `radius` (Chebyshev).
pub fn boundary_band(gt: &LabelMask, radius: usize) -> Vec<bool> {
    dilate(&gt.boundary_pixels(), gt.height(), gt.width(), radius)
}

/// Chebyshev (square) dilation as separable row and column max filters.
pub fn dilate(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius + 1).min(w);
            rows[y * w + x] = mask[y * w + lo..y * w + hi].iter().any(|&b| b);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius + 1).min(h);
        for x in 0..w {
            out[y * w + x] = (lo..hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Boundary IoU and whether the band was empty (then defined as 1.0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biou {
    pub value: f64,
    pub empty_band: bool,
}

/// mIoU restricted to the pixels flagged in `band`.
pub fn biou_in(pred: &LabelMask, gt: &LabelMask, band: &[bool]) -> Result<Biou> {
    let mut m = Confusion::new(gt.class_count());
    m.accumulate(pred, gt, Some(band))?;
    Ok(biou_from(&m))
}

pub fn biou(pred: &LabelMask, gt: &LabelMask, radius: usize) -> Result<Biou> {
    biou_in(pred, gt, &boundary_band(gt, radius))
}

fn biou_from(m: &Confusion) -> Biou {
    let s = m.summary();
    if s.empty {
        Biou {
            value: 1.0,
            empty_band: true,
        }
    } else {
        Biou {
            value: s.miou,
            empty_band: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub aacc: f64,
    pub biou: f64,
    pub pixels: u64,
    pub band_pixels: u64,
    pub band_radius: usize,
    pub empty_band: bool,
}

/// Sums full-image and band-restricted confusion matrices over images.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    full: Confusion,
    band: Confusion,
    radius: usize,
}

impl MetricAccumulator {
    pub fn new(classes: usize, radius: usize) -> Self {
        Self {
            full: Confusion::new(classes),
            band: Confusion::new(classes),
            radius,
        }
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        self.full.accumulate(pred, gt, None)?;
        let band = boundary_band(gt, self.radius);
        self.band.accumulate(pred, gt, Some(&band))
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.full.merge(&other.full);
        self.band.merge(&other.band);
    }

    pub fn report(&self) -> MetricReport {
        let s = self.full.summary();
        let b = biou_from(&self.band);
        MetricReport {
            per_class_iou: (0..self.full.classes()).map(|c| self.full.iou(c)).collect(),
            miou: s.miou,
            aacc: s.aacc,
            biou: b.value,
            pixels: self.full.total(),
            band_pixels: self.band.total(),
            band_radius: self.radius,
            empty_band: b.empty_band,
        }
    }
}

/// Metrics for a single prediction.
pub fn evaluate_masks(pred: &LabelMask, gt: &LabelMask, radius: usize) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(gt.class_count(), radius);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

/// CSV header: `image, iou_<class>..., miou, aacc, biou`.
pub fn csv_header(classes: usize) -> String {
    let mut cols = vec!["image".to_string()];
    for c in 0..classes {
        cols.push(match (classes, Group::from_id(c as u8)) {
            (NUM_GROUPS, Some(g)) => format!("iou_{}", g.name()),
            _ => format!("iou_class{c}"),
        });
    }
    cols.extend(["miou", "aacc", "biou"].map(String::from));
    cols.join(",")
}

pub fn csv_row(image: &str, r: &MetricReport) -> String {
    let mut cols = vec![image.to_string()];
    for iou in &r.per_class_iou {
        cols.push(iou.map(|v| format!("{v:.6}")).unwrap_or_default());
    }
    cols.push(format!("{:.6}", r.miou));
    cols.push(format!("{:.6}", r.aacc));
    cols.push(format!("{:.6}", r.biou));
    cols.join(",")
}

/// Writes per-image rows followed by an `aggregate` row.
pub fn write_csv<W: Write>(
    mut out: W,
    rows: &[(String, MetricReport)],
    aggregate: &MetricReport,
) -> Result<()> {
    writeln!(out, "{}", csv_header(aggregate.per_class_iou.len()))?;
    for (name, r) in rows {
        writeln!(out, "{}", csv_row(name, r))?;
    }
    writeln!(out, "{}", csv_row("aggregate", aggregate))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(h: usize, w: usize, at: usize) -> LabelMask {
        let labels = (0..h * w).map(|i| u8::from(i % w >= at)).collect();
        LabelMask::new(h, w, labels, 2).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let gt = split(8, 8, 4);
        let r = evaluate_masks(&gt, &gt, 3).unwrap();
        assert_eq!((r.miou, r.aacc, r.biou), (1.0, 1.0, 1.0));
        let m = confusion(&gt, &gt).unwrap();
        assert_eq!(m.get(0, 1) + m.get(1, 0), 0);
    }

    #[test]
    fn half_swapped_two_class() {
        // gt: left half 0, right half 1; pred: all 0.
        let gt = split(2, 4, 2);
        let pred = LabelMask::new(2, 4, vec![0; 8], 2).unwrap();
        let s = miou_aacc(&confusion(&pred, &gt).unwrap());
        // IoU_0 = 4 / 8, IoU_1 = 0 / 4.
        assert_eq!(s.miou, 0.25);
        assert_eq!(s.aacc, 0.5);
    }

    #[test]
    fn absent_class_excluded() {
        let gt = LabelMask::new(1, 2, vec![0, 1], 6).unwrap();
        let s = miou_aacc(&confusion(&gt, &gt).unwrap());
        assert_eq!(s.miou, 1.0);
    }

    #[test]
    fn empty_matrix_is_flagged() {
        let gt = LabelMask::new(1, 2, vec![IGNORE; 2], 2).unwrap();
        let s = miou_aacc(&confusion(&gt, &gt).unwrap());
        assert!(s.empty);
        assert_eq!((s.miou, s.aacc), (0.0, 0.0));
        let b = biou(&gt, &gt, 3).unwrap();
        assert!(b.empty_band);
        assert_eq!(b.value, 1.0);
    }

    #[test]
    fn vertical_split_band() {
        let gt = split(8, 8, 4);
        let band = boundary_band(&gt, 1);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(band[y * 8 + x], (2..6).contains(&x));
            }
        }
        let mut prev = 0;
        for r in 1..6 {
            let n = boundary_band(&gt, r).iter().filter(|&&b| b).count();
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn band_ignores_interiors() {
        let gt = split(8, 8, 4);
        let band = boundary_band(&gt, 1);
        let labels = (0..64)
            .map(|i| if band[i] { gt.labels()[i] } else { 1 - gt.labels()[i] })
            .collect();
        let pred = LabelMask::new(8, 8, labels, 2).unwrap();
        assert_eq!(biou(&pred, &gt, 1).unwrap().value, 1.0);
        assert!(miou_aacc(&confusion(&pred, &gt).unwrap()).miou < 1.0);
    }

    #[test]
    fn csv_layout() {
        assert_eq!(
            csv_header(6),
            "image,iou_smooth,iou_rough,iou_bumpy,iou_forbidden,iou_obstacles,iou_background,miou,aacc,biou"
        );
        let gt = split(2, 4, 2);
        let r = evaluate_masks(&gt, &gt, 1).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("a".into(), r.clone())], &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().last().unwrap().starts_with("aggregate,"));
    }
}
