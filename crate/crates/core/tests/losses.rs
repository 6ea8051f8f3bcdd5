use latseg_core::losses::{
    bbl_loss, build_band, diag_loss, downsample_majority, pair_score, seg_loss, total_loss,
    BoundaryBand, LossParts,
};
use latseg_core::{LabelMask, LossConfig, Tape, Tensor, IGNORE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask(h: usize, w: usize, labels: &[u8], classes: usize) -> LabelMask {
    LabelMask::new(h, w, labels.to_vec(), classes).unwrap()
}

fn ce_oracle(logits: &[f64], c: usize, n: usize, gt: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for j in 0..n {
        if gt[j] == IGNORE {
            continue;
        }
        let z: f64 = (0..c).map(|k| logits[k * n + j].exp()).sum();
        total += -(logits[gt[j] as usize * n + j].exp() / z).ln();
        count += 1;
    }
    total / count as f64
}

fn softplus(s: f64) -> f64 {
    (1.0 + s.exp()).ln()
}

#[test]
fn seg_loss_reference_values() {
    let gt = mask(2, 3, &[0, 1, 2, 3, 4, 5], 6);
    let mut onehot = vec![-50.0; 36];
    for (j, &g) in gt.labels().iter().enumerate() {
        onehot[g as usize * 6 + j] = 50.0;
    }
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![6, 2, 3], onehot).unwrap());
    let t = seg_loss(&mut tape, l, &gt).unwrap();
    assert!(tape.value(t.value).item() < 1e-10);
    assert!(!t.all_ignored);

    let u = tape.constant(Tensor::zeros(&[6, 2, 3]));
    let t = seg_loss(&mut tape, u, &gt).unwrap();
    assert!((tape.value(t.value).item() - 6f64.ln()).abs() < 1e-12);
    assert!((tape.value(t.value).item() - 1.7918).abs() < 1e-4);
}

#[test]
fn seg_and_diag_match_hand_softmax_on_2x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
    let gt = mask(2, 2, &[2, 0, IGNORE, 1], 3);
    let expect = ce_oracle(&logits, 3, 4, gt.labels());
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![3, 2, 2], logits).unwrap());
    let s = seg_loss(&mut tape, l, &gt).unwrap();
    let d = diag_loss(&mut tape, l, &gt).unwrap();
    assert!((tape.value(s.value).item() - expect).abs() < 1e-14);
    assert!((tape.value(d.value).item() - expect).abs() < 1e-14);
}

#[test]
fn fully_ignored_mask_gives_zero_with_flag() {
    let gt = mask(2, 2, &[IGNORE; 4], 3);
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::full(&[3, 2, 2], 0.7));
    let s = seg_loss(&mut tape, l, &gt).unwrap();
    assert!(s.all_ignored);
    assert_eq!(tape.value(s.value).item(), 0.0);
}

#[test]
fn ignored_positions_do_not_affect_any_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (c, h, w) = (4, 4, 4);
    let labels: Vec<u8> = (0..16)
        .map(|i| if i % 4 == 1 { IGNORE } else { (i / 4 % 2) as u8 * 2 })
        .collect();
    let gt = mask(h, w, &labels, c);
    let band = build_band(&gt, 1, 1).unwrap();
    assert!(!band.is_empty());
    let base: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let losses = |vals: &[f64]| {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![c, h, w], vals.to_vec()).unwrap());
        let scale = tape.constant(Tensor::scalar(10.0));
        let bias = tape.constant(Tensor::scalar(0.0));
        let s = seg_loss(&mut tape, x, &gt).unwrap().value;
        let d = diag_loss(&mut tape, x, &gt).unwrap().value;
        let b = bbl_loss(&mut tape, x, &band, &gt, scale, bias).unwrap();
        let vals = [s, d, b].map(|v| tape.value(v).item());
        let sum = tape.add(s, d).unwrap();
        let sum = tape.add(sum, b).unwrap();
        let g = tape.backward(sum).unwrap().get(x).unwrap().clone();
        (vals, g)
    };
    let (before, grad) = losses(&base);
    let mut perturbed = base.clone();
    for ch in 0..c {
        for (j, &l) in labels.iter().enumerate() {
            if l == IGNORE {
                perturbed[ch * h * w + j] += rng.random_range(-5.0..5.0);
                assert_eq!(grad.data()[ch * h * w + j], 0.0);
            }
        }
    }
    let (after, _) = losses(&perturbed);
    assert_eq!(before, after);
}

#[test]
fn majority_downsample_rules() {
    let gt = mask(
        2,
        4,
        &[1, 2, IGNORE, IGNORE, 2, 1, IGNORE, 0],
        3,
    );
    let ds = downsample_majority(&gt, 2).unwrap();
    // 1 and 2 tie, the smaller id wins; a single labeled pixel beats ignore.
    assert_eq!(ds.labels(), &[1, 0]);
    let all_ignore = mask(2, 2, &[IGNORE; 4], 3);
    assert_eq!(downsample_majority(&all_ignore, 2).unwrap().labels(), &[IGNORE]);
    assert!(downsample_majority(&gt, 3).is_err());
}

fn band_oracle(gt: &LabelMask, r: usize) -> Vec<bool> {
    let (h, w) = (gt.height() as isize, gt.width() as isize);
    let r = r as isize;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut seen = std::collections::BTreeSet::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < h && nx < w {
                        let l = gt.get(ny as usize, nx as usize);
                        if l != IGNORE {
                            seen.insert(l);
                        }
                    }
                }
            }
            out.push(seen.len() >= 2);
        }
    }
    out
}

#[test]
fn band_of_a_four_by_four_split_is_the_center_columns() {
    let labels: Vec<u8> = (0..16).map(|i| u8::from(i % 4 >= 2)).collect();
    let gt = mask(4, 4, &labels, 2);
    let band = build_band(&gt, 1, 1).unwrap();
    let expect: Vec<bool> = (0..16).map(|i| i % 4 == 1 || i % 4 == 2).collect();
    assert_eq!(band.band, expect);
    assert_eq!(band.band, band_oracle(&gt, 1));
    for &(i, j) in &band.pairs {
        assert!(band.band[i]);
        let (yi, xi, yj, xj) = (i / 4, i % 4, j / 4, j % 4);
        assert_eq!(yi.abs_diff(yj).max(xi.abs_diff(xj)), 1);
    }
    // Interior band cells have all 8 neighbors; edge rows have 5.
    assert_eq!(band.pairs.len(), 2 * (5 + 8 + 8 + 5));
}

#[test]
fn uniform_mask_has_no_band_and_zero_loss() {
    let gt = mask(3, 3, &[4; 9], 6);
    let band = build_band(&gt, 2, 1).unwrap();
    assert!(band.band.iter().all(|b| !b) && band.is_empty());
    let mut tape = Tape::new();
    let tok = tape.constant(Tensor::ones(&[5, 3, 3]));
    let s = tape.constant(Tensor::scalar(10.0));
    let b = tape.constant(Tensor::scalar(0.0));
    let l = bbl_loss(&mut tape, tok, &band, &gt, s, b).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn ignore_stripe_produces_no_pairs_into_it() {
    let labels: Vec<u8> = (0..25)
        .map(|i| match i % 5 {
            2 => IGNORE,
            x if x < 2 => 0,
            _ => 1,
        })
        .collect();
    let gt = mask(5, 5, &labels, 2);
    let band = build_band(&gt, 2, 1).unwrap();
    assert!(!band.is_empty());
    for &(i, j) in &band.pairs {
        assert_ne!(labels[i], IGNORE);
        assert_ne!(labels[j], IGNORE);
    }
    assert_eq!(band.band, band_oracle(&gt, 2));
}

#[test]
fn pair_score_cases() {
    let t = Tensor::new(vec![2, 1, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(pair_score(&t, 0, 0, 10.0, 0.5).unwrap(), 10.5);
    assert_eq!(pair_score(&t, 0, 1, 10.0, 0.5).unwrap(), 0.5);
    assert_eq!(pair_score(&t, 0, 2, 10.0, -0.5).unwrap(), -0.5);
    assert!(pair_score(&t, 0, 3, 1.0, 0.0).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 7;
    let vals: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = Tensor::new(vec![d, 1, 2], vals.clone()).unwrap();
    let a: Vec<f64> = (0..d).map(|c| vals[c * 2]).collect();
    let b: Vec<f64> = (0..d).map(|c| vals[c * 2 + 1]).collect();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let expect = 3.0 * dot / (na * nb) + 0.25;
    assert!((pair_score(&t, 0, 1, 3.0, 0.25).unwrap() - expect).abs() < 1e-14);
}

fn manual_band(h: usize, w: usize, pairs: Vec<(usize, usize)>) -> BoundaryBand {
    let mut band = vec![false; h * w];
    for &(i, _) in &pairs {
        band[i] = true;
    }
    BoundaryBand {
        height: h,
        width: w,
        band,
        pairs,
    }
}

#[test]
fn single_pair_at_zero_score_is_ln2() {
    let gt = mask(1, 2, &[3, 3], 6);
    let band = manual_band(1, 2, vec![(0, 1)]);
    let mut tape = Tape::new();
    let tok = tape.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let s = tape.constant(Tensor::scalar(10.0));
    let b = tape.constant(Tensor::scalar(0.0));
    let l = bbl_loss(&mut tape, tok, &band, &gt, s, b).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    assert!((tape.value(l).item() - 0.6931).abs() < 1e-4);
}

#[test]
fn three_pairs_match_per_pair_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = mask(2, 2, &[0, 0, 1, 0], 2);
    let pairs = vec![(0, 1), (0, 2), (3, 2)];
    let band = manual_band(2, 2, pairs.clone());
    let tokens = Tensor::from_fn(&[4, 2, 2], |_| rng.random_range(-1.0..1.0));
    let (ws, bs) = (4.0, -0.3);
    let expect = pairs
        .iter()
        .map(|&(i, j)| {
            let s = pair_score(&tokens, i, j, ws, bs).unwrap();
            let t = f64::from(u8::from(gt.labels()[i] == gt.labels()[j]));
            softplus(s) - t * s
        })
        .sum::<f64>()
        / 3.0;
    let mut tape = Tape::new();
    let tok = tape.constant(tokens);
    let s = tape.constant(Tensor::scalar(ws));
    let b = tape.constant(Tensor::scalar(bs));
    let l = bbl_loss(&mut tape, tok, &band, &gt, s, b).unwrap();
    assert!((tape.value(l).item() - expect).abs() < 1e-14);
    assert!(tape.value(l).item() > 0.0);
}

#[test]
fn total_loss_weights() {
    let cfg = LossConfig::default();
    assert_eq!(cfg.bbl_weight(0.0), 0.01);
    assert_eq!(cfg.bbl_weight(0.5), 0.1);
    assert_eq!(cfg.bbl_weight(1.0), 0.1);
    let mut tape = Tape::new();
    let parts = LossParts {
        seg: tape.constant(Tensor::scalar(1.0)),
        diag: Some(tape.constant(Tensor::scalar(2.0))),
        bbl: Some(tape.constant(Tensor::scalar(3.0))),
    };
    let total = total_loss(&mut tape, &parts, &cfg, 1.0).unwrap();
    assert!((tape.value(total).item() - 1.5).abs() < 1e-15);
    let seg_only = LossParts {
        seg: parts.seg,
        diag: None,
        bbl: None,
    };
    let total = total_loss(&mut tape, &seg_only, &cfg, 1.0).unwrap();
    assert_eq!(tape.value(total).item(), 1.0);
}

proptest! {
    #[test]
    fn bbl_weight_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cfg = LossConfig::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(cfg.bbl_weight(lo) <= cfg.bbl_weight(hi));
        prop_assert!(cfg.bbl_weight(lo) >= cfg.bbl_start && cfg.bbl_weight(hi) <= cfg.bbl_end);
    }

    #[test]
    fn band_matches_neighborhood_scan(
        labels in proptest::collection::vec(prop_oneof![Just(0u8), Just(1), Just(2), Just(IGNORE)], 36),
        r in 1usize..3,
    ) {
        let gt = mask(6, 6, &labels, 3);
        let band = build_band(&gt, r, 1).unwrap();
        prop_assert_eq!(&band.band, &band_oracle(&gt, r));
        prop_assert_eq!(band.is_empty(), band.pairs.is_empty());
    }
}
