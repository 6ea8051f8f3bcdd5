//! Synthetic off-road scenes and a loader for image/mask directories.
//!
//! Each sample is drawn from its own ChaCha8 stream: the generator is seeded
//! with `seed_from_u64(spec.seed)` and the stream is set to the sample index,
//! so any sample can be produced independently and the sequence of draws is
//! reproducible by any ChaCha8 implementation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::INPUT_MULTIPLE;
use crate::error::{Error, Result};
use crate::labels::{Group, LabelMask, RemapTable, NUM_GROUPS};
use crate::tensor::Tensor;

/// Per-class procedural texture: a base colour modulated by bilinear value
/// noise on a lattice with `scale`-pixel spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub base: [f64; 3],
    pub amplitude: f64,
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    /// `[height, width]`, both multiples of 32.
    pub size: [usize; 2],
    pub class_frequencies: [f64; NUM_GROUPS],
    /// Voronoi sites per scene.
    pub cell_count: usize,
    pub thin_structure_count: usize,
    pub boundary_noise_px: usize,
    /// Probability that a clean boundary pixel seeds a noise blob.
    pub boundary_noise_rate: f64,
    pub texture_scales: [Texture; NUM_GROUPS],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            size: [64, 96],
            class_frequencies: [0.2, 0.25, 0.15, 0.1, 0.1, 0.2],
            cell_count: 12,
            thin_structure_count: 2,
            boundary_noise_px: 1,
            boundary_noise_rate: 0.05,
            texture_scales: default_textures(),
        }
    }
}

fn default_textures() -> [Texture; NUM_GROUPS] {
    let t = |base: [f64; 3], amplitude: f64, scale: usize| Texture {
        base,
        amplitude,
        scale,
    };
    [
        t([0.55, 0.55, 0.58], 0.06, 16), // paved
        t([0.55, 0.42, 0.25], 0.15, 4),  // dirt, gravel
        t([0.35, 0.30, 0.30], 0.25, 2),  // rocks
        t([0.15, 0.45, 0.15], 0.12, 6),  // bush, water
        t([0.30, 0.18, 0.08], 0.10, 3),  // trunks, poles
        t([0.55, 0.75, 0.95], 0.05, 24), // sky
    ]
}

impl SceneSpec {
    pub fn height(&self) -> usize {
        self.size[0]
    }

    pub fn width(&self) -> usize {
        self.size[1]
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.size;
        if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
            return Err(Error::Indivisible {
                height: h,
                width: w,
                multiple: INPUT_MULTIPLE,
            });
        }
        let f = &self.class_frequencies;
        if f.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config("class frequencies must be non-negative".into()));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class frequencies sum to {sum}, not 1")));
        }
        if self.cell_count == 0 {
            return Err(Error::Config("cell_count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.boundary_noise_rate) {
            return Err(Error::Config("boundary_noise_rate must lie in [0, 1]".into()));
        }
        for (g, t) in self.texture_scales.iter().enumerate() {
            if t.scale == 0 || !t.amplitude.is_finite() || t.base.iter().any(|c| !c.is_finite()) {
                return Err(Error::Config(format!("invalid texture for class {g}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene spec serializes");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: usize,
    /// Scene spec hash for synthetic samples; empty for loaded ones.
    pub spec_hash: String,
    pub source: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W`, values in `[0, 1]`.
    pub image: Tensor,
    pub gt_clean: LabelMask,
    /// Training target.
    pub gt_noisy: LabelMask,
    pub meta: SampleMeta,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn generate(spec: &SceneSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height(), spec.width());
    let mut rng = sample_rng(spec.seed, index);

    // Voronoi partition; ties go to the lower site index.
    let sites: Vec<(f64, f64)> = (0..spec.cell_count)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
        .collect();
    let pick = WeightedIndex::new(spec.class_frequencies).map_err(|e| Error::Config(e.to_string()))?;
    let cell_class: Vec<u8> = (0..spec.cell_count).map(|_| pick.sample(&mut rng) as u8).collect();
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (i, &(sy, sx)) in sites.iter().enumerate() {
                let d = (py - sy).powi(2) + (px - sx).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            labels[y * w + x] = cell_class[best.1];
        }
    }

    // Thin 1-2 px polylines.
    let obstacle = Group::Obstacles.id();
    for _ in 0..spec.thin_structure_count {
        let vertices = rng.random_range(2..=4);
        let thick = rng.random_bool(0.5);
        let pts: Vec<(i64, i64)> = (0..vertices)
            .map(|_| (rng.random_range(0..h as i64), rng.random_range(0..w as i64)))
            .collect();
        for seg in pts.windows(2) {
            for (y, x) in bresenham(seg[0], seg[1]) {
                labels[y as usize * w + x as usize] = obstacle;
                if thick && (x as usize) + 1 < w {
                    labels[y as usize * w + x as usize + 1] = obstacle;
                }
            }
        }
    }
    let gt_clean = LabelMask::new(h, w, labels, NUM_GROUPS)?;

    let image = paint(spec, &gt_clean, &mut rng)?;
    let gt_noisy = perturb_boundaries(&gt_clean, spec.boundary_noise_px, spec.boundary_noise_rate, &mut rng);
    Ok(Sample {
        image,
        gt_clean,
        gt_noisy,
        meta: SampleMeta {
            seed: spec.seed,
            index,
            spec_hash: spec.hash(),
            source: None,
        },
    })
}

/// Samples `0..count` of a spec.
pub fn generate_set(spec: &SceneSpec, count: usize) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate(spec, i)).collect()
}

fn bresenham((y0, x0): (i64, i64), (y1, x1): (i64, i64)) -> Vec<(i64, i64)> {
    let (dy, dx) = (-(y1 - y0).abs(), (x1 - x0).abs());
    let (sy, sx) = (if y0 < y1 { 1 } else { -1 }, if x0 < x1 { 1 } else { -1 });
    let (mut y, mut x, mut err) = (y0, x0, dx + dy);
    let mut out = Vec::new();
    loop {
        out.push((y, x));
        if (y, x) == (y1, x1) {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn paint(spec: &SceneSpec, gt: &LabelMask, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = (gt.height(), gt.width());
    let noise: Vec<Vec<f64>> = spec
        .texture_scales
        .iter()
        .map(|t| value_noise(h, w, t.scale, rng))
        .collect();
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (j, &l) in gt.labels().iter().enumerate() {
        let t = &spec.texture_scales[l as usize];
        let v = t.amplitude * (noise[l as usize][j] - 0.5);
        for c in 0..3 {
            data[c * n + j] = (t.base[c] + v).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Bilinearly interpolated uniform values on a lattice of `scale` spacing.
fn value_noise(h: usize, w: usize, scale: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (gh, gw) = (h / scale + 2, w / scale + 2);
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / scale as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / scale as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) + (g(y0, x0 + 1) - g(y0, x0)) * tx;
            let bot = g(y0 + 1, x0) + (g(y0 + 1, x0 + 1) - g(y0 + 1, x0)) * tx;
            out.push(top + (bot - top) * ty);
        }
    }
    out
}

/// Annotation noise. Each clean boundary pixel, with probability `rate`,
/// stamps a Chebyshev disk of radius `1..=radius` carrying either its own
/// label (the region dilates) or a differing 4-neighbour's label (it erodes).
fn perturb_boundaries(clean: &LabelMask, radius: usize, rate: f64, rng: &mut ChaCha8Rng) -> LabelMask {
    let mut noisy = clean.clone();
    if radius == 0 || rate == 0.0 {
        return noisy;
    }
    let (h, w) = (clean.height(), clean.width());
    let boundary = clean.boundary_pixels();
    for y in 0..h {
        for x in 0..w {
            if !boundary[y * w + x] || !rng.random_bool(rate) {
                continue;
            }
            let own = clean.get(y, x);
            let mut others = Vec::with_capacity(4);
            let mut consider = |ny: usize, nx: usize| {
                let l = clean.get(ny, nx);
                if l != own && !others.contains(&l) {
                    others.push(l);
                }
            };
            if y > 0 {
                consider(y - 1, x);
            }
            if y + 1 < h {
                consider(y + 1, x);
            }
            if x > 0 {
                consider(y, x - 1);
            }
            if x + 1 < w {
                consider(y, x + 1);
            }
            let r = rng.random_range(1..=radius);
            let label = if rng.random_bool(0.5) {
                own
            } else {
                others[rng.random_range(0..others.len())]
            };
            for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    noisy.set(yy, xx, label);
                }
            }
        }
    }
    noisy
}

pub fn image_to_tensor(img: &image::RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (j, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * n + j] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn tensor_to_image(t: &Tensor) -> Result<image::RgbImage> {
    let (c, h, w) = t.chw()?;
    if c != 3 {
        return Err(Error::Invalid {
            op: "tensor_to_image",
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    let n = h * w;
    let d = t.data();
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let j = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|ch| (d[ch * n + j].clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

pub fn mask_to_image(m: &LabelMask) -> image::GrayImage {
    image::GrayImage::from_raw(m.width() as u32, m.height() as u32, m.labels().to_vec())
        .expect("mask buffer matches its extents")
}

pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    tensor_to_image(t)?.save(path)?;
    Ok(())
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    mask_to_image(m).save(path)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    image_to_tensor(&image::open(path)?.to_rgb8())
}

/// Reads an integer-id mask without remapping.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let g = image::open(path)?.to_luma8();
    LabelMask::raw(g.height() as usize, g.width() as usize, g.into_raw())
}

/// Pairs every file in `images` with the file in `masks` that has the same
/// stem. Files are visited in name order; decoding happens lazily. A file
/// without a partner on either side is an error.
pub fn load_dir(
    images: &Path,
    masks: &Path,
    remap: &RemapTable,
) -> Result<impl Iterator<Item = Result<Sample>>> {
    let list = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        v.retain(|p| p.is_file());
        v.sort();
        Ok(v)
    };
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned());
    let image_files = list(images)?;
    let mask_files = list(masks)?;
    let mut pairs = Vec::with_capacity(image_files.len());
    for img in &image_files {
        let s = stem(img);
        match mask_files.iter().find(|m| stem(m) == s) {
            Some(m) => pairs.push((img.clone(), m.clone())),
            None => return Err(Error::MissingPair(img.display().to_string())),
        }
    }
    if let Some(m) = mask_files.iter().find(|m| !image_files.iter().any(|i| stem(i) == stem(m))) {
        return Err(Error::MissingPair(m.display().to_string()));
    }
    let remap = remap.clone();
    Ok(pairs.into_iter().enumerate().map(move |(index, (img, mask))| {
        let image = read_image(&img)?;
        let gt = remap.remap(&read_mask(&mask)?)?;
        let (_, h, w) = image.chw()?;
        if (gt.height(), gt.width()) != (h, w) {
            return Err(Error::Shape {
                op: "load_dir",
                lhs: vec![h, w],
                rhs: vec![gt.height(), gt.width()],
            });
        }
        Ok(Sample {
            image,
            gt_noisy: gt.clone(),
            gt_clean: gt,
            meta: SampleMeta {
                seed: 0,
                index,
                spec_hash: String::new(),
                source: Some(img),
            },
        })
    }))
}

/// Writes `images/`, `masks/` (clean labels), `masks_noisy/` and a
/// `manifest.csv` listing `file,seed,index,spec_hash`.
pub fn write_synthetic(dir: &Path, spec: &SceneSpec, count: usize) -> Result<PathBuf> {
    let sub = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        fs::create_dir_all(&p)?;
        Ok(p)
    };
    let (images, masks, noisy) = (sub("images")?, sub("masks")?, sub("masks_noisy")?);
    let hash = spec.hash();
    let mut manifest = String::from("file,seed,index,spec_hash\n");
    for index in 0..count {
        let s = generate(spec, index)?;
        let file = format!("{index:05}.png");
        write_image(&images.join(&file), &s.image)?;
        write_mask(&masks.join(&file), &s.gt_clean)?;
        write_mask(&noisy.join(&file), &s.gt_noisy)?;
        manifest.push_str(&format!("{file},{},{index},{hash}\n", spec.seed));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_endpoints_and_continuity() {
        let line = bresenham((0, 0), (3, 7));
        assert_eq!(line.first(), Some(&(0, 0)));
        assert_eq!(line.last(), Some(&(3, 7)));
        for p in line.windows(2) {
            assert!((p[0].0 - p[1].0).abs() <= 1 && (p[0].1 - p[1].1).abs() <= 1);
        }
        assert_eq!(bresenham((2, 2), (2, 2)), vec![(2, 2)]);
    }

    #[test]
    fn spec_validation() {
        assert!(SceneSpec::default().validate().is_ok());
        let bad = SceneSpec {
            size: [60, 96],
            ..SceneSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Indivisible { .. })));
        let bad = SceneSpec {
            class_frequencies: [0.5; 6],
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = SceneSpec::default();
        let b = SceneSpec { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), SceneSpec::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
