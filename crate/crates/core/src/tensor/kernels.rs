//! Raw numeric loops shared by the tape's forward and backward passes.
//!
//! Everything here works on flat row-major slices. Reduction order is fixed
//! by the loop nesting, so results are bit-reproducible run to run.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Compensated (Neumaier) summation. Loss reductions use it so that their
/// rounding noise stays far below finite-difference resolution.
pub fn accurate_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)` extents.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along the middle extent of `(outer, len, inner)`.
pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    out
}

pub fn softmax_backward(y: &[f64], g: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: f64 = (0..len).map(|j| y[at(j)] * g[at(j)]).sum();
            for j in 0..len {
                out[at(j)] = y[at(j)] * (g[at(j)] - dot);
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// One output coordinate's bilinear source taps along an axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-center sampling positions (`align_corners = false`), clamped
/// at the borders.
pub fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of `(c, h, w)` data. Interpolates in lerp form
/// `a + t (b - a)` so constant fields are reproduced exactly.
pub fn resize(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, xt) in tx.iter().enumerate() {
                let v00 = plane[y.lo * w + xt.lo];
                let v01 = plane[y.lo * w + xt.hi];
                let v10 = plane[y.hi * w + xt.lo];
                let v11 = plane[y.hi * w + xt.hi];
                let top = v00 + xt.frac * (v01 - v00);
                let bot = v10 + xt.frac * (v11 - v10);
                out[ch * oh * ow + oy * ow + ox] = top + y.frac * (bot - top);
            }
        }
    }
    out
}

pub fn resize_backward(g: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, xt) in tx.iter().enumerate() {
                let gv = g[ch * oh * ow + oy * ow + ox];
                let (wy0, wy1) = (1.0 - y.frac, y.frac);
                let (wx0, wx1) = (1.0 - xt.frac, xt.frac);
                plane[y.lo * w + xt.lo] += gv * wy0 * wx0;
                plane[y.lo * w + xt.hi] += gv * wy0 * wx1;
                plane[y.hi * w + xt.lo] += gv * wy1 * wx0;
                plane[y.hi * w + xt.hi] += gv * wy1 * wx1;
            }
        }
    }
    out
}

/// Geometry of a dense 2-D convolution over `(cin, h, w)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.dilation * (self.kh - 1) - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.dilation * (self.kw - 1) - 1) / self.stride + 1
    }

    /// Input row/col hit by output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x` into a `[cin·kh·kw, oh·ow]` patch matrix; out-of-image taps
/// are zero.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * p];
    for ci in 0..g.cin {
        let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let row = &xin[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            dst[oy * ow + ox] = row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut gx = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let gin = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            gin[iy * g.w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Dense convolution with weight `[cout, cin, kh, kw]`, computed as a
/// matrix product over the unfolded input.
pub fn conv2d(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let p = g.out_h() * g.out_w();
    let k = g.cin * g.kh * g.kw;
    let cols = im2col(x, g);
    let mut out = matmul(weight, &cols, g.cout, k, p);
    if let Some(b) = bias {
        for (plane, &bv) in out.chunks_mut(p).zip(b) {
            plane.iter_mut().for_each(|o| *o += bv);
        }
    }
    out
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = g.out_h() * g.out_w();
    let k = g.cin * g.kh * g.kw;
    let cols = im2col(x, g);
    let gw = matmul_nt(grad, &cols, g.cout, p, k);
    let gcols = matmul_tn(weight, grad, g.cout, k, p);
    let gb = grad.chunks(p).map(|plane| plane.iter().sum()).collect();
    (col2im(&gcols, g), gw, gb)
}

/// Same-padded depthwise convolution: channel `c` of `x` is convolved with
/// kernel `c` only. Kernel extents must be odd.
pub fn depthwise(
    x: &[f64],
    kernel: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = depthwise_geom(h, w, kh, kw, dilation);
        let xin = &x[ch * h * w..(ch + 1) * h * w];
        let k = &kernel[ch * kh * kw..(ch + 1) * kh * kw];
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = k[ky * kw + kx];
                if wv == 0.0 {
                    continue;
                }
                for oy in 0..h {
                    let Some(iy) = g.src(oy, ky, h) else { continue };
                    for ox in 0..w {
                        if let Some(ix) = g.src(ox, kx, w) {
                            plane[oy * w + ox] += wv * xin[iy * w + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward(
    x: &[f64],
    kernel: &[f64],
    grad: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kernel.len()];
    let g = depthwise_geom(h, w, kh, kw, dilation);
    for ch in 0..c {
        let off = ch * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let kidx = ch * kh * kw + ky * kw + kx;
                let wv = kernel[kidx];
                let mut acc = 0.0;
                for oy in 0..h {
                    let Some(iy) = g.src(oy, ky, h) else { continue };
                    for ox in 0..w {
                        if let Some(ix) = g.src(ox, kx, w) {
                            let gv = grad[off + oy * w + ox];
                            acc += gv * x[off + iy * w + ix];
                            gx[off + iy * w + ix] += gv * wv;
                        }
                    }
                }
                gk[kidx] = acc;
            }
        }
    }
    (gx, gk)
}

fn depthwise_geom(h: usize, w: usize, kh: usize, kw: usize, dilation: usize) -> ConvGeom {
    debug_assert!(kh == kw, "square depthwise kernels only");
    ConvGeom {
        cin: 1,
        h,
        w,
        cout: 1,
        kh,
        kw,
        stride: 1,
        pad: dilation * (kh / 2),
        dilation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64 * 0.37).sin()).collect(); // 3×4
        let ab = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(ab, matmul_nt(&a, &bt, 2, 3, 4));
        let at = transpose(&a, 2, 3);
        let tn = matmul_tn(&at, &b, 3, 2, 4);
        for (x, y) in ab.iter().zip(&tn) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn taps_at_identity_are_exact() {
        for t in resize_taps(5, 5).iter().enumerate() {
            assert_eq!(t.1.lo, t.0);
            assert_eq!(t.1.frac, 0.0);
        }
    }

    #[test]
    fn conv_output_extent() {
        let g = ConvGeom {
            cin: 3,
            h: 32,
            w: 64,
            cout: 8,
            kh: 7,
            kw: 7,
            stride: 4,
            pad: 3,
            dilation: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (8, 16));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
