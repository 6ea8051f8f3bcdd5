use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::{ensure_same_shape, Tensor};
use crate::error::{invalid, Error, Result};
use crate::params::{ParamId, ParamSet};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse op category, used for tape censuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Add,
    Mul,
    Scale,
    ScaleBy,
    AddScalar,
    Relu,
    Gelu,
    Sum,
    Mean,
    Concat,
    Slice,
    Softmax,
    Resize,
    Depthwise,
    Pointwise,
    Conv2d,
    LayerNorm,
    GatherCols,
    ScatterAddCols,
    ColumnCosine,
    SoftmaxCrossEntropy,
    BceWithLogits,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    AddScalar(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Resize(Var),
    Depthwise {
        x: Var,
        k: Var,
        dilation: usize,
    },
    Pointwise {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddCols {
        base: Var,
        delta: Var,
        idx: Vec<usize>,
    },
    ColumnCosine {
        a: Var,
        b: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        s: Var,
        targets: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleBy(..) => OpKind::ScaleBy,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Concat(_) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Resize(_) => OpKind::Resize,
            Op::Depthwise { .. } => OpKind::Depthwise,
            Op::Pointwise { .. } => OpKind::Pointwise,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GatherCols { .. } => OpKind::GatherCols,
            Op::ScatterAddCols { .. } => OpKind::ScatterAddCols,
            Op::ColumnCosine { .. } => OpKind::ColumnCosine,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScaleBy(a, b) | Op::AddScalar(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Resize(x) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Slice { x, .. } | Op::Softmax { x, .. } | Op::GatherCols { x, .. } => vec![*x],
            Op::Depthwise { x, k, .. } => vec![*x, *k],
            Op::Pointwise { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ScatterAddCols { base, delta, .. } => vec![*base, *delta],
            Op::ColumnCosine { a, b } => vec![*a, *b],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::BceWithLogits { s, .. } => vec![*s],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records every executed op with its output value; [`Tape::backward`]
/// replays the record in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// A differentiable input leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_leaf(params.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Parameters read during this forward pass, in id order.
    pub fn params_used(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    /// Count of recorded ops per kind.
    pub fn census(&self) -> BTreeMap<OpKind, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            *out.entry(n.op.kind()).or_insert(0) += 1;
        }
        out
    }

    /// Number of recorded ops that read `v`.
    pub fn consumers(&self, v: Var) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.op.inputs().contains(&v))
            .count()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    // ----------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let &[m, n] = self.shape(x) else {
            return Err(invalid("transpose", format!("expected matrix, got {:?}", self.shape(x))));
        };
        let out = kernels::transpose(self.value(x).data(), m, n);
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("add", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("mul", self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v * s).collect())?;
        self.push(out, Op::Scale(x, s), "scale")
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("scale_by", s)?;
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v * sv).collect())?;
        self.push(out, Op::ScaleBy(x, s), "scale_by")
    }

    /// Adds the one-element tensor `s` to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("add_scalar", s)?;
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v + sv).collect())?;
        self.push(out, Op::AddScalar(x, s), "add_scalar")
    }

    fn scalar_of(&self, op: &'static str, s: Var) -> Result<f64> {
        let t = self.value(s);
        if t.numel() != 1 {
            return Err(invalid(op, format!("expected one-element tensor, got {:?}", t.shape())));
        }
        Ok(t.item())
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::Gelu(x), "gelu")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = kernels::accurate_sum(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = kernels::accurate_sum(vx.data().iter().copied()) / vx.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec()), "concat")
    }

    /// Rows `start..end` along axis 0.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start >= end || end > s[0] {
            return Err(invalid("slice", format!("range {start}..{end} on axis of {}", s[0])));
        }
        let stride: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * stride..end * stride].to_vec();
        let mut shape = s;
        shape[0] = end - start;
        self.push(Tensor::new(shape, data)?, Op::Slice { x, start }, "slice")
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(invalid("softmax", format!("axis {axis} on rank {}", s.len())));
        }
        let (o, l, i) = kernels::axis_split(s, axis);
        let out = kernels::softmax(self.value(x).data(), o, l, i);
        let t = Tensor::new(s.to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis }, "softmax")
    }

    /// Bilinear resize of a `(C, H, W)` tensor with half-pixel centers.
    /// The identity size copies the input unchanged.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bilinear_resize", format!("target {out_h}x{out_w}")));
        }
        let (c, h, w) = self.value(x).chw()?;
        let data = if (h, w) == (out_h, out_w) {
            self.value(x).data().to_vec()
        } else {
            kernels::resize(self.value(x).data(), c, h, w, out_h, out_w)
        };
        let t = Tensor::new(vec![c, out_h, out_w], data)?;
        self.push(t, Op::Resize(x), "bilinear_resize")
    }

    /// Same-padded depthwise convolution of `(C, H, W)` with `(C, k, k)` kernels.
    pub fn depthwise_conv2d(&mut self, x: Var, k: Var, dilation: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (kc, kh, kw) = self.value(k).chw()?;
        if kc != c {
            return Err(Error::Shape {
                op: "depthwise_conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if dilation == 0 || kh % 2 == 0 || kh != kw {
            return Err(invalid(
                "depthwise_conv2d",
                format!("need odd square kernel and dilation >= 1, got {kh}x{kw} d={dilation}"),
            ));
        }
        let out = kernels::depthwise(
            self.value(x).data(),
            self.value(k).data(),
            c,
            h,
            w,
            kh,
            kw,
            dilation,
        );
        let t = Tensor::new(vec![c, h, w], out)?;
        self.push(t, Op::Depthwise { x, k, dilation }, "depthwise_conv2d")
    }

    /// Per-position linear map over axis 0: `x (Cin, ...)`, `w (Cout, Cin)`,
    /// optional `b (Cout)`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let &[cout, cin] = self.shape(w) else {
            return Err(invalid("pointwise_conv", format!("weight shape {:?}", self.shape(w))));
        };
        if sx[0] != cin {
            return Err(Error::Shape {
                op: "pointwise_conv",
                lhs: sx,
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape {
                    op: "pointwise_conv bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let n: usize = sx[1..].iter().product();
        let mut out = kernels::matmul(self.value(w).data(), self.value(x).data(), cout, cin, n);
        if let Some(b) = b {
            for (row, &bv) in out.chunks_mut(n).zip(self.value(b).data()) {
                row.iter_mut().for_each(|o| *o += bv);
            }
        }
        let mut shape = sx;
        shape[0] = cout;
        self.push(Tensor::new(shape, out)?, Op::Pointwise { x, w, b }, "pointwise_conv")
    }

    /// Dense strided convolution `x (Cin, H, W)`, `w (Cout, Cin, kh, kw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).chw()?;
        let &[cout, wcin, kh, kw] = self.shape(w) else {
            return Err(invalid("conv2d", format!("weight shape {:?}", self.shape(w))));
        };
        if wcin != cin {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(invalid("conv2d", "kernel larger than padded input or zero stride"));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            dilation: 1,
        };
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d(self.value(x).data(), self.value(w).data(), bias, &geom);
        let t = Tensor::new(vec![cout, geom.out_h(), geom.out_w()], out)?;
        self.push(t, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    /// Normalizes over axis 0 (channels) independently at every position,
    /// then applies per-channel `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = sx[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let n: usize = sx[1..].iter().product();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; c * n];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; c * n];
        for j in 0..n {
            let mean = (0..c).map(|ch| xv[ch * n + j]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (xv[ch * n + j] - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[j] = r;
            for ch in 0..c {
                let xh = (xv[ch * n + j] - mean) * r;
                xhat[ch * n + j] = xh;
                out[ch * n + j] = xh * gv[ch] + bv[ch];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push(Tensor::new(sx, out)?, op, "layer_norm")
    }

    /// Columns `idx` of `x` viewed as `(C, N)`, giving `(C, K)`.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let c = sx[0];
        let n: usize = sx[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(invalid("gather_cols", format!("column {bad} out of range {n}")));
        }
        if idx.is_empty() {
            return Err(invalid("gather_cols", "empty index set"));
        }
        let xv = self.value(x).data();
        let k = idx.len();
        let mut out = vec![0.0; c * k];
        for ch in 0..c {
            for (col, &i) in idx.iter().enumerate() {
                out[ch * k + col] = xv[ch * n + i];
            }
        }
        let op = Op::GatherCols {
            x,
            idx: idx.to_vec(),
        };
        self.push(Tensor::new(vec![c, k], out)?, op, "gather_cols")
    }

    /// Copy of `base` (viewed as `(C, N)`) with `delta (C, K)` added at
    /// columns `idx`. All other entries are copied bit-for-bit.
    pub fn scatter_add_cols(&mut self, base: Var, delta: Var, idx: &[usize]) -> Result<Var> {
        let sb = self.shape(base).to_vec();
        let c = sb[0];
        let n: usize = sb[1..].iter().product();
        if self.shape(delta) != [c, idx.len()] {
            return Err(Error::Shape {
                op: "scatter_add_cols",
                lhs: vec![c, idx.len()],
                rhs: self.shape(delta).to_vec(),
            });
        }
        let mut seen = vec![false; n];
        for &i in idx {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(invalid("scatter_add_cols", format!("column {i} out of range or repeated")));
            }
        }
        let mut out = self.value(base).data().to_vec();
        let dv = self.value(delta).data();
        let k = idx.len();
        for ch in 0..c {
            for (col, &i) in idx.iter().enumerate() {
                out[ch * n + i] += dv[ch * k + col];
            }
        }
        let op = Op::ScatterAddCols {
            base,
            delta,
            idx: idx.to_vec(),
        };
        self.push(Tensor::new(sb, out)?, op, "scatter_add_cols")
    }

    /// Cosine similarity of matching columns of two `(D, E)` tensors; a zero
    /// column yields 0.
    pub fn column_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("column_cosine", self.value(a), self.value(b))?;
        let &[d, e] = self.shape(a) else {
            return Err(invalid("column_cosine", "expected (D, E) matrices"));
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = (0..e)
            .map(|j| {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for r in 0..d {
                    let (x, y) = (av[r * e + j], bv[r * e + j]);
                    dot += x * y;
                    na += x * x;
                    nb += y * y;
                }
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot / (na.sqrt() * nb.sqrt())
                }
            })
            .collect();
        self.push(Tensor::new(vec![e], out)?, Op::ColumnCosine { a, b }, "column_cosine")
    }

    /// Mean cross-entropy of `logits (C, ...)` against per-position class
    /// targets; `None` positions are ignored. With no valid position the
    /// loss is 0.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits);
        let c = s[0];
        let n: usize = s[1..].iter().product();
        if targets.len() != n {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(invalid("softmax_cross_entropy", format!("target {bad} >= {c} classes")));
        }
        let lv = self.value(logits).data();
        let probs = kernels::softmax(lv, 1, c, n);
        let mut terms = Vec::with_capacity(n);
        for (j, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let max = (0..c).map(|ch| lv[ch * n + j]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|ch| (lv[ch * n + j] - max).exp()).sum::<f64>().ln();
            terms.push(lse - lv[t * n + j]);
        }
        let count = terms.len();
        let total = kernels::accurate_sum(terms);
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        self.push(Tensor::scalar(loss), op, "softmax_cross_entropy")
    }

    /// Mean binary cross-entropy with logits over a rank-1 score vector.
    pub fn bce_with_logits(&mut self, s: Var, targets: &[f64]) -> Result<Var> {
        if self.shape(s) != [targets.len()] {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: self.shape(s).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let sv = self.value(s).data();
        let total = kernels::accurate_sum(
            sv.iter()
                .zip(targets)
                .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()),
        );
        let loss = total / targets.len() as f64;
        let op = Op::BceWithLogits {
            s,
            targets: targets.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, "bce_with_logits")
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a one-element `loss`. The tape can be differentiated
    /// once; a second call returns [`Error::DeadTape`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::DeadTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut done: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut order = Vec::new();
        pending[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            order.push(Var(id));
            self.backprop(id, &g, &mut pending)?;
            done[id] = Some(Tensor::new(self.nodes[id].value.shape().to_vec(), g)?);
        }
        Ok(Gradients {
            grads: done,
            params: self.params.clone(),
            order,
        })
    }

    fn accumulate(&self, pending: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut pending[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, id: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    self.accumulate(pending, *a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if needs(*b) {
                    self.accumulate(pending, *b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.accumulate(pending, *x, kernels::transpose(g, n, m));
            }
            Op::Reshape(x) => self.accumulate(pending, *x, g.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(pending, *a, g.to_vec());
                self.accumulate(pending, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                self.accumulate(pending, *a, ga);
                self.accumulate(pending, *b, gb);
            }
            Op::Scale(x, s) => self.accumulate(pending, *x, g.iter().map(|g| g * s).collect()),
            Op::ScaleBy(x, s) => {
                let sv = val(*s)[0];
                self.accumulate(pending, *x, g.iter().map(|g| g * sv).collect());
                let gs = g.iter().zip(val(*x)).map(|(g, x)| g * x).sum();
                self.accumulate(pending, *s, vec![gs]);
            }
            Op::AddScalar(x, s) => {
                self.accumulate(pending, *x, g.to_vec());
                self.accumulate(pending, *s, vec![g.iter().sum()]);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(pending, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(pending, *x, gx);
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                self.accumulate(pending, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                self.accumulate(pending, *x, vec![g[0] / n as f64; n]);
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let len = val(x).len();
                    self.accumulate(pending, x, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::Slice { x, start } => {
                let sx = self.shape(*x);
                let stride: usize = sx[1..].iter().product();
                let mut gx = vec![0.0; val(*x).len()];
                gx[start * stride..start * stride + g.len()].copy_from_slice(g);
                self.accumulate(pending, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let (o, l, i) = kernels::axis_split(self.shape(*x), *axis);
                let gx = kernels::softmax_backward(node.value.data(), g, o, l, i);
                self.accumulate(pending, *x, gx);
            }
            Op::Resize(x) => {
                let (c, h, w) = self.value(*x).chw()?;
                let (_, oh, ow) = node.value.chw()?;
                let gx = if (h, w) == (oh, ow) {
                    g.to_vec()
                } else {
                    kernels::resize_backward(g, c, h, w, oh, ow)
                };
                self.accumulate(pending, *x, gx);
            }
            Op::Depthwise { x, k, dilation } => {
                let (c, h, w) = self.value(*x).chw()?;
                let (_, kh, kw) = self.value(*k).chw()?;
                let (gx, gk) =
                    kernels::depthwise_backward(val(*x), val(*k), g, c, h, w, kh, kw, *dilation);
                self.accumulate(pending, *x, gx);
                self.accumulate(pending, *k, gk);
            }
            Op::Pointwise { x, w, b } => {
                let (cout, cin) = (self.shape(*w)[0], self.shape(*w)[1]);
                let n = val(*x).len() / cin;
                if needs(*x) {
                    self.accumulate(pending, *x, kernels::matmul_tn(val(*w), g, cout, cin, n));
                }
                if needs(*w) {
                    self.accumulate(pending, *w, kernels::matmul_nt(g, val(*x), cout, n, cin));
                }
                if let Some(b) = b {
                    let gb = g.chunks(n).map(|row| row.iter().sum()).collect();
                    self.accumulate(pending, *b, gb);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), g, geom);
                self.accumulate(pending, *x, gx);
                self.accumulate(pending, *w, gw);
                if let Some(b) = b {
                    self.accumulate(pending, *b, gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*x)[0];
                let n = xhat.len() / c;
                let gam = val(*gamma);
                let mut gg = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; xhat.len()];
                for j in 0..n {
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xh = 0.0;
                    for ch in 0..c {
                        let gi = g[ch * n + j];
                        let xh = xhat[ch * n + j];
                        gg[ch] += gi * xh;
                        gbeta[ch] += gi;
                        let dy = gi * gam[ch];
                        sum_dy += dy;
                        sum_dy_xh += dy * xh;
                    }
                    let cf = c as f64;
                    for ch in 0..c {
                        let dy = g[ch * n + j] * gam[ch];
                        let xh = xhat[ch * n + j];
                        gx[ch * n + j] = rstd[j] * (dy - sum_dy / cf - xh * sum_dy_xh / cf);
                    }
                }
                self.accumulate(pending, *x, gx);
                self.accumulate(pending, *gamma, gg);
                self.accumulate(pending, *beta, gbeta);
            }
            Op::GatherCols { x, idx } => {
                let c = self.shape(*x)[0];
                let n = val(*x).len() / c;
                let k = idx.len();
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    for (col, &i) in idx.iter().enumerate() {
                        gx[ch * n + i] += g[ch * k + col];
                    }
                }
                self.accumulate(pending, *x, gx);
            }
            Op::ScatterAddCols { base, delta, idx } => {
                let c = self.shape(*base)[0];
                let n = g.len() / c;
                let k = idx.len();
                self.accumulate(pending, *base, g.to_vec());
                let mut gd = vec![0.0; c * k];
                for ch in 0..c {
                    for (col, &i) in idx.iter().enumerate() {
                        gd[ch * k + col] = g[ch * n + i];
                    }
                }
                self.accumulate(pending, *delta, gd);
            }
            Op::ColumnCosine { a, b } => {
                let (d, e) = (self.shape(*a)[0], self.shape(*a)[1]);
                let (av, bv) = (val(*a), val(*b));
                let mut ga = vec![0.0; d * e];
                let mut gb = vec![0.0; d * e];
                for j in 0..e {
                    let (mut na, mut nb) = (0.0, 0.0);
                    for r in 0..d {
                        na += av[r * e + j] * av[r * e + j];
                        nb += bv[r * e + j] * bv[r * e + j];
                    }
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let (la, lb) = (na.sqrt(), nb.sqrt());
                    let cos = node.value.data()[j];
                    for r in 0..d {
                        let (x, y) = (av[r * e + j], bv[r * e + j]);
                        ga[r * e + j] = g[j] * (y / (la * lb) - cos * x / na);
                        gb[r * e + j] = g[j] * (x / (la * lb) - cos * y / nb);
                    }
                }
                self.accumulate(pending, *a, ga);
                self.accumulate(pending, *b, gb);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = self.shape(*logits)[0];
                let n = targets.len();
                let mut gl = vec![0.0; c * n];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for (j, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for ch in 0..c {
                            let onehot = if ch == t { 1.0 } else { 0.0 };
                            gl[ch * n + j] = (probs[ch * n + j] - onehot) * scale;
                        }
                    }
                }
                self.accumulate(pending, *logits, gl);
            }
            Op::BceWithLogits { s, targets } => {
                let scale = g[0] / targets.len() as f64;
                let gs = val(*s)
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (sigmoid(x) - t) * scale)
                    .collect();
                self.accumulate(pending, *s, gs);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a reverse pass: one gradient per differentiable node reached
/// from the loss.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
    order: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Nodes in the order the reverse pass visited them.
    pub fn visit_order(&self) -> &[Var] {
        &self.order
    }
}
