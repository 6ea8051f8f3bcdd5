//! Parameterized building blocks shared by the encoder and decoder.
//!
//! Every block works on channel-first tensors `(C, H, W)` or `(C, N)`, so a
//! "linear" layer is a pointwise convolution over the leading axis.

use crate::error::{invalid, Result};
use crate::params::{Init, ParamId, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

/// Pointwise (1×1) projection `(Cin, ...) -> (Cout, ...)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), init.fan_in(&[cout, cin], cin));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias }
    }

    /// Zero-initialized projection.
    pub fn zeros(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let weight = ps.add(format!("{name}.weight"), Tensor::zeros(&[cout, cin]));
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = self.bias.map(|b| tape.param(ps, b));
        tape.pointwise_conv(x, w, b)
    }
}

/// Dense strided convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let weight = ps.add(
            format!("{name}.weight"),
            init.fan_in(&[cout, cin, kernel, kernel], fan_in),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Channel layer normalization with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head scaled dot-product attention.
///
/// Queries come from one token set, keys and values from another (the same
/// one for self-attention). Keys and values share a single fused projection,
/// so the context tensor is read by exactly one op.
#[derive(Clone, Debug)]
pub struct Attention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key_value: Linear,
    pub out: Linear,
}

impl Attention {
    /// `dim` is the query/output width, `context_dim` the width of the
    /// key/value source.
    pub fn new(
        ps: &mut ParamSet,
        init: &mut Init,
        name: &str,
        dim: usize,
        context_dim: usize,
        heads: usize,
        bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid(
                "attention",
                format!("width {dim} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            heads,
            dim,
            query: Linear::new(ps, init, &format!("{name}.query"), dim, dim, bias),
            key_value: Linear::new(ps, init, &format!("{name}.key_value"), context_dim, 2 * dim, bias),
            out: Linear::new(ps, init, &format!("{name}.out"), dim, dim, bias),
        })
    }

    /// `queries (D, ...)` attend over `context (Dc, ...)`; the output has
    /// the queries' shape.
    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, queries: Var, context: Var) -> Result<Var> {
        let qshape = tape.shape(queries).to_vec();
        let nq: usize = qshape[1..].iter().product();
        let nk: usize = tape.shape(context)[1..].iter().product();
        let d = self.dim;
        let dh = d / self.heads;

        let q = self.query.forward(tape, ps, queries)?;
        let q = tape.reshape(q, &[d, nq])?;
        let kv = self.key_value.forward(tape, ps, context)?;
        let kv = tape.reshape(kv, &[2 * d, nk])?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice(kv, h * dh, (h + 1) * dh)?;
            let vh = tape.slice(kv, d + h * dh, d + (h + 1) * dh)?;
            let qt = tape.transpose(qh)?;
            let scores = tape.matmul(qt, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            let attn_t = tape.transpose(attn)?;
            heads.push(tape.matmul(vh, attn_t)?);
        }
        let merged = tape.concat(&heads)?;
        let merged = tape.reshape(merged, &qshape)?;
        self.out.forward(tape, ps, merged)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(ps, init, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(ps, init, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamSet, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, ps, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, ps, h)
    }
}
