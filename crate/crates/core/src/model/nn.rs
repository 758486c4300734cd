//! Layer building blocks over the tape, and their parameter initializers.

use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::tensor::{layer_norm, softmax_attention, Graph, ParameterStore, Tensor, Var};

pub(crate) struct Init<'a> {
    pub store: &'a mut ParameterStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<()> {
        let t = Tensor::randn(&[rows, cols], std, self.rng);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.store.insert(name, Tensor::zeros(&[rows, cols]))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.store.insert(name, Tensor::full(&[rows, cols], 1.0))
    }

    /// `{p}.w` scaled by fan-in, and `{p}.b` zero.
    pub fn linear(&mut self, p: &str, din: usize, dout: usize) -> Result<()> {
        self.normal(&format!("{p}.w"), din, dout, 1.0 / (din as f64).sqrt())?;
        self.zeros(&format!("{p}.b"), 1, dout)
    }

    pub fn linear_zero(&mut self, p: &str, din: usize, dout: usize) -> Result<()> {
        self.zeros(&format!("{p}.w"), din, dout)?;
        self.zeros(&format!("{p}.b"), 1, dout)
    }

    pub fn ln(&mut self, p: &str, d: usize) -> Result<()> {
        self.ones(&format!("{p}.g"), 1, d)?;
        self.zeros(&format!("{p}.b"), 1, d)
    }

    /// Projections for attention from `dq`-wide queries onto `dkv`-wide
    /// keys/values, inner width `d`, output back to `dq`.
    pub fn attn(&mut self, p: &str, dq: usize, dkv: usize, d: usize, zero_out: bool) -> Result<()> {
        self.normal(&format!("{p}.wq"), dq, d, 1.0 / (dq as f64).sqrt())?;
        self.normal(&format!("{p}.wk"), dkv, d, 1.0 / (dkv as f64).sqrt())?;
        self.normal(&format!("{p}.wv"), dkv, d, 1.0 / (dkv as f64).sqrt())?;
        if zero_out {
            self.zeros(&format!("{p}.wo"), d, dq)
        } else {
            self.normal(&format!("{p}.wo"), d, dq, 1.0 / (d as f64).sqrt())
        }
    }

    pub fn mlp(&mut self, p: &str, d: usize, hidden: usize) -> Result<()> {
        self.linear(&format!("{p}.fc1"), d, hidden)?;
        self.linear(&format!("{p}.fc2"), hidden, d)
    }

    /// Pre-norm transformer block.
    pub fn block(&mut self, p: &str, d: usize, hidden: usize) -> Result<()> {
        self.ln(&format!("{p}.ln1"), d)?;
        self.attn(&format!("{p}.attn"), d, d, d, false)?;
        self.ln(&format!("{p}.ln2"), d)?;
        self.mlp(&format!("{p}.mlp"), d, hidden)
    }
}

pub(crate) fn param(g: &mut Graph, p: &str, leaf: &str) -> Result<Var> {
    g.param(&format!("{p}.{leaf}"))
}

pub(crate) fn linear(g: &mut Graph, p: &str, x: Var) -> Result<Var> {
    let w = param(g, p, "w")?;
    let b = param(g, p, "b")?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn ln(g: &mut Graph, p: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = param(g, p, "g")?;
    let bias = param(g, p, "b")?;
    layer_norm(g, x, gain, bias, eps)
}

/// Multi-head attention of `q_in` over `kv_in`, including the output projection.
pub(crate) fn mha(g: &mut Graph, p: &str, q_in: Var, kv_in: Var, heads: usize) -> Result<Var> {
    let (nk, _) = g.shape(kv_in);
    if nk == 0 {
        return Err(dim_err!("attention '{p}' over an empty sequence"));
    }
    let wq = param(g, p, "wq")?;
    let wk = param(g, p, "wk")?;
    let wv = param(g, p, "wv")?;
    let wo = param(g, p, "wo")?;
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(kv_in, wk)?;
    let v = g.matmul(kv_in, wv)?;
    let d = g.shape(q).1;
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(dim_err!("width {d} not divisible into {heads} heads"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let out = if heads == 1 {
        softmax_attention(g, q, k, v, scale)?
    } else {
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            parts.push(softmax_attention(g, qh, kh, vh, scale)?);
        }
        g.concat_cols(&parts)?
    };
    g.matmul(out, wo)
}

pub(crate) fn mlp(g: &mut Graph, p: &str, x: Var) -> Result<Var> {
    let h = linear(g, &format!("{p}.fc1"), x)?;
    let h = g.silu(h);
    linear(g, &format!("{p}.fc2"), h)
}

pub(crate) fn block(g: &mut Graph, p: &str, x: Var, heads: usize, eps: f64) -> Result<Var> {
    let h = ln(g, &format!("{p}.ln1"), x, eps)?;
    let a = mha(g, &format!("{p}.attn"), h, h, heads)?;
    let x = g.add(x, a)?;
    let h = ln(g, &format!("{p}.ln2"), x, eps)?;
    let m = mlp(g, &format!("{p}.mlp"), h)?;
    g.add(x, m)
}

/// Layer norm without affine parameters.
pub(crate) fn ln_plain(g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
    g.normalize_rows(x, eps)
}

/// `x ⊙ (1 + scale) + shift` with row-broadcast modulation.
pub(crate) fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = g.add_scalar(scale, 1.0);
    let y = g.mul_row(x, s1)?;
    g.add_row(y, shift)
}

/// Sinusoidal embedding of a scalar in `[0, 1]`, `1 × d`.
pub fn sinusoidal(s: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut v = vec![0.0; d];
    for i in 0..half {
        let freq = (1000f64).powf(-(i as f64) / half.max(1) as f64);
        let a = s * 1000.0 * freq;
        v[i] = a.sin();
        v[half + i] = a.cos();
    }
    Tensor::row(&v)
}
