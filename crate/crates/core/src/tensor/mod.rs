//! Dense tensors, a reverse-mode tape, parameters and the optimizer.

mod dense;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use dense::Tensor;
pub use gradcheck::{grad_check, grad_check_params, grad_check_with};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, Moments};
pub use params::{path_matches, ParameterStore};

use crate::error::{dim_err, Result};

/// Row-wise layer normalization with affine gain and bias (`1×d` each).
pub fn layer_norm(g: &mut Graph, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let d = g.shape(x).1;
    if d == 0 {
        return Err(dim_err!("layer norm over zero features"));
    }
    let n = g.normalize_rows(x, eps)?;
    let s = g.mul_row(n, gain)?;
    g.add_row(s, bias)
}

/// `softmax(q·kᵀ·scale)·v`
pub fn softmax_attention(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let (_, dq) = g.shape(q);
    let (nk, dk) = g.shape(k);
    let (nv, _) = g.shape(v);
    if nk == 0 {
        return Err(dim_err!("attention over an empty key sequence"));
    }
    if dq != dk {
        return Err(dim_err!("query dim {dq} vs key dim {dk}"));
    }
    if nk != nv {
        return Err(dim_err!("{nk} keys vs {nv} values"));
    }
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, scale);
    let w = g.softmax_rows(s)?;
    g.matmul(w, v)
}
