//! Dynamic reverse-mode tape.
//!
//! Every forward pass builds a fresh [`Graph`] that borrows the parameter
//! store read-only. Nodes are appended in evaluation order, so a reverse sweep
//! over the node list is a valid topological order for backpropagation.
//! All values are 2-D (`rows × cols`); vectors are `1 × n` rows.

use std::collections::{BTreeMap, HashMap};

use super::dense::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use super::params::ParameterStore;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    SoftmaxRows(Var),
    NormalizeRows {
        x: Var,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParameterStore,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    grad_enabled: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records no gradients (inference, frozen re-encoding).
    pub fn no_grad(store: &'s ParameterStore) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = if value.rank() == 2 {
            value
        } else {
            let (r, c) = (value.rows(), value.cols());
            Tensor::new(vec![r, c], value.into_data()).expect("same numel")
        };
        self.nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Input leaf that receives gradient (used by gradient checks).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Parameter leaf. Frozen parameters enter as constants.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter '{name}'")))?
            .clone();
        let trainable = !self.store.is_frozen(name);
        let v = self.leaf(t, trainable);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        Ok(v)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dim_err!("matmul {m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(dim_err!("matmul_nt {m}x{k} · ({n}x{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(dim_err!("row broadcast of {:?} onto {r}x{c}", self.shape(row)));
        }
        let rv = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &x) in chunk.iter_mut().zip(&rv) {
                if mul {
                    *o *= x;
                } else {
                    *o += x;
                }
            }
        }
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(Tensor::new(vec![r, c], out)?, op, &[a, row]))
    }

    /// `a + row` with `row: 1×c` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    /// `a ⊙ row` with `row: 1×c` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * x);
        self.push(t, Op::Square(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c == 0 {
            return Err(dim_err!("softmax over zero columns"));
        }
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(a), &[a]))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c == 0 {
            return Err(dim_err!("layer norm over zero features"));
        }
        let mut out = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            rstd.push(s);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::NormalizeRows { x, rstd }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let c = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, cc) = self.shape(p);
            if cc != c {
                return Err(dim_err!("concat_rows cols {cc} vs {c}"));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let r = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (rr, c) = self.shape(p);
            if rr != r {
                return Err(dim_err!("concat_cols rows {rr} vs {r}"));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let c = self.shape(p).1;
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(Tensor::new(vec![r, cols], data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(dim_err!("rows {start}..{} of {r}", start + len));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(dim_err!("cols {start}..{} of {c}", start + len));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).reshape(&[rows, cols])?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Column means, `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a).mean_rows();
        self.push(t, Op::MeanRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared difference between two same-shape values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(dim_err!("{} targets for {r} rows", targets.len()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            if t >= c {
                return Err(Error::Value(format!("target class {t} >= {c}")));
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        loss /= r.max(1) as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err!("backward from non-scalar {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        let mut params = BTreeMap::new();
        for (name, v) in &self.param_order {
            if self.nodes[v.0].requires_grad {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                params.insert(name.clone(), g);
            }
        }
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_into(g, self.value(*b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, tensor2(m, k, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_into(self.value(*a).data(), g, &mut gb, m, k, n);
                    self.accumulate(grads, *b, tensor2(k, n, gb));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a · bᵀ, a: m×k, b: n×k
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, self.value(*b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, tensor2(m, k, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn_into(g, self.value(*a).data(), &mut gb, m, n, k);
                    self.accumulate(grads, *b, tensor2(n, k, gb));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, gout.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let t = gout.zip_map(self.value(*b), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *a, t);
                }
                if self.needs(*b) {
                    let t = gout.zip_map(self.value(*a), |x, y| x * y).expect("shape");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gout.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, column_sums(gout));
                }
            }
            Op::MulRow(a, row) => {
                let c = gout.cols();
                let rv = self.value(*row).data();
                if self.needs(*a) {
                    let mut ga = g.to_vec();
                    for chunk in ga.chunks_mut(c) {
                        for (o, &x) in chunk.iter_mut().zip(rv) {
                            *o *= x;
                        }
                    }
                    self.accumulate(grads, *a, tensor2(gout.rows(), c, ga));
                }
                if self.needs(*row) {
                    let av = self.value(*a).data();
                    let mut gr = vec![0.0; c];
                    for (gc, ac) in g.chunks(c).zip(av.chunks(c)) {
                        for j in 0..c {
                            gr[j] += gc[j] * ac[j];
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row(&gr));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gout.map(|v| v * s)),
            Op::AddScalar(a) => self.accumulate(grads, *a, gout.clone()),
            Op::Silu(a) => {
                let t = gout
                    .zip_map(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::Tanh(a) => {
                let t = gout.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::Sigmoid(a) => {
                let t = gout.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::Square(a) => {
                let t = gout.zip_map(self.value(*a), |gv, x| 2.0 * gv * x).expect("shape");
                self.accumulate(grads, *a, t);
            }
            Op::SoftmaxRows(a) => {
                let c = gout.cols();
                let y = node.value.data();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, tensor2(gout.rows(), c, ga));
            }
            Op::NormalizeRows { x, rstd } => {
                let c = gout.cols();
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (i, ((gr, yr), out)) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        out[j] = rstd[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, tensor2(gout.rows(), c, gx));
            }
            Op::ConcatRows(parts) => {
                let c = gout.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if self.needs(p) {
                        let d = g[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, p, tensor2(r, c, d));
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(parts) => {
                let total = gout.cols();
                let r = gout.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, p, tensor2(r, c, d));
                    }
                    offset += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = vec![0.0; r * c];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *a, tensor2(r, c, d));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let len = gout.cols();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *a, tensor2(r, c, d));
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, tensor2(r, c, g.to_vec()));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let inv = 1.0 / r as f64;
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.iter().map(|v| v * inv));
                }
                self.accumulate(grads, *a, tensor2(r, c, d));
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(&[r, c], g[0]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, c) = self.shape(*logits);
                let s = g[0] / r as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= s;
                }
                self.accumulate(grads, *logits, tensor2(r, c, d));
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter touched by the graph.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

fn tensor2(r: usize, c: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![r, c], data).expect("gradient shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for chunk in t.data().chunks(c) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::row(&out)
}
