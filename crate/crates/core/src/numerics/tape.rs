//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation on a [`Tape`] evaluates eagerly, records its operands and
//! returns a [`Var`] handle. [`Tape::backward`] walks the record in reverse
//! and accumulates vector-Jacobian products into every node that depends on
//! a trainable leaf. Operands are treated as `rows × cols` matrices.

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Concat(Vec<Var>),
    SliceRows(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    RowNormalize(Var),
    SoftmaxRows(Var),
    LayerNorm(Var),
    Gelu(Var),
    SegmentMean(Var, Vec<usize>),
    Mean(Var),
    SumSquares(Var),
    CrossEntropy(Var, Vec<usize>),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        lens: Vec<usize>,
        scale: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Exp(_) => "exp",
            Op::Concat(_) => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::SelectRows(..) => "select_rows",
            Op::RowNormalize(_) => "row_normalize",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNorm(_) => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::SegmentMean(..) => "segment_mean",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::BlockAttention { .. } => "block_attention",
        }
    }

    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::ScaleBy(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::SliceRows(a, ..)
            | Op::SelectRows(a, _)
            | Op::RowNormalize(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNorm(a)
            | Op::Gelu(a)
            | Op::SegmentMean(a, _)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::CrossEntropy(a, _) => vec![*a],
            Op::Concat(vs) => vs.clone(),
            Op::BlockAttention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    op: Op,
    needs_grad: bool,
    /// Op-specific intermediates kept for the adjoint (softmax probabilities,
    /// inverse standard deviations, row norms).
    cache: Vec<f64>,
}

/// Record of primitive operations with their forward values.
///
/// A tape is single-threaded; build one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; exact zeros when `v` had no influence on the output.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        let value = if value.shape().len() == 2 {
            value
        } else {
            value.as_matrix()
        };
        self.values.push(value);
        self.nodes.push(Node {
            op: Op::Leaf,
            needs_grad,
            cache: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Value of the node recorded at position `index`.
    pub fn value_at(&self, index: usize) -> &Tensor {
        &self.values[index]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let operands = op.operands();
        for &v in &operands {
            self.check(v)?;
        }
        let (value, cache) = eval(&op, &self.values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = operands.iter().any(|v| self.nodes[v.0].needs_grad);
        self.values.push(value);
        self.nodes.push(Node {
            op,
            needs_grad,
            cache,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    /// Multiplies `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleBy(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    /// Stacks operands vertically.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.push(Op::SliceRows(a, start, end))
    }

    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::SelectRows(a, idx))
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNormalize(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine terms; constant rows map to
    /// zeros.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LayerNorm(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    /// Mean of consecutive row groups of the given lengths.
    pub fn segment_mean(&mut self, a: Var, lens: Vec<usize>) -> Result<Var> {
        self.push(Op::SegmentMean(a, lens))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumSquares(a))
    }

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, targets))
    }

    /// Scaled dot-product attention applied independently to consecutive
    /// row blocks of the given lengths: `softmax(q kᵀ · scale) v` per block.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lens: Vec<usize>,
        scale: f64,
    ) -> Result<Var> {
        self.push(Op::BlockAttention {
            q,
            k,
            v,
            lens,
            scale,
        })
    }

    /// Mean squared entry difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let d = self.sub(a, b)?;
        let s = self.sum_squares(d)?;
        self.scale(s, 1.0 / n)
    }

    /// Recomputes every node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.values.len());
        for (node, original) in self.nodes.iter().zip(&self.values) {
            let v = match node.op {
                Op::Leaf => original.clone(),
                ref op => eval(op, &values)?.0,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Backward pass for a scalar output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, Tensor::scalar(1.0))
    }

    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.check(output)?;
        let out_shape = self.values[output.0].shape();
        let seed = if seed.shape() == out_shape {
            seed
        } else if seed.len() == self.values[output.0].len()
            && seed.dims2() == self.values[output.0].dims2()
        {
            seed.reshape(out_shape.to_vec())?
        } else {
            return shape_err(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), out_shape),
            );
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.adjoint(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.values[v.0].shape().to_vec();
                *slot = Some(if g.shape() == shape.as_slice() {
                    g
                } else {
                    Tensor::new(shape, g.into_data()).expect("gradient size matches value")
                });
            }
        }
    }

    fn adjoint(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &self.values[i];
        let val = |v: Var| &self.values[v.0];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(*b).data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, gd, false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).rows();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, val(*b).data(), false, &mut da, false);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, val(*a).data(), false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::matrix(n, k, db)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                self.accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[r.0].needs_grad {
                    self.accumulate(grads, *r, col_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a), val(*r));
                let cols = av.cols();
                if self.nodes[a.0].needs_grad {
                    let mut da = g.clone();
                    for (j, x) in da.data_mut().iter_mut().enumerate() {
                        *x *= rv.data()[j % cols];
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[r.0].needs_grad {
                    self.accumulate(grads, *r, col_sums(&zip_map(g, av, |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::ScaleBy(a, s) => {
                let sv = val(*s).data()[0];
                self.accumulate(grads, *a, g.map(|x| x * sv));
                if self.nodes[s.0].needs_grad {
                    let ds: f64 = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, y, |x, e| x * e)),
            Op::Concat(parts) => {
                let cols = y.cols();
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    let rows = n / cols;
                    if self.nodes[p.0].needs_grad {
                        let part = gd[offset..offset + n].to_vec();
                        self.accumulate(grads, *p, Tensor::matrix(rows, cols, part)?);
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start, _) => {
                let av = val(*a);
                let cols = av.cols();
                let mut da = Tensor::zeros(av.shape());
                da.data_mut()[start * cols..start * cols + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, da);
            }
            Op::SelectRows(a, idx) => {
                let av = val(*a);
                let cols = av.cols();
                let mut da = Tensor::zeros(av.shape());
                let dd = da.data_mut();
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dd[src * cols + c] += gd[r * cols + c];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowNormalize(a) => {
                let cols = y.cols();
                let mut da = vec![0.0; y.len()];
                for (r, &norm) in node.cache.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        da[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), da)?);
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = y.dims2();
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        da[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), da)?);
            }
            Op::LayerNorm(a) => {
                let (rows, cols) = y.dims2();
                let n = cols as f64;
                let mut da = vec![0.0; y.len()];
                for r in 0..rows {
                    let inv = node.cache[r];
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for c in 0..cols {
                        da[r * cols + c] = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), da)?);
            }
            Op::Gelu(a) => {
                let da = zip_map(g, val(*a), |gx, x| gx * gelu_grad(x));
                self.accumulate(grads, *a, da);
            }
            Op::SegmentMean(a, lens) => {
                let av = val(*a);
                let cols = av.cols();
                let mut da = Tensor::zeros(av.shape());
                let dd = da.data_mut();
                let mut start = 0;
                for (s, &len) in lens.iter().enumerate() {
                    let w = 1.0 / len as f64;
                    for r in start..start + len {
                        for c in 0..cols {
                            dd[r * cols + c] = gd[s * cols + c] * w;
                        }
                    }
                    start += len;
                }
                self.accumulate(grads, *a, da);
            }
            Op::Mean(a) => {
                let av = val(*a);
                let w = gd[0] / av.len() as f64;
                self.accumulate(grads, *a, av.map(|_| w));
            }
            Op::SumSquares(a) => {
                let w = 2.0 * gd[0];
                self.accumulate(grads, *a, val(*a).map(|x| w * x));
            }
            Op::CrossEntropy(a, targets) => {
                let av = val(*a);
                let (rows, cols) = av.dims2();
                let w = gd[0] / rows as f64;
                let mut da = node.cache.clone();
                for (r, &t) in targets.iter().enumerate() {
                    da[r * cols + t] -= 1.0;
                }
                da.iter_mut().for_each(|x| *x *= w);
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            Op::BlockAttention {
                q,
                k,
                v,
                lens,
                scale,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let dk_cols = qv.cols();
                let dv_cols = vv.cols();
                let mut dq = vec![0.0; qv.len()];
                let mut dkk = vec![0.0; kv.len()];
                let mut dvv = vec![0.0; vv.len()];
                let mut start = 0;
                let mut p_off = 0;
                for &len in lens {
                    let p = &node.cache[p_off..p_off + len * len];
                    let go = &gd[start * dv_cols..(start + len) * dv_cols];
                    let vb = &vv.data()[start * dv_cols..(start + len) * dv_cols];
                    let qb = &qv.data()[start * dk_cols..(start + len) * dk_cols];
                    let kb = &kv.data()[start * dk_cols..(start + len) * dk_cols];
                    // dV = Pᵀ dO
                    gemm(
                        len,
                        len,
                        dv_cols,
                        p,
                        true,
                        go,
                        false,
                        &mut dvv[start * dv_cols..(start + len) * dv_cols],
                        true,
                    );
                    // dP = dO Vᵀ, then softmax adjoint
                    let mut dp = vec![0.0; len * len];
                    gemm(len, dv_cols, len, go, false, vb, true, &mut dp, false);
                    for r in 0..len {
                        let pr = &p[r * len..(r + 1) * len];
                        let dr = &mut dp[r * len..(r + 1) * len];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                        for c in 0..len {
                            dr[c] = pr[c] * (dr[c] - dot) * scale;
                        }
                    }
                    gemm(
                        len,
                        len,
                        dk_cols,
                        &dp,
                        false,
                        kb,
                        false,
                        &mut dq[start * dk_cols..(start + len) * dk_cols],
                        true,
                    );
                    gemm(
                        len,
                        len,
                        dk_cols,
                        &dp,
                        true,
                        qb,
                        false,
                        &mut dkk[start * dk_cols..(start + len) * dk_cols],
                        true,
                    );
                    start += len;
                    p_off += len * len;
                }
                self.accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), dq)?);
                self.accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), dkk)?);
                self.accumulate(grads, *v, Tensor::new(vv.shape().to_vec(), dvv)?);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(b.shape().to_vec(), data).expect("same size")
}

fn col_sums(g: &Tensor) -> Tensor {
    let (rows, cols) = g.dims2();
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, x) in out.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    Tensor::matrix(1, cols, out).expect("nonempty")
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims2() == b.dims2() {
        Ok(())
    } else {
        shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn row_len_check(op: &'static str, a: &Tensor, r: &Tensor) -> Result<()> {
    if r.len() == a.cols() {
        Ok(())
    } else {
        shape_err(op, format!("row of {} vs {} columns", r.len(), a.cols()))
    }
}

fn segments_check(op: &'static str, lens: &[usize], rows: usize) -> Result<()> {
    if lens.iter().any(|&l| l == 0) || lens.iter().sum::<usize>() != rows {
        return shape_err(
            op,
            format!("segments {lens:?} do not partition {rows} rows"),
        );
    }
    Ok(())
}

/// Forward evaluation of one op from earlier values.
fn eval(op: &Op, vals: &[Tensor]) -> Result<(Tensor, Vec<f64>)> {
    let val = |v: &Var| &vals[v.0];
    let none = Vec::new;
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, k) = a.dims2();
            let (k2, n) = b.dims2();
            if k != k2 {
                return shape_err("matmul", format!("{m}x{k} · {k2}x{n}"));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            (Tensor::matrix(m, n, out)?, none())
        }
        Op::MatMulT(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, k) = a.dims2();
            let (n, k2) = b.dims2();
            if k != k2 {
                return shape_err("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ"));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), true, &mut out, false);
            (Tensor::matrix(m, n, out)?, none())
        }
        Op::Transpose(a) => (val(a).transpose(), none()),
        Op::Add(a, b) => {
            same_shape("add", val(a), val(b))?;
            (zip_map(val(b), val(a), |x, y| y + x), none())
        }
        Op::Sub(a, b) => {
            same_shape("sub", val(a), val(b))?;
            (
                zip_map(val(a), val(b), |x, y| x - y).reshape(val(a).shape().to_vec())?,
                none(),
            )
        }
        Op::Mul(a, b) => {
            same_shape("mul", val(a), val(b))?;
            (zip_map(val(b), val(a), |x, y| y * x), none())
        }
        Op::AddRow(a, r) => {
            let (a, r) = (val(a), val(r));
            row_len_check("add_row", a, r)?;
            let cols = a.cols();
            let mut out = a.clone();
            for (j, x) in out.data_mut().iter_mut().enumerate() {
                *x += r.data()[j % cols];
            }
            (out, none())
        }
        Op::MulRow(a, r) => {
            let (a, r) = (val(a), val(r));
            row_len_check("mul_row", a, r)?;
            let cols = a.cols();
            let mut out = a.clone();
            for (j, x) in out.data_mut().iter_mut().enumerate() {
                *x *= r.data()[j % cols];
            }
            (out, none())
        }
        Op::Scale(a, c) => (val(a).map(|x| x * c), none()),
        Op::ScaleBy(a, s) => {
            let s = val(s);
            if s.len() != 1 {
                return shape_err("scale_by", format!("scalar expected, got {:?}", s.shape()));
            }
            let sv = s.data()[0];
            (val(a).map(|x| x * sv), none())
        }
        Op::Exp(a) => (val(a).map(f64::exp), none()),
        Op::Concat(parts) => {
            let Some(first) = parts.first() else {
                return shape_err("concat", "no operands");
            };
            let cols = val(first).cols();
            let mut data = Vec::new();
            for p in parts {
                let t = val(p);
                if t.cols() != cols {
                    return shape_err("concat", format!("{} vs {cols} columns", t.cols()));
                }
                data.extend_from_slice(t.data());
            }
            let rows = data.len() / cols;
            (Tensor::matrix(rows, cols, data)?, none())
        }
        Op::SliceRows(a, start, end) => {
            let a = val(a);
            let (rows, cols) = a.dims2();
            if start >= end || *end > rows {
                return shape_err("slice_rows", format!("{start}..{end} of {rows} rows"));
            }
            let data = a.data()[start * cols..end * cols].to_vec();
            (Tensor::matrix(end - start, cols, data)?, none())
        }
        Op::SelectRows(a, idx) => {
            let a = val(a);
            let (rows, cols) = a.dims2();
            if idx.is_empty() {
                return shape_err("select_rows", "no indices");
            }
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                if i >= rows {
                    return Err(Error::OutOfRange {
                        what: "rows",
                        index: i,
                        len: rows,
                    });
                }
                data.extend_from_slice(a.row(i));
            }
            (Tensor::matrix(idx.len(), cols, data)?, none())
        }
        Op::RowNormalize(a) => {
            let a = val(a);
            let (rows, cols) = a.dims2();
            let mut out = a.clone();
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
                let n = row
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(NORM_FLOOR);
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            }
            (out, norms)
        }
        Op::SoftmaxRows(a) => {
            let a = val(a);
            let (rows, cols) = a.dims2();
            let mut out = a.clone();
            for r in 0..rows {
                softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
            }
            (out, none())
        }
        Op::LayerNorm(a) => {
            let a = val(a);
            let (rows, cols) = a.dims2();
            let n = cols as f64;
            let mut out = a.clone();
            let mut invs = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                row.iter_mut().for_each(|x| *x = (*x - mu) * inv);
                invs.push(inv);
            }
            (out, invs)
        }
        Op::Gelu(a) => (val(a).map(gelu), none()),
        Op::SegmentMean(a, lens) => {
            let a = val(a);
            let (rows, cols) = a.dims2();
            segments_check("segment_mean", lens, rows)?;
            let mut out = vec![0.0; lens.len() * cols];
            let mut start = 0;
            for (s, &len) in lens.iter().enumerate() {
                let o = &mut out[s * cols..(s + 1) * cols];
                for r in start..start + len {
                    for (x, y) in o.iter_mut().zip(a.row(r)) {
                        *x += y;
                    }
                }
                o.iter_mut().for_each(|x| *x /= len as f64);
                start += len;
            }
            (Tensor::matrix(lens.len(), cols, out)?, none())
        }
        Op::Mean(a) => {
            let a = val(a);
            (
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64),
                none(),
            )
        }
        Op::SumSquares(a) => (
            Tensor::scalar(val(a).data().iter().map(|x| x * x).sum()),
            none(),
        ),
        Op::CrossEntropy(a, targets) => {
            let a = val(a);
            let (rows, cols) = a.dims2();
            if targets.len() != rows {
                return shape_err(
                    "cross_entropy",
                    format!("{} targets for {rows} rows", targets.len()),
                );
            }
            if cols < 2 {
                return shape_err("cross_entropy", "need at least two classes");
            }
            let mut probs = a.data().to_vec();
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= cols {
                    return Err(Error::OutOfRange {
                        what: "classes",
                        index: t,
                        len: cols,
                    });
                }
                let row = &a.data()[r * cols..(r + 1) * cols];
                loss += log_sum_exp(row) - row[t];
                softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
            }
            (Tensor::scalar(loss / rows as f64), probs)
        }
        Op::BlockAttention {
            q,
            k,
            v,
            lens,
            scale,
        } => {
            let (q, k, v) = (val(q), val(k), val(v));
            let (rows, dk) = q.dims2();
            if k.dims2() != (rows, dk) || v.rows() != rows {
                return shape_err(
                    "block_attention",
                    format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
                );
            }
            segments_check("block_attention", lens, rows)?;
            let dv = v.cols();
            let mut out = vec![0.0; rows * dv];
            let mut cache = Vec::with_capacity(lens.iter().map(|l| l * l).sum());
            let mut start = 0;
            for &len in lens {
                let qb = &q.data()[start * dk..(start + len) * dk];
                let kb = &k.data()[start * dk..(start + len) * dk];
                let vb = &v.data()[start * dv..(start + len) * dv];
                let mut s = vec![0.0; len * len];
                gemm(len, dk, len, qb, false, kb, true, &mut s, false);
                for r in 0..len {
                    let row = &mut s[r * len..(r + 1) * len];
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(row);
                }
                gemm(
                    len,
                    len,
                    dv,
                    &s,
                    false,
                    vb,
                    false,
                    &mut out[start * dv..(start + len) * dv],
                    false,
                );
                cache.extend_from_slice(&s);
                start += len;
            }
            (Tensor::matrix(rows, dv, out)?, cache)
        }
    })
}

/// Numerically stable `log Σ exp(row)`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}
