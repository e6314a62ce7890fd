//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. Nodes whose inputs do
//! not require gradients are stored as constants, so inference passes keep
//! no backward state. `backward` walks the tape in reverse once.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::TensorError;
use crate::tensor::{gemm_into, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
pub trait CustomBackward<S: Real> {
    /// Returns one gradient per input (`None` when the input gets nothing).
    fn backward(&self, grad_out: &Tensor<S>, inputs: &[&Tensor<S>], output: &Tensor<S>) -> Vec<Option<Tensor<S>>>;
}

enum Op<S: Real> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    Pick {
        a: Var,
        idx: Vec<usize>,
    },
    Sinusoid {
        x: Var,
        octaves: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<S>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MeanSpatial(Var),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<S>>,
    },
}

struct Node<S: Real> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Graph<S: Real> {
    nodes: RefCell<Vec<Node<S>>>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn as_matrix<S: Real>(op: &'static str, t: &Tensor<S>) -> Result<(usize, usize), TensorError> {
    match t.shape().len() {
        1 | 2 => Ok(t.rows_cols()),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected a rank-1 or rank-2 tensor, got {:?}", t.shape()),
        }),
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, parents: &[Var]) -> Var {
        self.push_arc(Arc::new(value), op, parents)
    }

    fn push_arc(&self, value: Arc<Tensor<S>>, op: Op<S>, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Leaf sharing storage with a parameter tensor.
    pub fn leaf_shared(&self, value: Arc<Tensor<S>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<S>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar read of a single-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(&self.value(b), false, false)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(&self.value(b), false, true)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>, TensorError> {
        let (va, vr) = (self.value(a), self.value(row));
        let (_, cols) = va.rows_cols();
        if vr.shape().len() != 1 || vr.len() != cols {
            return Err(shape_err(op, va.shape(), vr.shape()));
        }
        let r = vr.data();
        let data = va.data().iter().enumerate().map(|(i, &x)| f(x, r[i % cols])).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Adds a rank-1 `row` to every row of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var, TensorError> {
        let out = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `a` elementwise by the rank-1 `row`.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var, TensorError> {
        let out = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(S::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn softplus(&self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(S::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.value(a).map(S::ln);
        self.push(out, Op::Ln(a), &[a])
    }

    pub fn softmax_rows(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (rows, cols) = as_matrix("softmax", &va)?;
        let mut out = va.as_ref().clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (rows, cols) = as_matrix("log_softmax", &va)?;
        let mut out = va.as_ref().clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(out, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Row-wise log-sum-exp; output has one entry per row.
    pub fn logsumexp_rows(&self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (rows, cols) = as_matrix("logsumexp", &va)?;
        let data = (0..rows)
            .map(|r| logsumexp(&va.data()[r * cols..(r + 1) * cols]))
            .collect();
        Ok(self.push(Tensor::new(vec![rows], data)?, Op::LogSumExpRows(a), &[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, cols) = as_matrix("layer_norm", &vx)?;
        if vg.shape() != [cols] || vb.shape() != [cols] {
            return Err(shape_err("layer_norm", vx.shape(), vg.shape()));
        }
        let n = S::of(cols as f64);
        let eps = S::of(eps);
        let mut xhat = vec![S::zero(); rows * cols];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum() / S::of(va.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = match values.first() {
            Some(v) => as_matrix("concat_cols", v)?.0,
            None => {
                return Err(TensorError::Invalid {
                    op: "concat_cols",
                    msg: "nothing to concatenate".into(),
                })
            }
        };
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let (r, c) = as_matrix("concat_cols", v)?;
            if r != rows || v.shape().len() != values[0].shape().len() {
                return Err(shape_err("concat_cols", values[0].shape(), v.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if values[0].shape().len() == 1 {
            vec![total]
        } else {
            vec![rows, total]
        };
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks rank-2 tensors with equal column counts.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let Some(first) = values.first() else {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "nothing to concatenate".into(),
            });
        };
        let (_, cols) = as_matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &values {
            let (r, c) = as_matrix("concat_rows", v)?;
            if c != cols {
                return Err(shape_err("concat_rows", first.shape(), v.shape()));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (rows, cols) = as_matrix("slice_cols", &va)?;
        if start + len > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of {cols}", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data()[r * cols + start..r * cols + start + len]);
        }
        let shape = if va.shape().len() == 1 {
            vec![len]
        } else {
            vec![rows, len]
        };
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceCols { a, start }, &[a]))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (rows, cols) = as_matrix("slice_rows", &va)?;
        if start + len > rows {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {rows}", start + len),
            });
        }
        let data = va.data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::new(vec![len, cols], data)?, Op::SliceRows { a, start }, &[a]))
    }

    /// Embedding-style row gather: output row `i` is `src[idx[i]]`.
    pub fn gather_rows(&self, src: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let vs = self.value(src);
        let (rows, cols) = as_matrix("gather_rows", &vs)?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&vs.data()[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], data)?,
            Op::GatherRows { src, idx: idx.to_vec() },
            &[src],
        ))
    }

    /// Picks `a[i, idx[i]]` from each row.
    pub fn pick(&self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let va = self.value(a);
        let (rows, cols) = as_matrix("pick", &va)?;
        if idx.len() != rows {
            return Err(shape_err("pick", va.shape(), &[idx.len()]));
        }
        let mut data = Vec::with_capacity(rows);
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(TensorError::Index {
                    op: "pick",
                    index: c,
                    len: cols,
                });
            }
            data.push(va.data()[r * cols + c]);
        }
        Ok(self.push(Tensor::new(vec![rows], data)?, Op::Pick { a, idx: idx.to_vec() }, &[a]))
    }

    /// Multi-frequency sinusoid features of every entry of `x` (`[n, d]`).
    /// Each input column expands to `sin(2^l pi x), cos(2^l pi x)` for
    /// `l = 0..octaves`, giving `[n, 2 * octaves * d]`.
    pub fn sinusoid(&self, x: Var, octaves: usize) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let (rows, cols) = as_matrix("sinusoid", &vx)?;
        let width = 2 * octaves;
        let mut data = Vec::with_capacity(rows * cols * width);
        for &p in vx.data() {
            push_sinusoid(p, octaves, &mut data);
        }
        Ok(self.push(
            Tensor::new(vec![rows, cols * width], data)?,
            Op::Sinusoid { x, octaves },
            &[x],
        ))
    }

    /// Multi-head scaled dot-product attention restricted to disjoint row
    /// segments: rows of one segment attend only to rows of the same segment.
    /// Rows outside every segment produce zeros.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var, TensorError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() || vq.shape().len() != 2 {
            return Err(shape_err("attention", vq.shape(), vk.shape()));
        }
        let (rows, dim) = (vq.shape()[0], vq.shape()[1]);
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("width {dim} not divisible into {heads} heads"),
            });
        }
        let mut covered = vec![false; rows];
        for &(start, len) in segments {
            if start + len > rows {
                return Err(TensorError::Invalid {
                    op: "attention",
                    msg: format!("segment {start}+{len} exceeds {rows} rows"),
                });
            }
            for c in &mut covered[start..start + len] {
                if *c {
                    return Err(TensorError::Invalid {
                        op: "attention",
                        msg: "segments overlap".into(),
                    });
                }
                *c = true;
            }
        }
        let dh = dim / heads;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut out = vec![S::zero(); rows * dim];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.1 * s.1).sum::<usize>() * heads);
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut scores = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qd[(start + i) * dim + off..(start + i) * dim + off + dh];
                    scores.clear();
                    for j in 0..len {
                        let kj = &kd[(start + j) * dim + off..(start + j) * dim + off + dh];
                        scores.push(dot(qi, kj) * scale);
                    }
                    softmax_in_place(&mut scores);
                    let oi = &mut out[(start + i) * dim + off..(start + i) * dim + off + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vd[(start + j) * dim + off..(start + j) * dim + off + dh];
                        for (o, &x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let out = Tensor::new(vec![rows, dim], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// 2-D convolution of `x` (`[B, Cin, H, W]`) with `w` (`[Cout, Cin, kh, kw]`)
    /// and bias `b` (`[Cout]`), zero padding `pad` on every side.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let geo = ConvGeometry::new(vx.shape(), vw.shape(), vb.shape(), stride, pad)?;
        let mut out = vec![S::zero(); geo.batch * geo.cout * geo.spatial_out()];
        let w2 = vw.as_ref().clone().reshape(&[geo.cout, geo.patch()])?;
        let mut cols = Tensor::zeros(&[geo.patch(), geo.spatial_out()]);
        for bi in 0..geo.batch {
            geo.im2col(
                &vx.data()[bi * geo.image_len()..(bi + 1) * geo.image_len()],
                cols.data_mut(),
            );
            let dst = &mut out[bi * geo.cout * geo.spatial_out()..(bi + 1) * geo.cout * geo.spatial_out()];
            for (co, chunk) in dst.chunks_mut(geo.spatial_out()).enumerate() {
                chunk.fill(vb.data()[co]);
            }
            gemm_into(&w2, false, &cols, false, dst, S::one());
        }
        let out = Tensor::new(vec![geo.batch, geo.cout, geo.hout, geo.wout], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b]))
    }

    /// Global average over the two trailing spatial dims: `[B, C, H, W] -> [B, C]`.
    pub fn mean_spatial(&self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        if vx.shape().len() != 4 {
            return Err(TensorError::Invalid {
                op: "mean_spatial",
                msg: format!("expected rank 4, got {:?}", vx.shape()),
            });
        }
        let (b, c) = (vx.shape()[0], vx.shape()[1]);
        let hw = vx.shape()[2] * vx.shape()[3];
        let inv = S::one() / S::of(hw as f64);
        let data = vx
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<S>() * inv)
            .collect();
        Ok(self.push(Tensor::new(vec![b, c], data)?, Op::MeanSpatial(x), &[x]))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).as_ref().clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&self, inputs: &[Var], value: Tensor<S>, rule: Box<dyn CustomBackward<S>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, TensorError> {
        let nodes = self.nodes.borrow();
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(shapes[loss.0].clone()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shapes[loss.0], S::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<S: Real>(nodes: &[Node<S>], grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<S: Real>(
    nodes: &[Node<S>],
    id: usize,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) -> Result<(), TensorError> {
    let node = &nodes[id];
    let out = node.value.as_ref();
    let val = |v: Var| nodes[v.0].value.as_ref();
    let wants = |v: Var| nodes[v.0].requires_grad;
    let zip = |a: &Tensor<S>, f: &dyn Fn(S, S) -> S| -> Tensor<S> {
        let data = a.data().iter().zip(g.data()).map(|(&x, &d)| f(x, d)).collect();
        Tensor::new(a.shape().to_vec(), data).expect("same shape")
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let g2 = g.clone();
            if wants(*a) {
                // C = A B  => dA = dC B^T ; C = A B^T => dA = dC B
                let da = g2.matmul(val(*b), false, !trans_b)?;
                accumulate(nodes, grads, *a, da);
            }
            if wants(*b) {
                let db = if *trans_b {
                    g2.matmul(val(*a), true, false)?
                } else {
                    val(*a).matmul(&g2, true, false)?
                };
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                accumulate(nodes, grads, *a, zip(val(*b), &|y, d| y * d));
            }
            if wants(*b) {
                accumulate(nodes, grads, *b, zip(val(*a), &|x, d| x * d));
            }
        }
        Op::AddRow(a, row) => {
            accumulate(nodes, grads, *a, g.clone());
            if wants(*row) {
                let cols = val(*row).len();
                let mut dr = vec![S::zero(); cols];
                for (i, &d) in g.data().iter().enumerate() {
                    dr[i % cols] += d;
                }
                accumulate(nodes, grads, *row, Tensor::from_vec(dr));
            }
        }
        Op::MulRow(a, row) => {
            let r = val(*row);
            let cols = r.len();
            if wants(*a) {
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| d * r.data()[i % cols])
                    .collect();
                accumulate(nodes, grads, *a, Tensor::new(g.shape().to_vec(), data)?);
            }
            if wants(*row) {
                let mut dr = vec![S::zero(); cols];
                for (i, (&d, &x)) in g.data().iter().zip(val(*a).data()).enumerate() {
                    dr[i % cols] += d * x;
                }
                accumulate(nodes, grads, *row, Tensor::from_vec(dr));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.map(|d| d * *s)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Relu(a) => {
            let d = zip(val(*a), &|x, d| if x > S::zero() { d } else { S::zero() });
            accumulate(nodes, grads, *a, d);
        }
        Op::Sigmoid(a) => {
            let d = zip(out, &|y, d| d * y * (S::one() - y));
            accumulate(nodes, grads, *a, d);
        }
        Op::Tanh(a) => {
            let d = zip(out, &|y, d| d * (S::one() - y * y));
            accumulate(nodes, grads, *a, d);
        }
        Op::Softplus(a) => {
            let d = zip(val(*a), &|x, d| d * sigmoid(x));
            accumulate(nodes, grads, *a, d);
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, zip(out, &|y, d| d * y)),
        Op::Ln(a) => accumulate(nodes, grads, *a, zip(val(*a), &|x, d| d / x)),
        Op::SoftmaxRows(a) => {
            let (rows, cols) = out.rows_cols();
            let mut dx = vec![S::zero(); rows * cols];
            for r in 0..rows {
                let y = &out.data()[r * cols..(r + 1) * cols];
                let dy = &g.data()[r * cols..(r + 1) * cols];
                let s = dot(y, dy);
                for c in 0..cols {
                    dx[r * cols + c] = y[c] * (dy[c] - s);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::LogSoftmaxRows(a) => {
            let (rows, cols) = out.rows_cols();
            let mut dx = vec![S::zero(); rows * cols];
            for r in 0..rows {
                let y = &out.data()[r * cols..(r + 1) * cols];
                let dy = &g.data()[r * cols..(r + 1) * cols];
                let s: S = dy.iter().copied().sum();
                for c in 0..cols {
                    dx[r * cols + c] = dy[c] - y[c].exp() * s;
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::LogSumExpRows(a) => {
            let x = val(*a);
            let (rows, cols) = x.rows_cols();
            let mut dx = vec![S::zero(); rows * cols];
            for r in 0..rows {
                let lse = out.data()[r];
                for c in 0..cols {
                    dx[r * cols + c] = g.data()[r] * (x.data()[r * cols + c] - lse).exp();
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), dx)?);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = val(*gamma).data();
            let (rows, cols) = out.rows_cols();
            let n = S::of(cols as f64);
            if wants(*gamma) || wants(*beta) {
                let mut dg = vec![S::zero(); cols];
                let mut db = vec![S::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let d = g.data()[r * cols + c];
                        dg[c] += d * xhat[r * cols + c];
                        db[c] += d;
                    }
                }
                accumulate(nodes, grads, *gamma, Tensor::from_vec(dg));
                accumulate(nodes, grads, *beta, Tensor::from_vec(db));
            }
            if wants(*x) {
                let mut dx = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for c in 0..cols {
                        let dh = g.data()[r * cols + c] * gam[c];
                        mean_d += dh;
                        mean_dx += dh * xhat[r * cols + c];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    for c in 0..cols {
                        let dh = g.data()[r * cols + c] * gam[c];
                        dx[r * cols + c] = rstd[r] * (dh - mean_d - xhat[r * cols + c] * mean_dx);
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
        }
        Op::Sum(a) => {
            let d = g.data()[0];
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), d));
        }
        Op::Mean(a) => {
            let x = val(*a);
            let d = g.data()[0] / S::of(x.len().max(1) as f64);
            accumulate(nodes, grads, *a, Tensor::full(x.shape(), d));
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = out.rows_cols();
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let (_, w) = pv.rows_cols();
                if wants(p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let n = pv.len();
                if wants(p) {
                    let d = g.data()[offset..offset + n].to_vec();
                    accumulate(nodes, grads, p, Tensor::new(pv.shape().to_vec(), d)?);
                }
                offset += n;
            }
        }
        Op::SliceCols { a, start } => {
            let x = val(*a);
            let (rows, cols) = x.rows_cols();
            let (_, len) = out.rows_cols();
            let mut d = vec![S::zero(); rows * cols];
            for r in 0..rows {
                d[r * cols + start..r * cols + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), d)?);
        }
        Op::SliceRows { a, start } => {
            let x = val(*a);
            let (_, cols) = x.rows_cols();
            let mut d = vec![S::zero(); x.len()];
            d[start * cols..start * cols + g.len()].copy_from_slice(g.data());
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), d)?);
        }
        Op::GatherRows { src, idx } => {
            let x = val(*src);
            let (_, cols) = x.rows_cols();
            let mut d = vec![S::zero(); x.len()];
            for (i, &r) in idx.iter().enumerate() {
                for c in 0..cols {
                    d[r * cols + c] += g.data()[i * cols + c];
                }
            }
            accumulate(nodes, grads, *src, Tensor::new(x.shape().to_vec(), d)?);
        }
        Op::Pick { a, idx } => {
            let x = val(*a);
            let (_, cols) = x.rows_cols();
            let mut d = vec![S::zero(); x.len()];
            for (r, &c) in idx.iter().enumerate() {
                d[r * cols + c] = g.data()[r];
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape().to_vec(), d)?);
        }
        Op::Sinusoid { x, octaves } => {
            let xv = val(*x);
            let width = 2 * octaves;
            let pi = S::of(std::f64::consts::PI);
            let mut d = vec![S::zero(); xv.len()];
            for (i, di) in d.iter_mut().enumerate() {
                let base = i * width;
                let mut freq = pi;
                for l in 0..*octaves {
                    let s = out.data()[base + 2 * l];
                    let c = out.data()[base + 2 * l + 1];
                    *di += freq * (c * g.data()[base + 2 * l] - s * g.data()[base + 2 * l + 1]);
                    freq = freq + freq;
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        } => {
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let (rows, dim) = (out.shape()[0], out.shape()[1]);
            let dh = dim / heads;
            let scale = S::one() / S::of(dh as f64).sqrt();
            let mut dq = vec![S::zero(); rows * dim];
            let mut dk = vec![S::zero(); rows * dim];
            let mut dv = vec![S::zero(); rows * dim];
            let gd = g.data();
            let mut pi = 0;
            let mut dp = Vec::new();
            for &(start, len) in segments {
                for h in 0..*heads {
                    let off = h * dh;
                    let span = |r: usize| (start + r) * dim + off..(start + r) * dim + off + dh;
                    for i in 0..len {
                        let p = &probs[pi..pi + len];
                        pi += len;
                        let go = &gd[span(i)];
                        // dP_ij = dO_i . V_j ; dV_j += P_ij dO_i
                        dp.clear();
                        for j in 0..len {
                            dp.push(dot(go, &vd[span(j)]));
                            let pij = p[j];
                            for (x, &y) in dv[span(j)].iter_mut().zip(go) {
                                *x += pij * y;
                            }
                        }
                        let s = dot(p, &dp);
                        for j in 0..len {
                            let ds = p[j] * (dp[j] - s) * scale;
                            let kj = span(j);
                            let qi = span(i);
                            for t in 0..dh {
                                dq[qi.start + t] += ds * kd[kj.start + t];
                                dk[kj.start + t] += ds * qd[qi.start + t];
                            }
                        }
                    }
                }
            }
            let shape = out.shape().to_vec();
            accumulate(nodes, grads, *q, Tensor::new(shape.clone(), dq)?);
            accumulate(nodes, grads, *k, Tensor::new(shape.clone(), dk)?);
            accumulate(nodes, grads, *v, Tensor::new(shape, dv)?);
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (vx, vw, vb) = (val(*x), val(*w), val(*b));
            let geo = ConvGeometry::new(vx.shape(), vw.shape(), vb.shape(), *stride, *pad)?;
            let so = geo.spatial_out();
            let w2 = vw.clone().reshape(&[geo.cout, geo.patch()])?;
            let mut dw = Tensor::zeros(&[geo.cout, geo.patch()]);
            let mut db = vec![S::zero(); geo.cout];
            let mut dx = vec![S::zero(); vx.len()];
            let mut cols = Tensor::zeros(&[geo.patch(), so]);
            for bi in 0..geo.batch {
                let gslice = &g.data()[bi * geo.cout * so..(bi + 1) * geo.cout * so];
                let gb = Tensor::new(vec![geo.cout, so], gslice.to_vec())?;
                for (co, ch) in gslice.chunks(so).enumerate() {
                    db[co] += ch.iter().copied().sum::<S>();
                }
                if wants(*w) {
                    geo.im2col(
                        &vx.data()[bi * geo.image_len()..(bi + 1) * geo.image_len()],
                        cols.data_mut(),
                    );
                    gemm_into(&gb, false, &cols, true, dw.data_mut(), S::one());
                }
                if wants(*x) {
                    let dcols = w2.matmul(&gb, true, false)?;
                    geo.col2im(dcols.data(), &mut dx[bi * geo.image_len()..(bi + 1) * geo.image_len()]);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
            accumulate(nodes, grads, *w, dw.reshape(vw.shape())?);
            accumulate(nodes, grads, *b, Tensor::from_vec(db));
        }
        Op::MeanSpatial(x) => {
            let xv = val(*x);
            let hw = xv.shape()[2] * xv.shape()[3];
            let inv = S::one() / S::of(hw as f64);
            let mut d = Vec::with_capacity(xv.len());
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv * inv, hw));
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
        }
        Op::Reshape(a) => {
            let d = g.clone().reshape(val(*a).shape())?;
            accumulate(nodes, grads, *a, d);
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor<S>> = inputs.iter().map(|&i| val(i)).collect();
            let gs = rule.backward(g, &ins, out);
            for (&i, gi) in inputs.iter().zip(gs) {
                if let Some(gi) = gi {
                    accumulate(nodes, grads, i, gi);
                }
            }
        }
    }
    Ok(())
}

struct ConvGeometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], b: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] || b != [w[0]] || stride == 0 {
            return Err(shape_err("conv2d", x, w));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", x, w));
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            h,
            w: wd,
            cout: w[0],
            kh,
            kw,
            stride,
            pad,
            hout: (h + 2 * pad - kh) / stride + 1,
            wout: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.hout * self.wout
    }

    fn image_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col<S: Real>(&self, img: &[S], cols: &mut [S]) {
        let so = self.spatial_out();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.hout {
                        for ox in 0..self.wout {
                            cols[row * so + oy * self.wout + ox] = match self.source(oy, ky, ox, kx) {
                                Some((y, x)) => img[(c * self.h + y) * self.w + x],
                                None => S::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Real>(&self, cols: &[S], img: &mut [S]) {
        let so = self.spatial_out();
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.hout {
                        for ox in 0..self.wout {
                            if let Some((y, x)) = self.source(oy, ky, ox, kx) {
                                img[(c * self.h + y) * self.w + x] += cols[row * so + oy * self.wout + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn softplus<S: Real>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn logsumexp<S: Real>(xs: &[S]) -> S {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<S>().ln()
}

pub fn softmax_in_place<S: Real>(xs: &mut [S]) {
    let m = xs.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// Appends `sin(2^l pi p), cos(2^l pi p)` for `l = 0..octaves`.
pub fn push_sinusoid<S: Real>(p: S, octaves: usize, out: &mut Vec<S>) {
    let mut freq = S::of(std::f64::consts::PI);
    for _ in 0..octaves {
        let a = freq * p;
        out.push(a.sin());
        out.push(a.cos());
        freq = freq + freq;
    }
}
