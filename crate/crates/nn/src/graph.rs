//! Tape-style reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into every node that transitively depends on a parameter leaf.

use crate::real::Real;
use crate::tensor::{gemm_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// Receives the gradient flowing into the node's output and the forward values
/// of its inputs; returns one optional gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>]) -> Vec<Option<Tensor<T>>>>;

enum Op<T: Real> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    Square(NodeId),
    Glu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceRows {
        a: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Tensor<T>,
    },
    DepthwiseConv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    },
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    RepeatRows {
        a: NodeId,
        counts: Vec<usize>,
    },
    BroadcastRows(NodeId),
    RowNormalize {
        a: NodeId,
        norms: Vec<T>,
    },
    RowDot(NodeId, NodeId),
    Custom {
        inputs: Vec<NodeId>,
        backward: CustomBackward<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph is built per forward pass and dropped
/// after its gradients are read.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `id`; zeros if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let v = Tensor::matmul(self.value(a), ta, self.value(b), tb);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul { a, b, ta, tb }, rg)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.rows(), 1, "add_row expects a row vector");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows() {
            for (x, &b) in v.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Square(a), rg)
    }

    /// Gated linear unit over column halves: `left * sigmoid(right)`.
    pub fn glu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.cols() % 2 == 0, "glu needs an even width");
        let half = va.cols() / 2;
        let mut v = Tensor::zeros(va.rows(), half);
        for r in 0..va.rows() {
            let src = va.row(r);
            for (c, out) in v.row_mut(r).iter_mut().enumerate() {
                *out = src[c] * sigmoid(src[c + half]);
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Glu(a), rg)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (both `1 × C`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), cols, "layer_norm gamma width");
        let n = T::of(cols as f64);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xhat.get(r, c) * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmax(a), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols out of range");
        let mut v = Tensor::zeros(va.rows(), len);
        for r in 0..va.rows() {
            v.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let c = va.cols();
        let v = Tensor::from_vec(len, c, va.data()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    /// Temporal convolution of `x` (`T × C_in`) with `w` (`(K·C_in) × C_out`)
    /// and bias `b` (`1 × C_out`), zero padding `pad` on both ends.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vx = self.value(x);
        let (t_in, c_in) = vx.shape();
        let vw = self.value(w);
        assert_eq!(vw.rows(), kernel * c_in, "conv1d weight rows");
        let padded = t_in + 2 * pad;
        assert!(padded >= kernel, "conv1d input shorter than kernel");
        let t_out = (padded - kernel) / stride + 1;
        let mut cols = Tensor::zeros(t_out, kernel * c_in);
        for t in 0..t_out {
            let dst = cols.row_mut(t);
            for k in 0..kernel {
                let src = (t * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < t_in {
                    dst[k * c_in..(k + 1) * c_in].copy_from_slice(vx.row(src as usize));
                }
            }
        }
        let mut out = Tensor::zeros(t_out, vw.cols());
        let vb = self.value(b);
        for r in 0..t_out {
            out.row_mut(r).copy_from_slice(vb.data());
        }
        gemm_into(&cols, false, vw, false, T::one(), T::one(), &mut out);
        let rg = self.rg(&[x, w, b]);
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Per-channel temporal convolution, stride 1: `w` is `K × C`.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let (t_in, c) = vx.shape();
        let kernel = vw.rows();
        assert_eq!(vw.cols(), c, "depthwise weight width");
        let t_out = t_in + 2 * pad + 1 - kernel;
        let mut out = Tensor::zeros(t_out, c);
        for t in 0..t_out {
            let o = out.row_mut(t);
            o.copy_from_slice(vb.data());
            for k in 0..kernel {
                let src = (t + k) as isize - pad as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                let xr = vx.row(src as usize);
                let wr = vw.row(k);
                for ch in 0..c {
                    o[ch] += xr[ch] * wr[ch];
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::DepthwiseConv1d { x, w, b, pad }, rg)
    }

    /// Column means, `T × C → 1 × C`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut v = Tensor::zeros(1, cols);
        for r in 0..rows {
            for (o, &x) in v.data_mut().iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        let inv = T::one() / T::of(rows.max(1) as f64);
        let v = v.map(|x| x * inv);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).mean();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Row `i` repeated `counts[i]` times, rows concatenated in order.
    pub fn repeat_rows(&mut self, a: NodeId, counts: &[usize]) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows(), counts.len(), "repeat_rows count length");
        let total: usize = counts.iter().sum();
        let mut data = Vec::with_capacity(total * va.cols());
        for (r, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                data.extend_from_slice(va.row(r));
            }
        }
        let v = Tensor::from_vec(total, va.cols(), data);
        let rg = self.rg(&[a]);
        self.push(
            v,
            Op::RepeatRows {
                a,
                counts: counts.to_vec(),
            },
            rg,
        )
    }

    /// `1 × C → n × C`.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(n * va.cols());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let v = Tensor::from_vec(n, va.cols(), data);
        let rg = self.rg(&[a]);
        self.push(v, Op::BroadcastRows(a), rg)
    }

    /// Scales every row to unit L2 norm. Zero rows stay zero and pass no gradient.
    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(n);
            if n > T::zero() {
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::RowNormalize { a, norms }, rg)
    }

    /// Per-row dot products, `T × C, T × C → T × 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
        let data = (0..va.rows())
            .map(|r| va.row(r).iter().zip(vb.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        let v = Tensor::from_vec(va.rows(), 1, data);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::RowDot(a, b), rg)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> NodeId {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Mean squared error between two equally shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Reverse pass from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar node");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if needs(a) {
                    // C = A·B  ⇒ dA = dC·Bᵀ; transposed variants follow.
                    let ga = if ta {
                        Tensor::matmul(val(b), tb, g, true)
                    } else {
                        Tensor::matmul(g, false, val(b), !tb)
                    };
                    self.accumulate(grads, a, ga);
                }
                if needs(b) {
                    let gb = if tb {
                        Tensor::matmul(g, true, val(a), ta)
                    } else {
                        Tensor::matmul(val(a), !ta, g, false)
                    };
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, a, hadamard(g, val(b)));
                }
                if needs(b) {
                    self.accumulate(grads, b, hadamard(g, val(a)));
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if needs(row) {
                    self.accumulate(grads, row, col_sums(g));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|x| x * s)),
            &Op::Relu(a) => {
                let x = val(a);
                let d = zip_map(g, x, |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, a, d);
            }
            &Op::Silu(a) => {
                let x = val(a);
                let d = zip_map(g, x, |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                });
                self.accumulate(grads, a, d);
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                let d = zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv));
                self.accumulate(grads, a, d);
            }
            &Op::Square(a) => {
                let x = val(a);
                let two = T::of(2.0);
                self.accumulate(grads, a, zip_map(g, x, |gv, xv| gv * two * xv));
            }
            &Op::Glu(a) => {
                let x = val(a);
                let half = x.cols() / 2;
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let dr = d.row_mut(r);
                    for c in 0..half {
                        let s = sigmoid(xr[c + half]);
                        dr[c] = gr[c] * s;
                        dr[c + half] = gr[c] * xr[c] * s * (T::one() - s);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = xhat.shape();
                let gm = val(*gamma).data();
                if needs(*gamma) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if needs(*beta) {
                    self.accumulate(grads, *beta, col_sums(g));
                }
                if needs(*x) {
                    let n = T::of(cols as f64);
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..cols {
                            let dxh = gr[c] * gm[c];
                            m1 += dxh;
                            m2 += dxh * xh[c];
                        }
                        m1 /= n;
                        m2 /= n;
                        let dr = dx.row_mut(r);
                        for c in 0..cols {
                            dr[c] = rstd[r] * (gr[c] * gm[c] - m1 - xh[c] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let s: T = gr.iter().copied().sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = gr[c] - yr[c].exp() * s;
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::SliceCols { a, start } => {
                let x = val(a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    d.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    off += w;
                }
            }
            &Op::SliceRows { a, start } => {
                let x = val(a);
                let c = x.cols();
                let mut d = Tensor::zeros(x.rows(), c);
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, a, d);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if needs(p) {
                        let d =
                            Tensor::from_vec(rows, c, g.data()[off * c..(off + rows) * c].to_vec());
                        self.accumulate(grads, p, d);
                    }
                    off += rows;
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                stride,
                pad,
                cols,
            } => {
                if needs(*w) {
                    self.accumulate(grads, *w, Tensor::matmul(cols, true, g, false));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, col_sums(g));
                }
                if needs(*x) {
                    let dcols = Tensor::matmul(g, false, val(*w), true);
                    let vx = val(*x);
                    let (t_in, c_in) = vx.shape();
                    let mut dx = Tensor::zeros(t_in, c_in);
                    for t in 0..dcols.rows() {
                        let src = dcols.row(t);
                        for k in 0..*kernel {
                            let pos = (t * stride + k) as isize - *pad as isize;
                            if pos < 0 || pos as usize >= t_in {
                                continue;
                            }
                            let dr = dx.row_mut(pos as usize);
                            for (o, &v) in dr.iter_mut().zip(&src[k * c_in..(k + 1) * c_in]) {
                                *o += v;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::DepthwiseConv1d { x, w, b, pad } => {
                let vx = val(x);
                let vw = val(w);
                let (t_in, c) = vx.shape();
                let kernel = vw.rows();
                let mut dx = Tensor::zeros(t_in, c);
                let mut dw = Tensor::zeros(kernel, c);
                for t in 0..g.rows() {
                    let gr = g.row(t);
                    for k in 0..kernel {
                        let src = (t + k) as isize - pad as isize;
                        if src < 0 || src as usize >= t_in {
                            continue;
                        }
                        let s = src as usize;
                        for ch in 0..c {
                            dw.data_mut()[k * c + ch] += gr[ch] * vx.get(s, ch);
                            dx.data_mut()[s * c + ch] += gr[ch] * vw.get(k, ch);
                        }
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, w, dw);
                if needs(b) {
                    self.accumulate(grads, b, col_sums(g));
                }
            }
            &Op::MeanRows(a) => {
                let x = val(a);
                let inv = T::one() / T::of(x.rows().max(1) as f64);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for (o, &v) in d.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                self.accumulate(grads, a, d);
            }
            &Op::SumAll(a) => {
                let x = val(a);
                self.accumulate(grads, a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
            &Op::MeanAll(a) => {
                let x = val(a);
                let v = g.item() / T::of(x.len().max(1) as f64);
                self.accumulate(grads, a, Tensor::full(x.rows(), x.cols(), v));
            }
            Op::RepeatRows { a, counts } => {
                let x = val(*a);
                let mut d = Tensor::zeros(x.rows(), x.cols());
                let mut src = 0;
                for (r, &n) in counts.iter().enumerate() {
                    for _ in 0..n {
                        for (o, &v) in d.row_mut(r).iter_mut().zip(g.row(src)) {
                            *o += v;
                        }
                        src += 1;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            &Op::BroadcastRows(a) => self.accumulate(grads, a, col_sums(g)),
            Op::RowNormalize { a, norms } => {
                let y = &node.value;
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    if norms[r] <= T::zero() {
                        continue;
                    }
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *a, d);
            }
            &Op::RowDot(a, b) => {
                let (va, vb) = (val(a), val(b));
                if needs(a) {
                    self.accumulate(grads, a, scale_rows(vb, g));
                }
                if needs(b) {
                    self.accumulate(grads, b, scale_rows(va, g));
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&id| val(id)).collect();
                let out = backward(g, &vals);
                for (&id, d) in inputs.iter().zip(out) {
                    if let Some(d) = d {
                        assert_eq!(d.shape(), val(id).shape(), "custom op gradient shape");
                        self.accumulate(grads, id, d);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut v = x.clone();
    for r in 0..v.rows() {
        let row = v.row_mut(r);
        let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
        let mut s = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    v
}

fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn col_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut d = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in d.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    d
}

/// Row `r` of `x` scaled by `s[r, 0]`.
fn scale_rows<T: Real>(x: &Tensor<T>, s: &Tensor<T>) -> Tensor<T> {
    let mut d = x.clone();
    for r in 0..d.rows() {
        let k = s.get(r, 0);
        for v in d.row_mut(r) {
            *v *= k;
        }
    }
    d
}
