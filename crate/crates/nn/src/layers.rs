//! Parameterized building blocks shared by the SRE and the synthesizer.
//!
//! Layers hold only [`ParamId`] handles; values live in a [`ParamStore`] so
//! the same layer can run in `f32` for training and in `f64` for gradient
//! checks.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Registers parameters under a name prefix and a learning-rate group.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
    group: usize,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: &'a mut R, group: usize) -> Self {
        Self {
            store,
            rng,
            group,
            prefix: String::new(),
        }
    }

    pub fn set_group(&mut self, group: usize) {
        self.group = group;
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<O>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> O) -> O {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Truncated normal with std `1/sqrt(rows)`; weight rows are the fan-in.
    pub fn normal(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = trunc_normal(rows, cols, 1.0 / (rows.max(1) as f64).sqrt(), self.rng);
        let n = self.full_name(name);
        self.store.add(n, self.group, t)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, self.group, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, self.group, Tensor::full(rows, cols, 1.0))
    }
}

/// `y = x·W + b`, `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        b.scope(name, |b| Self {
            weight: b.normal("weight", in_dim, out_dim),
            bias: Some(b.zeros("bias", 1, out_dim)),
            in_dim,
            out_dim,
        })
    }

    pub fn without_bias<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            weight: b.normal("weight", in_dim, out_dim),
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        let y = g.matmul(x, p.node(self.weight));
        match self.bias {
            Some(b) => g.add_row(y, p.node(b)),
            None => y,
        }
    }
}

/// Temporal convolution over `T × C_in` sequences.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        b.scope(name, |b| Self {
            weight: b.normal("weight", kernel * in_dim, out_dim),
            bias: b.zeros("bias", 1, out_dim),
            kernel,
            stride,
            pad,
        })
    }

    /// Stride-1 convolution whose output length equals its input length (odd kernels).
    pub fn same<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
    ) -> Self {
        Self::new(b, name, in_dim, out_dim, kernel, 1, kernel / 2)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        g.conv1d(
            x,
            p.node(self.weight),
            p.node(self.bias),
            self.kernel,
            self.stride,
            self.pad,
        )
    }
}

/// Per-channel convolution, output length equal to input length.
#[derive(Clone, Debug)]
pub struct DepthwiseConv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl DepthwiseConv1d {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        b.scope(name, |b| Self {
            weight: b.normal("weight", kernel, dim),
            bias: b.zeros("bias", 1, dim),
            kernel,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        g.depthwise_conv1d(x, p.node(self.weight), p.node(self.bias), self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.ones("gamma", 1, dim),
            beta: b.zeros("beta", 1, dim),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        g.layer_norm(x, p.node(self.gamma), p.node(self.beta), LN_EPS)
    }
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && dim % heads == 0,
            "width must split evenly into heads"
        );
        b.scope(name, |b| Self {
            query: Linear::new(b, "query", dim, dim),
            key: Linear::new(b, "key", dim, dim),
            value: Linear::new(b, "value", dim, dim),
            out: Linear::new(b, "out", dim, dim),
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        let q = self.query.forward(g, p, x);
        let k = self.key.forward(g, p, x);
        let v = self.value.forward(g, p, x);
        let head_dim = self.dim / self.heads;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_t(qh, false, kh, true);
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.out.forward(g, p, cat)
    }
}

/// Fixed sinusoidal position table, `len × dim`.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = (10000f64).powf(-2.0 * i as f64 / dim as f64);
            let a = pos as f64 * freq;
            t.set(pos, 2 * i, T::of(a.sin()));
            t.set(pos, 2 * i + 1, T::of(a.cos()));
        }
    }
    t
}
