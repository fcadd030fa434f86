//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward evaluation and
//! records how each was computed. [`Tensor`] is a cheap handle into that
//! graph. Trainable weights live outside any graph as [`Param`]s and are
//! bound into a graph with [`Graph::param`]; the underlying buffer is
//! shared, not copied, so binding is O(1).
//!
//! ```
//! use msrt_core::tensor::Graph;
//!
//! let mut g = Graph::new();
//! let x = g.variable(&[1], vec![3.0]).unwrap();
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```
//!
//! A graph is confined to one thread. Independent graphs (for example one
//! per record of a batch) may be evaluated concurrently against the same
//! frozen parameters.

mod gemm;
mod kernels;

const ATTN_ROW_BLOCK: usize = 64;

use std::collections::HashMap;
use std::ops::Deref;
use std::sync::Arc;

use crate::error::{Error, Result};
use gemm::{gemm, gemm_into, MatMut, MatRef};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor {
    id: usize,
}

impl Tensor {
    pub fn node_id(self) -> usize {
        self.id
    }
}

/// A trainable array that outlives individual graphs.
#[derive(Debug, Clone)]
pub struct Param {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Param {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_len("param", shape, data.len())?;
        Ok(Param {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel(shape)]),
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Param {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel(shape)]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the buffer if a live graph still shares it.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.data) as usize
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if numel(shape) != len {
        return Err(Error::dim(
            op,
            format!("shape {shape:?} needs {} values, got {len}", numel(shape)),
        ));
    }
    Ok(())
}

#[derive(Debug)]
enum Storage {
    Owned(Vec<f64>),
    Shared(Arc<Vec<f64>>),
}

impl Deref for Storage {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        match self {
            Storage::Owned(v) => v,
            Storage::Shared(v) => v,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        /// `b` is stored `[C,K]` and used transposed.
        b_transposed: bool,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        /// im2col buffer `[Cin*K, Lout]`; empty when no gradient is needed.
        cols: Vec<f64>,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    AddRowBias {
        x: usize,
        bias: usize,
    },
    Sum(usize),
    Mean(usize),
    Softmax {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample {
        x: usize,
    },
    MultiHeadAttention {
        q: usize,
        k: usize,
        v: usize,
        n_heads: usize,
        /// Softmax weights, `n_heads` blocks of `[T,T]`.
        probs: Vec<f64>,
    },
    Transpose(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    MeanRows(usize),
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Storage,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation plus, after [`Graph::backward`], gradients.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<usize, Tensor>,
    consumed: bool,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph where nothing requires a gradient; ops skip saving context.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.id].shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.id].requires_grad
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }

    /// Gradient of a bound parameter, if it received one.
    pub fn param_grad(&self, p: &Param) -> Option<&[f64]> {
        self.bound.get(&p.key()).and_then(|&t| self.grad(t))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len("constant", shape, data.len())?;
        self.push(shape.to_vec(), Storage::Owned(data), false, Op::Leaf)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn variable(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_len("variable", shape, data.len())?;
        let rg = !self.no_grad;
        self.push(shape.to_vec(), Storage::Owned(data), rg, Op::Leaf)
    }

    /// Binds a parameter as a leaf. Binding the same parameter twice
    /// returns the same handle, so fan-out gradients accumulate in one place.
    pub fn param(&mut self, p: &Param) -> Result<Tensor> {
        if let Some(&t) = self.bound.get(&p.key()) {
            return Ok(t);
        }
        let rg = !self.no_grad;
        let t = self.push(
            p.shape.clone(),
            Storage::Shared(Arc::clone(&p.data)),
            rg,
            Op::Leaf,
        )?;
        self.bound.insert(p.key(), t);
        Ok(t)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Storage,
        requires_grad: bool,
        op: Op,
    ) -> Result<Tensor> {
        if self.consumed {
            return Err(Error::State(
                "graph was consumed by backward; build a new graph".into(),
            ));
        }
        debug_assert_eq!(numel(&shape), value.len());
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: requires_grad && !self.no_grad,
            op,
        });
        Ok(Tensor { id })
    }

    fn rg(&self, ids: &[Tensor]) -> bool {
        !self.no_grad && ids.iter().any(|t| self.nodes[t.id].requires_grad)
    }

    fn dims2(&self, op: &'static str, t: Tensor) -> Result<(usize, usize)> {
        match self.shape(t) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dim(op, format!("expected a 2-D tensor, got {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- forward ops -------------------------------------------------

    /// `a[R,K] · b[K,C]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (r, k) = self.dims2("matmul", a)?;
        let (k2, c) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; r * c];
        gemm(
            MatRef::new(self.value(a), r, k),
            MatRef::new(self.value(b), k, c),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            vec![r, c],
            Storage::Owned(out),
            rg,
            Op::MatMul {
                a: a.id,
                b: b.id,
                b_transposed: false,
            },
        )
    }

    /// `a[R,K] · b[C,K]ᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (r, k) = self.dims2("matmul_nt", a)?;
        let (c, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; r * c];
        gemm(
            MatRef::new(self.value(a), r, k),
            MatRef::new(self.value(b), c, k).t(),
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            vec![r, c],
            Storage::Owned(out),
            rg,
            Op::MatMul {
                a: a.id,
                b: b.id,
                b_transposed: true,
            },
        )
    }

    /// 1-D convolution (cross-correlation) with zero padding.
    ///
    /// `x[Cin,L]`, `w[Cout,Cin,K]`, `b[Cout]` → `[Cout, (L+2·pad−K)/stride + 1]`.
    pub fn conv1d(
        &mut self,
        x: Tensor,
        w: Tensor,
        b: Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (cin, len) = self.dims2("conv1d", x)?;
        let (cout, wcin, k) = match self.shape(w) {
            &[o, i, k] => (o, i, k),
            s => {
                return Err(Error::dim(
                    "conv1d",
                    format!("weight must be [Cout,Cin,K], got {s:?}"),
                ))
            }
        };
        if wcin != cin {
            return Err(Error::dim(
                "conv1d",
                format!(
                    "input {:?} has {cin} channels, weight {:?} expects {wcin}",
                    self.shape(x),
                    self.shape(w)
                ),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(
                "conv1d",
                format!("bias {:?} does not match {cout} output channels", self.shape(b)),
            ));
        }
        if stride == 0 {
            return Err(Error::Contract("conv1d stride must be positive".into()));
        }
        if k == 0 || k > len + 2 * pad {
            return Err(Error::dim(
                "conv1d",
                format!("kernel {k} longer than padded input {}", len + 2 * pad),
            ));
        }
        let lout = (len + 2 * pad - k) / stride + 1;
        let ck = cin * k;
        let mut cols = vec![0.0; ck * lout];
        {
            let xv = self.value(x);
            for ci in 0..cin {
                let xrow = &xv[ci * len..(ci + 1) * len];
                for kk in 0..k {
                    let crow = &mut cols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
                    for (j, c) in crow.iter_mut().enumerate() {
                        let pos = j * stride + kk;
                        if pos >= pad && pos - pad < len {
                            *c = xrow[pos - pad];
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; cout * lout];
        for (o, row) in out.chunks_exact_mut(lout).enumerate() {
            row.fill(self.value(b)[o]);
        }
        gemm(
            MatRef::new(self.value(w), cout, ck),
            MatRef::new(&cols, ck, lout),
            &mut out,
            1.0,
        );
        let rg = self.rg(&[x, w, b]);
        if !rg {
            cols = Vec::new();
        }
        self.push(
            vec![cout, lout],
            Storage::Owned(out),
            rg,
            Op::Conv1d {
                x: x.id,
                w: w.id,
                b: b.id,
                stride,
                pad,
                cols,
            },
        )
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Storage::Owned(out), rg, Op::Add(a.id, b.id))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Storage::Owned(out), rg, Op::Mul(a.id, b.id))
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Storage::Owned(out), rg, Op::Scale(a.id, s))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, Storage::Owned(out), rg, Op::Relu(a.id))
    }

    /// `x[T,D] + bias[D]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let (t, d) = self.dims2("add_row_bias", x)?;
        if self.shape(bias) != [d] {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias {:?} vs rows of width {d}", self.shape(bias)),
            ));
        }
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(&[x, bias]);
        self.push(
            vec![t, d],
            Storage::Owned(out),
            rg,
            Op::AddRowBias {
                x: x.id,
                bias: bias.id,
            },
        )
    }

    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let s: f64 = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], Storage::Owned(vec![s]), rg, Op::Sum(a.id))
    }

    /// Mean of all elements as a scalar (shape `[]`).
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s: f64 = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[a]);
        self.push(vec![], Storage::Owned(vec![s]), rg, Op::Mean(a.id))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Tensor, axis: usize) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer = numel(&shape[..axis]);
        let n = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut out = self.value(x).to_vec();
        if inner == 1 {
            out.chunks_exact_mut(n.max(1)).for_each(softmax_in_place);
        } else {
            let mut buf = vec![0.0; n];
            for o in 0..outer {
                for r in 0..inner {
                    for i in 0..n {
                        buf[i] = out[(o * n + i) * inner + r];
                    }
                    softmax_in_place(&mut buf);
                    for i in 0..n {
                        out[(o * n + i) * inner + r] = buf[i];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            shape,
            Storage::Owned(out),
            rg,
            Op::Softmax {
                x: x.id,
                outer,
                n,
                inner,
            },
        )
    }

    /// Normalizes each slice along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if d == 0 {
            return Err(Error::dim("layer_norm", "last axis is empty"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs last axis {d}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let s = &xv[r * d..(r + 1) * d];
            let mu = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (s[i] - mu) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gv[i] + bv[i];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        if !rg {
            xhat = Vec::new();
            inv_std = Vec::new();
        }
        self.push(
            shape,
            Storage::Owned(out),
            rg,
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Nearest-neighbour upsampling of `x[C,L]` to `[C,target]`; output
    /// index `j` reads input index `floor(j·L/target)`.
    pub fn upsample_nearest(&mut self, x: Tensor, target: usize) -> Result<Tensor> {
        let (c, l) = self.dims2("upsample_nearest", x)?;
        if target < l {
            return Err(Error::dim(
                "upsample_nearest",
                format!("target length {target} shorter than input length {l}"),
            ));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; c * target];
        for ch in 0..c {
            for j in 0..target {
                out[ch * target + j] = xv[ch * l + upsample_src(j, l, target)];
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            vec![c, target],
            Storage::Owned(out),
            rg,
            Op::Upsample { x: x.id },
        )
    }

    /// Scaled dot-product attention run independently on `n_heads` column
    /// blocks of `q`, `k`, `v` (each `[T, D]`); head outputs are written
    /// side by side into a `[T, D]` result. No masking.
    pub fn multi_head_attention(
        &mut self,
        q: Tensor,
        k: Tensor,
        v: Tensor,
        n_heads: usize,
    ) -> Result<Tensor> {
        let (t, d) = self.dims2("multi_head_attention", q)?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] {
            return Err(Error::dim(
                "multi_head_attention",
                format!(
                    "q {:?}, k {:?}, v {:?} must share one [T,D] shape",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {n_heads} heads"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; n_heads * t * t];
        let mut out = vec![0.0; t * d];
        for (h, p) in probs.chunks_exact_mut((t * t).max(1)).enumerate() {
            let off = h * dh;
            let kt = MatRef::cols_of(kv, t, d, off, dh).t();
            let vh = MatRef::cols_of(vv, t, d, off, dh);
            // Row blocks keep the score tile cache-resident between the
            // two products.
            for r0 in (0..t).step_by(ATTN_ROW_BLOCK) {
                let rows = ATTN_ROW_BLOCK.min(t - r0);
                let tile = &mut p[r0 * t..(r0 + rows) * t];
                gemm_into(
                    MatRef::cols_of(&qv[r0 * d..], rows, d, off, dh),
                    kt,
                    MatMut::new(tile, rows, t),
                    0.0,
                );
                for row in tile.chunks_exact_mut(t) {
                    kernels::softmax_scaled(row, scale);
                }
                gemm_into(
                    MatRef::new(tile, rows, t),
                    vh,
                    MatMut::cols_of(&mut out[r0 * d..], rows, d, off, dh),
                    0.0,
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        if !rg {
            probs = Vec::new();
        }
        self.push(
            vec![t, d],
            Storage::Owned(out),
            rg,
            Op::MultiHeadAttention {
                q: q.id,
                k: k.id,
                v: v.id,
                n_heads,
                probs,
            },
        )
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose", x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![c, r], Storage::Owned(out), rg, Op::Transpose(x.id))
    }

    /// Columns `start..start+width` of `x[T,D]`.
    pub fn slice_cols(&mut self, x: Tensor, start: usize, width: usize) -> Result<Tensor> {
        let (t, d) = self.dims2("slice_cols", x)?;
        if start + width > d {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} out of range for width {d}", start + width),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(t * width);
        for row in xv.chunks_exact(d) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let rg = self.rg(&[x]);
        self.push(
            vec![t, width],
            Storage::Owned(out),
            rg,
            Op::SliceCols { x: x.id, start },
        )
    }

    /// Rows `start..start+n` of `x[R,C]`.
    pub fn slice_rows(&mut self, x: Tensor, start: usize, n: usize) -> Result<Tensor> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if start + n > r {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of range for {r} rows", start + n),
            ));
        }
        let out = self.value(x)[start * c..(start + n) * c].to_vec();
        let rg = self.rg(&[x]);
        self.push(
            vec![n, c],
            Storage::Owned(out),
            rg,
            Op::SliceRows { x: x.id, start },
        )
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let (t, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pt, pd) = self.dims2("concat_cols", p)?;
            if pt != t {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row counts {t} and {pt} differ"),
                ));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for r in 0..t {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            vec![t, total],
            Storage::Owned(out),
            rg,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Concatenates 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, d) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (pt, pd) = self.dims2("concat_rows", p)?;
            if pd != d {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column counts {d} and {pd} differ"),
                ));
            }
            rows += pt;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        self.push(
            vec![rows, d],
            Storage::Owned(out),
            rg,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Column means of `x[T,D]` → `[D]`.
    pub fn mean_rows(&mut self, x: Tensor) -> Result<Tensor> {
        let (t, d) = self.dims2("mean_rows", x)?;
        if t == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut out = vec![0.0; d];
        for row in self.value(x).chunks_exact(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        let rg = self.rg(&[x]);
        self.push(vec![d], Storage::Owned(out), rg, Op::MeanRows(x.id))
    }

    pub fn reshape(&mut self, x: Tensor, shape: &[usize]) -> Result<Tensor> {
        check_len("reshape", shape, self.value(x).len())?;
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape.to_vec(), Storage::Owned(out), rg, Op::Reshape(x.id))
    }

    /// Mean over rows of `−log softmax(logits)[label]`, log-sum-exp stabilized.
    pub fn cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let (b, c) = self.dims2("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {b} rows", labels.len()),
            ));
        }
        if b == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut loss = 0.0;
        for (row, (&y, p)) in lv
            .chunks_exact(c)
            .zip(labels.iter().zip(probs.chunks_exact_mut(c)))
        {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(p);
        }
        loss /= b as f64;
        let rg = self.rg(&[logits]);
        self.push(
            vec![],
            Storage::Owned(vec![loss]),
            rg,
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out. The graph is consumed afterwards: values and grads
    /// stay readable but no further ops or backward passes are accepted.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: usize| -> &[f64] { &self.nodes[id].value };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                b_transposed,
            } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a].shape[1];
                let dc = MatRef::new(g, r, c);
                if self.needs(a) {
                    let bm = if b_transposed {
                        MatRef::new(val(b), c, k)
                    } else {
                        MatRef::new(val(b), k, c).t()
                    };
                    gemm(dc, bm, slot(grads, a, r * k), 1.0);
                }
                if self.needs(b) {
                    let am = MatRef::new(val(a), r, k);
                    if b_transposed {
                        gemm(dc.t(), am, slot(grads, b, c * k), 1.0);
                    } else {
                        gemm(am.t(), dc, slot(grads, b, k * c), 1.0);
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (cout, lout) = (node.shape[0], node.shape[1]);
                let (cin, len) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let k = self.nodes[w].shape[2];
                let ck = cin * k;
                let dy = MatRef::new(g, cout, lout);
                if self.needs(w) {
                    gemm(
                        dy,
                        MatRef::new(cols, ck, lout).t(),
                        slot(grads, w, cout * ck),
                        1.0,
                    );
                }
                if self.needs(b) {
                    let db = slot(grads, b, cout);
                    for (o, row) in g.chunks_exact(lout).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                if self.needs(x) {
                    let mut dcols = vec![0.0; ck * lout];
                    gemm(MatRef::new(val(w), cout, ck).t(), dy, &mut dcols, 0.0);
                    let dx = slot(grads, x, cin * len);
                    for ci in 0..cin {
                        for kk in 0..k {
                            let crow = &dcols[(ci * k + kk) * lout..(ci * k + kk + 1) * lout];
                            for (j, &dv) in crow.iter().enumerate() {
                                let pos = j * stride + kk;
                                if pos >= pad && pos - pad < len {
                                    dx[ci * len + pos - pad] += dv;
                                }
                            }
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for id in [a, b] {
                    if self.needs(id) {
                        add_into(slot(grads, id, g.len()), g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = val(b);
                    let da = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if self.needs(b) {
                    let av = val(a);
                    let db = slot(grads, b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale(a, s) => {
                if self.needs(a) {
                    let da = slot(grads, a, g.len());
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * s);
                }
            }
            &Op::Relu(a) => {
                if self.needs(a) {
                    let av = val(a);
                    let da = slot(grads, a, g.len());
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            &Op::AddRowBias { x, bias } => {
                let d = node.shape[1];
                if self.needs(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if self.needs(bias) {
                    let db = slot(grads, bias, d);
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                }
            }
            &Op::Sum(a) => {
                if self.needs(a) {
                    let n = val(a).len();
                    slot(grads, a, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(a) => {
                if self.needs(a) {
                    let n = val(a).len();
                    let s = g[0] / n as f64;
                    slot(grads, a, n).iter_mut().for_each(|d| *d += s);
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                if self.needs(x) {
                    let y = &node.value;
                    let dx = slot(grads, x, y.len());
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + r;
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                dx[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = *node.shape.last().unwrap();
                if self.needs(beta) {
                    let db = slot(grads, beta, d);
                    for row in g.chunks_exact(d) {
                        add_into(db, row);
                    }
                }
                if self.needs(gamma) {
                    let dg = slot(grads, gamma, d);
                    for (row, h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for i in 0..d {
                            dg[i] += row[i] * h[i];
                        }
                    }
                }
                if self.needs(x) {
                    let gv = val(gamma);
                    let dx = slot(grads, x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (row, h)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate()
                    {
                        for i in 0..d {
                            dh[i] = row[i] * gv[i];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / d as f64;
                        for i in 0..d {
                            dx[r * d + i] += k * (d as f64 * dh[i] - s1 - h[i] * s2);
                        }
                    }
                }
            }
            &Op::Upsample { x } => {
                if self.needs(x) {
                    let (c, l) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let target = node.shape[1];
                    let dx = slot(grads, x, c * l);
                    for ch in 0..c {
                        for j in 0..target {
                            dx[ch * l + upsample_src(j, l, target)] += g[ch * target + j];
                        }
                    }
                }
            }
            Op::MultiHeadAttention {
                q,
                k,
                v,
                n_heads,
                probs,
            } => {
                let (q, k, v, n_heads) = (*q, *k, *v, *n_heads);
                let (t, d) = (node.shape[0], node.shape[1]);
                let dh = d / n_heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut ds = vec![0.0; t * t];
                for (h, p) in probs.chunks_exact((t * t).max(1)).enumerate() {
                    let off = h * dh;
                    let dout = MatRef::cols_of(g, t, d, off, dh);
                    if self.needs(v) {
                        let dv = slot(grads, v, t * d);
                        gemm_into(
                            MatRef::new(p, t, t).t(),
                            dout,
                            MatMut::cols_of(dv, t, d, off, dh),
                            1.0,
                        );
                    }
                    if !self.needs(q) && !self.needs(k) {
                        continue;
                    }
                    gemm_into(
                        dout,
                        MatRef::cols_of(val(v), t, d, off, dh).t(),
                        MatMut::new(&mut ds, t, t),
                        0.0,
                    );
                    for (drow, prow) in ds.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (dv, &pv) in drow.iter_mut().zip(prow) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    if self.needs(q) {
                        let dq = slot(grads, q, t * d);
                        gemm_into(
                            MatRef::new(&ds, t, t),
                            MatRef::cols_of(val(k), t, d, off, dh),
                            MatMut::cols_of(dq, t, d, off, dh),
                            1.0,
                        );
                    }
                    if self.needs(k) {
                        let dk = slot(grads, k, t * d);
                        gemm_into(
                            MatRef::new(&ds, t, t).t(),
                            MatRef::cols_of(val(q), t, d, off, dh),
                            MatMut::cols_of(dk, t, d, off, dh),
                            1.0,
                        );
                    }
                }
            }
            &Op::Transpose(x) => {
                if self.needs(x) {
                    // node is [c, r]; input is [r, c]
                    let (c, r) = (node.shape[0], node.shape[1]);
                    let dx = slot(grads, x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            &Op::SliceCols { x, start } => {
                if self.needs(x) {
                    let d = self.nodes[x].shape[1];
                    let w = node.shape[1];
                    let dx = slot(grads, x, val(x).len());
                    for (r, row) in g.chunks_exact(w).enumerate() {
                        add_into(&mut dx[r * d + start..r * d + start + w], row);
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if self.needs(x) {
                    let c = node.shape[1];
                    let dx = slot(grads, x, val(x).len());
                    add_into(&mut dx[start * c..start * c + g.len()], g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    if self.needs(p) {
                        let dp = slot(grads, p, val(p).len());
                        for (r, row) in g.chunks_exact(total).enumerate() {
                            add_into(&mut dp[r * w..(r + 1) * w], &row[off..off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if self.needs(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            &Op::MeanRows(x) => {
                if self.needs(x) {
                    let (t, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                    let dx = slot(grads, x, t * d);
                    let inv = 1.0 / t as f64;
                    for row in dx.chunks_exact_mut(d) {
                        row.iter_mut().zip(g).for_each(|(v, gv)| *v += gv * inv);
                    }
                }
            }
            &Op::Reshape(x) => {
                if self.needs(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                if self.needs(logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let s = g[0] / b as f64;
                    let dl = slot(grads, logits, b * c);
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn upsample_src(j: usize, len: usize, target: usize) -> usize {
    j * len / target
}

/// Numerically stable in-place softmax of one slice.
pub fn softmax_in_place(v: &mut [f64]) {
    kernels::softmax_scaled(v, 1.0);
}
