//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every primitive application in creation order, so the
//! node list is already a topological order and [`Graph::backward`] simply
//! walks it in reverse. Tensors are treated as row-major matrices whose
//! column count is the last extent; every primitive here works on that view.
//!
//! Attention is a single fused primitive over *packed* sequences: a batch is
//! stored as one `[total_positions, d]` matrix with per-sequence row ranges,
//! so there is no padding anywhere in the engine.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of the matrix view: cols is the last extent.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.split_last() {
            None => (1, 1),
            Some((&c, rest)) => (rest.iter().product(), c),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges of the packed query and key matrices for each sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub queries: Vec<Range<usize>>,
    pub keys: Vec<Range<usize>>,
}

impl AttentionLayout {
    pub fn new(queries: Vec<Range<usize>>, keys: Vec<Range<usize>>) -> Result<Self> {
        if queries.len() != keys.len() {
            return Err(Error::shape(
                "attention",
                format!("{} query segments vs {} key segments", queries.len(), keys.len()),
            ));
        }
        Ok(AttentionLayout { queries, keys })
    }

    /// Self-attention over the same segments.
    pub fn self_attention(segments: &[Range<usize>]) -> Self {
        AttentionLayout {
            queries: segments.to_vec(),
            keys: segments.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Stack along rows.
    Rows,
    /// Join along the last extent.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SliceHead(Var, usize),
    Concat(Vec<Var>, Axis),
    Embedding(Var, Vec<usize>),
    Activation(Var, Activation),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    SegmentMean(Var, Vec<Range<usize>>),
    Sum(Var),
    NormalizeRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        heads: usize,
        causal: bool,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, if it is a leaf that requires one.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k and k×n logical views
    // of slices whose lengths were checked, and `c` is an m×n row-major slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` is unavailable and no
    /// intermediate caches are kept.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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
        &self.nodes[v.0].value.shape
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
            return Ok(self.push(Tensor::new(sa, out)?, Op::Add(a, b), &[a, b]));
        }
        let (_, c) = self.dims2(a);
        if self.value(b).len() == c && sb.iter().rev().skip(1).all(|&e| e == 1) {
            let row = self.data(b).to_vec();
            let mut out = self.data(a).to_vec();
            for chunk in out.chunks_mut(c) {
                chunk.iter_mut().zip(&row).for_each(|(x, y)| *x += y);
            }
            return Ok(self.push(Tensor::new(sa, out)?, Op::AddRow(a, b), &[a, b]));
        }
        Err(Error::shape("add", format!("{sa:?} + {sb:?}")))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", format!("{sa:?} * {sb:?}")));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::new(sa, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x * c).collect(),
        };
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// First `width` features of the last axis.
    pub fn slice_head(&mut self, a: Var, width: usize) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if width > c || width == 0 {
            return Err(Error::shape(
                "slice_head",
                format!("head width {width} of last extent {c}"),
            ));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c..i * c + width]);
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("nonscalar") = width;
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceHead(a, width), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims2(p)).collect();
        let out = match axis {
            Axis::Rows => {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::shape("concat", format!("row concat of {dims:?}")));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * c);
                for &p in parts {
                    data.extend_from_slice(self.data(p));
                }
                Tensor::new(vec![rows, c], data)?
            }
            Axis::Cols => {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::shape("concat", format!("column concat of {dims:?}")));
                }
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for (&p, d) in parts.iter().zip(&dims) {
                        data.extend_from_slice(&self.data(p)[i * d.1..(i + 1) * d.1]);
                    }
                }
                Tensor::new(vec![r, c], data)?
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} outside table of {v} rows"),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding(table, ids.to_vec()),
            &[table],
        ))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a);
        let data = match kind {
            Activation::Gelu => t.data.iter().map(|&x| gelu(x)).collect(),
            Activation::Relu => t.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push(out, Op::Activation(a, kind), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "width {c} with gamma {:?} and beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let keep = self.grad_enabled;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: if keep { xhat } else { Vec::new() },
                rstd: if keep { rstd } else { Vec::new() },
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = self.dims2(a);
        let t = self.value(a);
        let mut data = t.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: t.shape.clone(),
            data,
        };
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Mean of rows within each range; one output row per range.
    pub fn segment_mean(&mut self, a: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (r, c) = self.dims2(a);
        let src = self.data(a);
        let mut out = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.start >= seg.end || seg.end > r {
                return Err(Error::shape(
                    "segment_mean",
                    format!("segment {seg:?} of {r} rows"),
                ));
            }
            let inv = 1.0 / seg.len() as f64;
            let dst = &mut out[s * c..(s + 1) * c];
            for i in seg.clone() {
                dst.iter_mut()
                    .zip(&src[i * c..(i + 1) * c])
                    .for_each(|(d, x)| *d += x * inv);
            }
        }
        Ok(self.push(
            Tensor::new(vec![segments.len(), c], out)?,
            Op::SegmentMean(a, segments.to_vec()),
            &[a],
        ))
    }

    /// Mean over one axis of a matrix: `Rows` averages rows into `[1, c]`,
    /// `Cols` averages each row into `[r, 1]`.
    pub fn mean_over_axis(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c) = self.dims2(a);
        match axis {
            Axis::Rows => self.segment_mean(a, &[0..r]),
            Axis::Cols => {
                let t = self.transpose_view(a, r, c)?;
                let m = self.segment_mean(t, &[0..c])?;
                self.transpose(m)
            }
        }
    }

    fn transpose_view(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let v = if self.shape(a).len() == 2 {
            a
        } else {
            self.reshape(a, &[r, c])?
        };
        self.transpose(v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Each row scaled to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        let src = self.data(a);
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows(a, norms), &[a]))
    }

    /// Flat-index gather into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        let src = self.data(a);
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::shape("gather", format!("index {i} of {n} values")));
            }
            out.push(src[i]);
        }
        Ok(self.push(Tensor::vector(out), Op::Gather(a, indices.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {shape:?}", t.shape),
            ));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(a);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
        };
        self.push(out, Op::Dropout(a, mask), &[a])
    }

    /// Token-mean cross-entropy of row-wise softmax(logits) against `targets`,
    /// with uniform label smoothing over the vocabulary. `None` targets are
    /// masked out. The loss of an all-masked input is zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let (r, v) = self.dims2(logits);
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {r} logit rows", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidInput(format!(
                "label smoothing must lie in [0, 1), got {smoothing}"
            )));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; r * v];
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {t} outside vocabulary of {v}"),
                ));
            }
            let row = &src[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let nll = lse - row[t];
            let loss = if smoothing > 0.0 {
                let mean_logp = row.iter().map(|x| x - lse).sum::<f64>() / v as f64;
                (1.0 - smoothing) * nll - smoothing * mean_logp
            } else {
                nll
            };
            total += loss;
            count += 1;
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        let keep = self.grad_enabled;
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs: if keep { probs } else { Vec::new() },
                count,
            },
            &[logits],
        ))
    }

    /// Fused multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[Nq, d]`, `k` and `v` are `[Nk, d]`, already projected. Each
    /// sequence `s` attends from rows `layout.queries[s]` of `q` to rows
    /// `layout.keys[s]` of `k`/`v`. With `causal`, query `i` of a sequence
    /// sees keys `0..=i` of the same sequence.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &Arc<AttentionLayout>,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (nq, d) = self.dims2(q);
        let (nk, dk) = self.dims2(k);
        let (nv, dv) = self.dims2(v);
        if dk != d || dv != d || nk != nv || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q [{nq},{d}], k [{nk},{dk}], v [{nv},{dv}], heads {heads}"),
            ));
        }
        for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
            if qs.end > nq || ks.end > nk || ks.is_empty() {
                return Err(Error::shape(
                    "attention",
                    format!("segment {qs:?}/{ks:?} outside [{nq}]/[{nk}]"),
                ));
            }
            if causal && qs.len() > ks.len() {
                return Err(Error::shape("attention", "causal segment longer than keys"));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
            let lk = ks.len();
            for h in 0..heads {
                let off = h * dh;
                for (qi, qrow) in qs.clone().enumerate() {
                    let qv = &qd[qrow * d + off..qrow * d + off + dh];
                    let visible = if causal { qi + 1 } else { lk };
                    scores.clear();
                    for kj in 0..lk {
                        if kj < visible {
                            let kv = &kd[(ks.start + kj) * d + off..(ks.start + kj) * d + off + dh];
                            scores.push(dot(qv, kv) * scale);
                        } else {
                            scores.push(f64::NEG_INFINITY);
                        }
                    }
                    softmax_in_place(&mut scores);
                    let dst = &mut out[qrow * d + off..qrow * d + off + dh];
                    for (kj, &p) in scores.iter().enumerate().take(visible) {
                        let vv = &vd[(ks.start + kj) * d + off..(ks.start + kj) * d + off + dh];
                        dst.iter_mut().zip(vv).for_each(|(o, x)| *o += p * x);
                    }
                    if self.grad_enabled {
                        probs.extend_from_slice(&scores);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![nq, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                layout: Arc::clone(layout),
                heads,
                causal,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.dims2(*b).1;
                if self.wants(*a) {
                    let ga = add_into(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, false, self.data(*b), true, ga, 1.0);
                }
                if self.wants(*b) {
                    let gb = add_into(&mut grads[b.0], k * n);
                    gemm(k, m, n, self.data(*a), true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (r, c) = self.dims2(*a);
                    let ga = add_into(&mut grads[a.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(*x) {
                        let gx = add_into(&mut grads[x.0], g.len());
                        gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    let ga = add_into(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if self.wants(*b) {
                    let c = self.value(*b).len();
                    let gb = add_into(&mut grads[b.0], c);
                    for chunk in g.chunks(c) {
                        gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let other = self.data(*b);
                    let ga = add_into(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * other[i];
                    }
                }
                if self.wants(*b) {
                    let other = self.data(*a);
                    let gb = add_into(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let ga = add_into(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::SliceHead(a, w) => {
                if self.wants(*a) {
                    let (r, c) = self.dims2(*a);
                    let ga = add_into(&mut grads[a.0], r * c);
                    for i in 0..r {
                        for j in 0..*w {
                            ga[i * c + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        if self.wants(*p) {
                            let gp = add_into(&mut grads[p.0], n);
                            gp.iter_mut()
                                .zip(&g[off..off + n])
                                .for_each(|(d, s)| *d += s);
                        }
                        off += n;
                    }
                }
                Axis::Cols => {
                    let total: usize = parts.iter().map(|p| self.dims2(*p).1).sum();
                    let mut col = 0;
                    for p in parts {
                        let (r, c) = self.dims2(*p);
                        if self.wants(*p) {
                            let gp = add_into(&mut grads[p.0], r * c);
                            for i in 0..r {
                                for j in 0..c {
                                    gp[i * c + j] += g[i * total + col + j];
                                }
                            }
                        }
                        col += c;
                    }
                }
            },
            Op::Embedding(table, ids) => {
                if self.wants(*table) {
                    let (v, d) = self.dims2(*table);
                    let gt = add_into(&mut grads[table.0], v * d);
                    for (row, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[row * d..(row + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Activation(a, kind) => {
                if self.wants(*a) {
                    let x = self.data(*a);
                    let ga = add_into(&mut grads[a.0], g.len());
                    match kind {
                        Activation::Gelu => {
                            for i in 0..g.len() {
                                ga[i] += g[i] * gelu_grad(x[i]);
                            }
                        }
                        Activation::Relu => {
                            for i in 0..g.len() {
                                if x[i] > 0.0 {
                                    ga[i] += g[i];
                                }
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
                rstd,
            } => {
                let (r, c) = self.dims2(*x);
                let gam = self.data(*gamma);
                if self.wants(*gamma) {
                    let gg = add_into(&mut grads[gamma.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let gb = add_into(&mut grads[beta.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = add_into(&mut grads[x.0], r * c);
                    let inv_c = 1.0 / c as f64;
                    for i in 0..r {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for j in 0..c {
                            let dy = g[i * c + j] * gam[j];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dy = g[i * c + j] * gam[j];
                            gx[i * c + j] += rstd[i]
                                * (dy - inv_c * sum_dy - xhat[i * c + j] * inv_c * sum_dy_xhat);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let (_, c) = self.dims2(*a);
                    let y = &node.value.data;
                    let ga = add_into(&mut grads[a.0], y.len());
                    for (row, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for j in 0..c {
                            ga[row * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::SegmentMean(a, segments) => {
                if self.wants(*a) {
                    let (r, c) = self.dims2(*a);
                    let ga = add_into(&mut grads[a.0], r * c);
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        for i in seg.clone() {
                            for j in 0..c {
                                ga[i * c + j] += g[s * c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let ga = add_into(&mut grads[a.0], n);
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::NormalizeRows(a, norms) => {
                if self.wants(*a) {
                    let (r, c) = self.dims2(*a);
                    let y = &node.value.data;
                    let ga = add_into(&mut grads[a.0], r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let s: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for j in 0..c {
                            ga[i * c + j] += (gr[j] - yr[j] * s) / norms[i];
                        }
                    }
                }
            }
            Op::Gather(a, idx) => {
                if self.wants(*a) {
                    let n = self.value(*a).len();
                    let ga = add_into(&mut grads[a.0], n);
                    for (o, &i) in idx.iter().enumerate() {
                        ga[i] += g[o];
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let ga = add_into(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Dropout(a, mask) => {
                if self.wants(*a) {
                    let ga = add_into(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * mask[i];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
                count,
            } => {
                if self.wants(*logits) && *count > 0 {
                    let (r, v) = self.dims2(*logits);
                    let gl = add_into(&mut grads[logits.0], r * v);
                    let w = g[0] / *count as f64;
                    let uniform = smoothing / v as f64;
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let mut target_mass = uniform;
                            if j == t {
                                target_mass += 1.0 - smoothing;
                            }
                            gl[i * v + j] += w * (probs[i * v + j] - target_mass);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                causal,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, *heads, *causal, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        heads: usize,
        causal: bool,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nq, d) = self.dims2(q);
        let nk = self.dims2(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.data(q);
        let kd = self.data(k);
        let vd = self.data(v);
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gv = vec![0.0; nk * d];
        let mut offset = 0;
        let mut dp = Vec::new();
        for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
            let lk = ks.len();
            for h in 0..heads {
                let off = h * dh;
                for (qi, qrow) in qs.clone().enumerate() {
                    let p = &probs[offset..offset + lk];
                    offset += lk;
                    let visible = if causal { qi + 1 } else { lk };
                    let go = &g[qrow * d + off..qrow * d + off + dh];
                    dp.clear();
                    for kj in 0..visible {
                        let krow = (ks.start + kj) * d + off;
                        dp.push(dot(go, &vd[krow..krow + dh]));
                        gv[krow..krow + dh]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(a, b)| *a += p[kj] * b);
                    }
                    let s: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                    for kj in 0..visible {
                        let ds = p[kj] * (dp[kj] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (ks.start + kj) * d + off;
                        let qoff = qrow * d + off;
                        for t in 0..dh {
                            gq[qoff + t] += ds * kd[krow + t];
                            gk[krow + t] += ds * qd[qoff + t];
                        }
                    }
                }
            }
        }
        for (var, contrib) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(var) {
                let n = contrib.len();
                let dst = add_into(&mut grads[var.0], n);
                dst.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Outcome of a finite-difference check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, coordinate)` of the worst mismatch.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Gradients smaller than this are compared absolutely: central differences
/// in f64 carry round-off of order 1e-11 to 1e-10, which would swamp the
/// relative error of structurally zero gradients such as attention key biases.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Central-difference relative error with an absolute floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares `backward` against central finite differences for a scalar
/// function of one tensor. Returns the worst relative error.
pub fn grad_check<F>(function: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |g, vars| function(g, vars[0]),
        std::slice::from_ref(point),
        step,
        None,
    )?;
    Ok(report.max_relative_error)
}

/// Multi-input variant of [`grad_check`]. With `coords`, only the listed
/// `(input, coordinate)` pairs are perturbed.
pub fn grad_check_many<F>(
    function: F,
    points: &[Tensor],
    step: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| graph.leaf(p.clone(), true)).collect();
    let root = function(&mut graph, &vars)?;
    let grads = graph.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vs: Vec<Var> = inputs.iter().map(|p| g.leaf(p.clone(), false)).collect();
        let out = function(&mut g, &vs)?;
        Ok(g.value(out).item())
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = points
                .iter()
                .enumerate()
                .flat_map(|(i, p)| (0..p.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let mut work = points.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for &(i, j) in coords {
        let orig = work[i].data[j];
        work[i].data[j] = orig + step;
        let plus = eval(&work)?;
        work[i].data[j] = orig - step;
        let minus = eval(&work)?;
        work[i].data[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i][j], numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (i, j);
        }
        report.checked += 1;
    }
    Ok(report)
}
