//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every forward operation appends one node whose inputs precede it, so the
//! node vector is already in topological order and `backward` is a single
//! reverse sweep. Parameters are borrowed from a [`ParamStore`] rather than
//! copied; their gradients come back in [`Gradients`] and are added to the
//! store with [`ParamStore::accumulate`].

use std::collections::HashMap;

use super::{ParamStore, RngState, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation families, used for diagnostics and for fault injection in tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    AddBias,
    AddBroadcast,
    Mul,
    Scale,
    MaskRows,
    Tanh,
    Relu,
    Leaky,
    Dropout,
    Softmax,
    LayerNorm,
    BatchNorm,
    Embedding,
    Concat,
    Slice,
    Reshape,
    RelScores,
    MaxPool,
    CrossEntropy,
    Sum,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        let all = [
            Leaf, MatMul, BatchMatMul, Add, AddBias, AddBroadcast, Mul, Scale, MaskRows, Tanh,
            Relu, Leaky, Dropout, Softmax, LayerNorm, BatchNorm, Embedding, Concat, Slice,
            Reshape, RelScores, MaxPool, CrossEntropy, Sum,
        ];
        all.into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
    }
}

/// Per-channel statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    AddBroadcast { x: Var, y: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    MaskRows { x: Var, mask: Vec<bool> },
    Tanh { x: Var },
    Relu { x: Var },
    Leaky { x: Var, slopes: Vec<f64> },
    Dropout { x: Var, scale: Vec<f64> },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, mask: Vec<bool>, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Reshape { x: Var },
    RelScores { r: Var, table: Var },
    MaxPool { h: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sum { x: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::AddBroadcast { .. } => OpKind::AddBroadcast,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::MaskRows { .. } => OpKind::MaskRows,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Relu { .. } => OpKind::Relu,
            Op::Leaky { .. } => OpKind::Leaky,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::RelScores { .. } => OpKind::RelScores,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum { .. } => OpKind::Sum,
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    param: Option<usize>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    fault: Option<(OpKind, f64)>,
}

/// Result of a backward sweep: gradients of every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: HashMap<usize, usize>,
}

impl Gradients {
    /// Gradient for the parameter at `index` in the store, if it was used.
    pub fn param(&self, index: usize) -> Option<&[f64]> {
        self.params
            .get(&index)
            .and_then(|node| self.leaves.get(node))
            .map(Vec::as_slice)
    }

    /// Gradient for a leaf variable created with [`Tape::leaf`] or [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            fault: None,
        }
    }

    /// Scale every gradient produced by operations of `kind` by `factor`.
    /// Only meaningful as a negative control for gradient checking.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => self.params.by_index(*i).1,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf referring to a named tensor of the parameter store. Repeated
    /// lookups of the same name share one node, so gradients from every use
    /// are summed.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        if let Some(&v) = self.param_vars.get(&idx) {
            return Ok(v);
        }
        let requires_grad = self.params.by_index(idx).1.requires_grad;
        self.nodes.push(Node {
            value: Value::Param(idx),
            op: Op::Leaf,
            requires_grad,
            param: Some(idx),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    // ---------------------------------------------------------------------
    // Linear algebra

    /// `a[.., k] · b[k, n] -> [.., n]`; leading axes of `a` are flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}"
            )));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product of 3-D tensors with optional transposes of either side:
    /// `op(a)[B, m, k] · op(b)[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim(format!("bmm expects [B,_,_] pairs: {sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(Error::dim(format!(
                "bmm inner dimensions disagree: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let batch = sa[0];
        let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                matmul_t(
                    &ad[bi * asz..(bi + 1) * asz],
                    (sa[1], sa[2]),
                    ta,
                    &bd[bi * bsz..(bi + 1) * bsz],
                    (sb[1], sb[2]),
                    tb,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, ta, tb }, &[a, b]))
    }

    // ---------------------------------------------------------------------
    // Elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// `x[.., d] + bias[d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let bv = self.value(bias).data();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x[B, n, d] + y[B, d]`, broadcasting `y` over the middle axis.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sx.len() != 3 || sy != [sx[0], sx[2]] {
            return Err(Error::dim(format!("add_broadcast: {sx:?} + {sy:?}")));
        }
        let (n, d) = (sx[1], sx[2]);
        let mut data = self.value(x).data().to_vec();
        let yd = self.value(y).data();
        for (r, row) in data.chunks_mut(d).enumerate() {
            let b = r / n;
            row.iter_mut()
                .zip(&yd[b * d..(b + 1) * d])
                .for_each(|(o, v)| *o += v);
        }
        let t = Tensor::new(&sx, data)?;
        Ok(self.push(t, Op::AddBroadcast { x, y }, &[x, y]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Scale { x, c }, &[x])
    }

    /// Zero every last-axis row whose mask entry is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.rows() {
            return Err(Error::dim(format!(
                "mask of {} rows for tensor {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        let d = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, &keep) in data.chunks_mut(d).zip(mask) {
            if !keep {
                row.fill(0.0);
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::MaskRows { x, mask: mask.to_vec() }, &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Tanh { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::Relu { x }, &[x])
    }

    /// Randomized leaky rectifier. In training mode each element draws its
    /// negative-side slope from `Uniform(lower, upper)`; otherwise the slope
    /// is the midpoint `(lower + upper) / 2`.
    pub fn rrelu(
        &mut self,
        x: Var,
        lower: f64,
        upper: f64,
        training: bool,
        rng: &mut RngState,
    ) -> Result<Var> {
        if !(0.0 < lower && lower <= upper && upper < 1.0) {
            return Err(Error::Config(format!(
                "rrelu bounds must satisfy 0 < lower <= upper < 1, got ({lower}, {upper})"
            )));
        }
        let n = self.value(x).numel();
        let slopes: Vec<f64> = if training {
            (0..n).map(|_| rng.uniform(lower, upper)).collect()
        } else {
            vec![(lower + upper) / 2.0]
        };
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { v * slopes[i % slopes.len()] })
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::Leaky { x, slopes }, &[x]))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` at training
    /// time, so inference is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut RngState) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let scale: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &scale, |a, s| a * s);
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::Dropout { x, scale }, &[x]))
    }

    /// Softmax over the last axis. `key_mask`, when given, has one entry per
    /// (leading-axis index, last-axis index) and is broadcast over any middle
    /// axes; masked entries receive probability zero.
    pub fn softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let k = xv.cols();
        let rows = xv.rows();
        let batch = if xv.ndim() >= 2 { xv.shape()[0] } else { 1 };
        let per_batch = rows / batch.max(1);
        if let Some(m) = key_mask {
            if m.len() != batch * k {
                return Err(Error::dim(format!(
                    "softmax mask has {} entries, expected {}x{}",
                    m.len(),
                    batch,
                    k
                )));
            }
        }
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * k..(r + 1) * k];
            let mrow = key_mask.map(|m| {
                let b = r / per_batch;
                &m[b * k..(b + 1) * k]
            });
            let valid = |j: usize| mrow.is_none_or(|m| m[j]);
            if !(0..k).any(valid) {
                return Err(Error::Degenerate(format!(
                    "softmax row {r} has no valid entries"
                )));
            }
            if (0..k).any(|j| valid(j) && !row[j].is_finite()) {
                return Err(Error::Numeric(format!("softmax row {r} has non-finite scores")));
            }
            let max = (0..k)
                .filter(|&j| valid(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * k..(r + 1) * k];
            let mut sum = 0.0;
            for j in 0..k {
                if valid(j) {
                    orow[j] = (row[j] - max).exp();
                    sum += orow[j];
                }
            }
            orow.iter_mut().for_each(|v| *v /= sum);
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(t, Op::Softmax { x }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Normalization

    /// Normalize each last-axis vector to zero mean and unit variance, then
    /// apply `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::dim(format!(
                    "layer_norm affine {:?} vs channels {d}",
                    self.shape(p)
                )));
            }
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * inv;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % d] + b[i % d])
            .collect();
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            &[x, gamma, beta],
        ))
    }

    /// Batch normalization over every valid row (all leading axes pooled) of
    /// `x[.., C]`. With `running = None` the statistics of the valid rows are
    /// used and returned; otherwise the supplied `(mean, var)` are treated as
    /// constants. Rows with a false mask entry produce zeros.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: &[bool],
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(x);
        let c = xv.cols();
        let rows = xv.rows();
        if mask.len() != rows {
            return Err(Error::dim(format!(
                "batch_norm mask has {} rows, tensor {:?}",
                mask.len(),
                xv.shape()
            )));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::dim("batch_norm affine shape"));
            }
        }
        let count = mask.iter().filter(|&&m| m).count();
        let training = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::dim("batch_norm running stats shape"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                if count == 0 {
                    return Err(Error::Degenerate(
                        "batch_norm over zero valid positions".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                for r in (0..rows).filter(|&r| mask[r]) {
                    mean.iter_mut().zip(xv.row(r)).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                let mut var = vec![0.0; c];
                for r in (0..rows).filter(|&r| mask[r]) {
                    for (j, v) in xv.row(r).iter().enumerate() {
                        var[j] += (v - mean[j]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.numel()];
        let mut out = vec![0.0; xv.numel()];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in (0..rows).filter(|&r| mask[r]) {
            for j in 0..c {
                let h = (xv.data()[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let stats = training.then_some(BatchStats { mean, var });
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mask: mask.to_vec(),
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    // ---------------------------------------------------------------------
    // Indexing and layout

    /// Row lookup into `table[V, d]`. Id 0 is padding: it yields a zero row
    /// and receives no gradient. Output shape is `shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim("embedding table must be 2-D"));
        }
        if shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("embedding id count does not match shape"));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("embedding id {bad} out of range for table of {v}")));
        }
        let tv = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (o, &id) in out.chunks_mut(d).zip(ids) {
            if id != 0 {
                o.copy_from_slice(tv.row(id));
            }
        }
        let mut oshape = shape.to_vec();
        oshape.push(d);
        let t = Tensor::new(&oshape, out)?;
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::dim(format!("concat: {first:?} vs {s:?}")));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if start + len > d {
            return Err(Error::dim(format!("slice {start}+{len} beyond width {d}")));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Slice { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone();
        let t = Tensor::new(shape, t.into_data())?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    // ---------------------------------------------------------------------
    // Model-specific reductions

    /// Relative-position scores. `r[B, n, d]` holds one position query per
    /// token; `table[2L-1, d]` holds one vector per signed offset, centred at
    /// row `L-1`. Output `[B, n, n]` with `out[b,i,j] = r[b,i] · table[L-1+j-i]`.
    pub fn rel_scores(&mut self, r: Var, table: Var) -> Result<Var> {
        let (sr, st) = (self.shape(r).to_vec(), self.shape(table).to_vec());
        if sr.len() != 3 || st.len() != 2 || st[1] != sr[2] || st[0] % 2 == 0 {
            return Err(Error::dim(format!("rel_scores: r {sr:?}, table {st:?}")));
        }
        let (batch, n, d) = (sr[0], sr[1], sr[2]);
        let center = (st[0] - 1) / 2;
        if n > center + 1 {
            return Err(Error::dim(format!(
                "sequence length {n} exceeds relative table range (max {})",
                center + 1
            )));
        }
        let (rv, tv) = (self.value(r).data(), self.value(table).data());
        let mut out = vec![0.0; batch * n * n];
        for b in 0..batch {
            for i in 0..n {
                let q = &rv[(b * n + i) * d..(b * n + i + 1) * d];
                for j in 0..n {
                    let m = &tv[(center + j - i) * d..(center + j - i + 1) * d];
                    out[(b * n + i) * n + j] = dot(q, m);
                }
            }
        }
        let t = Tensor::new(&[batch, n, n], out)?;
        Ok(self.push(t, Op::RelScores { r, table }, &[r, table]))
    }

    /// Per-channel maximum over valid positions of `h[B, n, C]`; ties go to
    /// the lowest position.
    pub fn max_pool_seq(&mut self, h: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(h).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::dim(format!("max_pool_seq: h {s:?}, mask {}", mask.len())));
        }
        let (batch, n, c) = (s[0], s[1], s[2]);
        let hv = self.value(h).data();
        let mut out = vec![0.0; batch * c];
        let mut argmax = vec![0; batch * c];
        for b in 0..batch {
            let valid: Vec<usize> = (0..n).filter(|&i| mask[b * n + i]).collect();
            if valid.is_empty() {
                return Err(Error::Degenerate(format!("max pool over empty sequence {b}")));
            }
            for ch in 0..c {
                let mut best = valid[0];
                for &i in &valid[1..] {
                    if hv[(b * n + i) * c + ch] > hv[(b * n + best) * c + ch] {
                        best = i;
                    }
                }
                out[b * c + ch] = hv[(b * n + best) * c + ch];
                argmax[b * c + ch] = (b * n + best) * c + ch;
            }
        }
        let t = Tensor::new(&[batch, c], out)?;
        Ok(self.push(t, Op::MaxPool { h, argmax }, &[h]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits[B, C])`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross_entropy: logits {s:?} for {} labels",
                labels.len()
            )));
        }
        let (batch, classes) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for b in 0..batch {
            let row = &lv[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[labels[b]];
            for j in 0..classes {
                probs[b * classes + j] = (row[j] - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / batch as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(t, Op::Sum { x }, &[x])
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Backward

    /// Propagate d(loss)/d(node) from a scalar `loss` back to every leaf.
    /// The tape is consumed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        let mut params = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if let Some(p) = node.param {
                    params.insert(p, idx);
                }
                leaves.insert(idx, g);
                continue;
            }
            let mut contribs = self.local_grads(idx, &g);
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    for (_, c) in contribs.iter_mut() {
                        c.iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            for (input, c) in contribs {
                if !self.requires(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.numel() / k.max(1);
                let mut out_a = Vec::new();
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(g, &transpose(bv.data(), k, n), &mut da, m, n, k);
                    out_a.push((*a, da));
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(&transpose(av.data(), m, k), g, &mut db, k, m, n);
                    out_a.push((*b, db));
                }
                out_a
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let batch = sa[0];
                let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
                let (m, n) = (out.shape()[1], out.shape()[2]);
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for bi in 0..batch {
                    let ga = &g[bi * m * n..(bi + 1) * m * n];
                    let a_s = &av.data()[bi * asz..(bi + 1) * asz];
                    let b_s = &bv.data()[bi * bsz..(bi + 1) * bsz];
                    let a_shape = (sa[1], sa[2]);
                    let b_shape = (sb[1], sb[2]);
                    let da_s = &mut da[bi * asz..(bi + 1) * asz];
                    if *ta {
                        matmul_t(b_s, b_shape, *tb, ga, (m, n), true, da_s);
                    } else {
                        matmul_t(ga, (m, n), false, b_s, b_shape, !*tb, da_s);
                    }
                    let db_s = &mut db[bi * bsz..(bi + 1) * bsz];
                    if *tb {
                        matmul_t(ga, (m, n), true, a_s, a_shape, *ta, db_s);
                    } else {
                        matmul_t(a_s, a_shape, !*ta, ga, (m, n), false, db_s);
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias { x, bias } => {
                let d = out.cols();
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::AddBroadcast { x, y } => {
                let s = out.shape();
                let (n, d) = (s[1], s[2]);
                let mut dy = vec![0.0; s[0] * d];
                for (r, row) in g.chunks(d).enumerate() {
                    let b = r / n;
                    dy[b * d..(b + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, v)| *a += v);
                }
                vec![(*x, g.to_vec()), (*y, dy)]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, zip_map(g, bv, |x, y| x * y)),
                    (*b, zip_map(g, av, |x, y| x * y)),
                ]
            }
            Op::Scale { x, c } => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::MaskRows { x, mask } => {
                let d = out.cols();
                let mut dx = g.to_vec();
                for (row, &keep) in dx.chunks_mut(d).zip(mask) {
                    if !keep {
                        row.fill(0.0);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Tanh { x } => vec![(*x, zip_map(g, out.data(), |gv, y| gv * (1.0 - y * y)))],
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                vec![(*x, zip_map(g, xv, |gv, v| if v > 0.0 { gv } else { 0.0 }))]
            }
            Op::Leaky { x, slopes } => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .enumerate()
                    .map(|(i, (gv, v))| if *v >= 0.0 { *gv } else { gv * slopes[i % slopes.len()] })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Dropout { x, scale } => vec![(*x, zip_map(g, scale, |a, s| a * s))],
            Op::Softmax { x } => {
                let k = out.cols();
                let mut dx = vec![0.0; g.len()];
                for ((drow, grow), yrow) in dx
                    .chunks_mut(k)
                    .zip(g.chunks(k))
                    .zip(out.data().chunks(k))
                {
                    let s = dot(grow, yrow);
                    for j in 0..k {
                        drow[j] = yrow[j] * (grow[j] - s);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = out.cols();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_g = 0.0;
                    let mut sum_gh = 0.0;
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let gx = gr[j] * gam[j];
                        sum_g += gx;
                        sum_gh += gx * hr[j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let gx = gr[j] * gam[j];
                        dx[r * d + j] = inv / df * (df * gx - sum_g - hr[j] * sum_gh);
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbeta)]
            }
            Op::BatchNorm { x, gamma, beta, mask, xhat, inv_std, training } => {
                let c = out.cols();
                let gam = self.value(*gamma).data();
                let rows = mask.len();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut dg = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut sum_gxh = vec![0.0; c];
                for r in (0..rows).filter(|&r| mask[r]) {
                    for j in 0..c {
                        let gv = g[r * c + j];
                        let h = xhat[r * c + j];
                        dg[j] += gv * h;
                        dbeta[j] += gv;
                        sum_gx[j] += gv * gam[j];
                        sum_gxh[j] += gv * gam[j] * h;
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for r in (0..rows).filter(|&r| mask[r]) {
                    for j in 0..c {
                        let gx = g[r * c + j] * gam[j];
                        dx[r * c + j] = if *training {
                            inv_std[j] / count
                                * (count * gx - sum_gx[j] - xhat[r * c + j] * sum_gxh[j])
                        } else {
                            gx * inv_std[j]
                        };
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbeta)]
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    if id != 0 {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, v)| *a += v);
                    }
                }
                vec![(*table, dt)]
            }
            Op::Concat { parts } => {
                let width = out.cols();
                let rows = out.rows();
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                    }
                    offset += w;
                    res.push((p, dp));
                }
                res
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let len = out.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (r, row) in g.chunks(len).enumerate() {
                    dx[r * d + start..r * d + start + len].copy_from_slice(row);
                }
                vec![(*x, dx)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::RelScores { r, table } => {
                let (rv, tv) = (self.value(*r), self.value(*table));
                let s = rv.shape();
                let (batch, n, d) = (s[0], s[1], s[2]);
                let center = (tv.shape()[0] - 1) / 2;
                let mut dr = vec![0.0; rv.numel()];
                let mut dt = vec![0.0; tv.numel()];
                for b in 0..batch {
                    for i in 0..n {
                        let qi = (b * n + i) * d;
                        for j in 0..n {
                            let gv = g[(b * n + i) * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let mi = (center + j - i) * d;
                            for k in 0..d {
                                dr[qi + k] += gv * tv.data()[mi + k];
                                dt[mi + k] += gv * rv.data()[qi + k];
                            }
                        }
                    }
                }
                vec![(*r, dr), (*table, dt)]
            }
            Op::MaxPool { h, argmax } => {
                let mut dh = vec![0.0; self.value(*h).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    dh[src] += gv;
                }
                vec![(*h, dh)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &l) in labels.iter().enumerate() {
                    dl[b * classes + l] -= scale;
                }
                vec![(*logits, dl)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.value(*x).numel()])],
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out[m, n] += a[m, k] · b[k, n]`, row-major.
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

/// `out += op(a) · op(b)` where `op` transposes when the flag is set and the
/// shape tuples describe the stored (untransposed) layout.
fn matmul_t(
    a: &[f64],
    a_shape: (usize, usize),
    ta: bool,
    b: &[f64],
    b_shape: (usize, usize),
    tb: bool,
    out: &mut [f64],
) {
    let (m, k) = if ta { (a_shape.1, a_shape.0) } else { a_shape };
    let n = if tb { b_shape.0 } else { b_shape.1 };
    let a_buf;
    let a_use = if ta {
        a_buf = transpose(a, a_shape.0, a_shape.1);
        &a_buf[..]
    } else {
        a
    };
    let b_buf;
    let b_use = if tb {
        b_buf = transpose(b, b_shape.0, b_shape.1);
        &b_buf[..]
    } else {
        b
    };
    gemm(a_use, b_use, out, m, k, n);
}
