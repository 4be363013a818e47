//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! The tape records every differentiable operation during the forward pass
//! and replays them in reverse on [`Tape::backward`]. The op set is exactly
//! what the encoder and the contrastive losses need: 2-D matmul, per-row
//! normalization, rotary rotation, masked/stable softmax, reductions, and a
//! handful of fused scalar ops for the loss head. No broadcasting beyond
//! per-row gains.
//!
//! Gradients accumulate: calling `backward` twice without [`Tape::zero_grad`]
//! adds the second pass into the first, which is the contract optimizer loops
//! rely on.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Dense tensor: row-major data plus explicit shape. A scalar has shape `[]`
/// and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating that every extent is positive and that
    /// `product(shape) == data.len()`.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape)
    }

    /// Mark this tensor as a differentiation leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor on a tape. Only valid for the tape that minted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    MulElem { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    DivScalar { x: TensorId, denom: f64 },
    Gather { table: TensorId, ids: Vec<usize> },
    SliceCols { x: TensorId, start: usize, len: usize },
    ConcatCols { xs: Vec<TensorId> },
    Rope { x: TensorId, base: f64 },
    RmsNorm { x: TensorId, gain: TensorId, eps: f64 },
    Softmax { x: TensorId, axis: usize },
    CausalSoftmaxRows { x: TensorId },
    Silu { x: TensorId },
    MeanAxis { x: TensorId, axis: usize },
    SumAll { x: TensorId },
    StackScalars { xs: Vec<TensorId> },
    NegLogSoftmax { logits: TensorId, target: usize },
    CosineSim { u: TensorId, v: TensorId },
}

struct Node {
    tensor: Tensor,
    op: Op,
    // True when a requires_grad leaf is reachable from this node.
    track: bool,
}

/// Reverse-mode tape. Single-threaded: build the graph, call `backward` on a
/// scalar, read gradients off the nodes.
pub struct Tape {
    nodes: Vec<Node>,
    validate: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            validate: false,
        }
    }

    /// A tape that checks every produced tensor for NaN/Inf and fails fast.
    /// Tests run validated; training loops skip the check for throughput.
    pub fn validated() -> Self {
        Tape {
            nodes: Vec::new(),
            validate: true,
        }
    }

    pub fn set_validation(&mut self, on: bool) {
        self.validate = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Insert a leaf tensor.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<TensorId> {
        let track = tensor.requires_grad;
        self.push(tensor, Op::Leaf, track)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(Tensor::new(data, shape)?)
    }

    /// Insert a differentiable parameter leaf.
    pub fn param(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(Tensor::new(data, shape)?.with_grad())
    }

    fn push(&mut self, tensor: Tensor, op: Op, track: bool) -> Result<TensorId> {
        if self.validate && !tensor.all_finite() {
            return Err(Error::NonFinite(format!(
                "non-finite value in tensor of shape {:?}",
                tensor.shape()
            )));
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op, track });
        Ok(id)
    }

    fn tracked(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].track)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension(format!(
                "matmul expects 2-D operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims differ: {sa:?} vs {sb:?}"
            )));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let track = self.tracked(&[a, b]);
        self.push(Tensor::new(out, vec![m, n])?, Op::Matmul { a, b }, track)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose expects 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.data(x), m, n);
        let track = self.tracked(&[x]);
        self.push(Tensor::new(out, vec![n, m])?, Op::Transpose { x }, track)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let track = self.tracked(&[a, b]);
        self.push(Tensor::new(out, shape)?, Op::Add { a, b }, track)
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul_elem", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let track = self.tracked(&[a, b]);
        self.push(Tensor::new(out, shape)?, Op::MulElem { a, b }, track)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let track = self.tracked(&[x]);
        self.push(Tensor::new(out, shape)?, Op::Scale { x, c }, track)
    }

    /// True elementwise division by a scalar. Unlike `scale(x, 1/c)` the
    /// result is rounded once, so `div_scalar(sims, tau)` is exactly
    /// `sim/tau` per element.
    pub fn div_scalar(&mut self, x: TensorId, denom: f64) -> Result<TensorId> {
        if denom == 0.0 {
            return Err(Error::Config("division by zero scalar".into()));
        }
        let out: Vec<f64> = self.data(x).iter().map(|v| v / denom).collect();
        let shape = self.shape(x).to_vec();
        let track = self.tracked(&[x]);
        self.push(Tensor::new(out, shape)?, Op::DivScalar { x, denom }, track)
    }

    /// Row lookup: `table[V×d]` gathered at `ids` -> `[len(ids)×d]`.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("gather expects 2-D table, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if ids.is_empty() {
            return Err(Error::EmptyInput("gather with empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!(
                "gather id {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        let data = self.data(table);
        for &i in ids {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let track = self.tracked(&[table]);
        self.push(
            Tensor::new(out, vec![ids.len(), d])?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            track,
        )
    }

    /// Column slice of a 2-D tensor: `x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("slice_cols expects 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        if len == 0 || start + len > n {
            return Err(Error::Dimension(format!(
                "slice_cols range {start}..{} out of bounds for {n} columns",
                start + len
            )));
        }
        let data = self.data(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&data[r * n + start..r * n + start + len]);
        }
        let track = self.tracked(&[x]);
        self.push(
            Tensor::new(out, vec![m, len])?,
            Op::SliceCols { x, start, len },
            track,
        )
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("concat_cols of zero tensors".into()));
        }
        let m = self.shape(xs[0])[0];
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != m {
                return Err(Error::Dimension(format!(
                    "concat_cols expects 2-D with {m} rows, got {s:?}"
                )));
            }
        }
        let total: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &x in xs {
                let n = self.shape(x)[1];
                out.extend_from_slice(&self.data(x)[r * n..(r + 1) * n]);
            }
        }
        let track = self.tracked(xs);
        self.push(
            Tensor::new(out, vec![m, total])?,
            Op::ConcatCols { xs: xs.to_vec() },
            track,
        )
    }

    /// Rotary position rotation on `[L×d]` with even `d`: adjacent pairs
    /// `(2i, 2i+1)` of row `pos` are rotated by `pos · base^(-2i/d)`.
    pub fn rope_apply(&mut self, x: TensorId, base: f64) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("rope_apply expects 2-D, got {s:?}")));
        }
        let (l, d) = (s[0], s[1]);
        if d % 2 != 0 {
            return Err(Error::Config(format!(
                "rope_apply requires an even head dimension, got {d}"
            )));
        }
        if !(base > 0.0) {
            return Err(Error::Config(format!("rope base must be positive, got {base}")));
        }
        let data = self.data(x);
        let mut out = vec![0.0; l * d];
        for pos in 0..l {
            for i in 0..d / 2 {
                let angle = rope_angle(pos, i, d, base);
                let (sin, cos) = (math::sin(angle), math::cos(angle));
                let x0 = data[pos * d + 2 * i];
                let x1 = data[pos * d + 2 * i + 1];
                out[pos * d + 2 * i] = x0 * cos - x1 * sin;
                out[pos * d + 2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
        let track = self.tracked(&[x]);
        self.push(Tensor::new(out, vec![l, d])?, Op::Rope { x, base }, track)
    }

    /// Per-row RMS normalization with learned gain over the last axis:
    /// `y = x / sqrt(mean(x²) + eps) · gain`. Accepts 1-D `[d]` or 2-D `[L×d]`.
    pub fn rms_norm(&mut self, x: TensorId, gain: TensorId, eps: f64) -> Result<TensorId> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("rms_norm eps must be > 0, got {eps}")));
        }
        let (rows, d) = self.rows_and_last_dim("rms_norm", x)?;
        let gs = self.shape(gain);
        if gs != [d] {
            return Err(Error::Dimension(format!(
                "rms_norm gain must have shape [{d}], got {gs:?}"
            )));
        }
        let data = self.data(x);
        let gdata = self.data(gain);
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / math::sqrt(ms + eps);
            for j in 0..d {
                out[r * d + j] = row[j] * inv * gdata[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let track = self.tracked(&[x, gain]);
        self.push(Tensor::new(out, shape)?, Op::RmsNorm { x, gain, eps }, track)
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn stable_softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} invalid for shape {s:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let data = self.data(x);
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for a in 0..len {
                    max = max.max(data[idx(a)]);
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let e = math::exp(data[idx(a)] - max);
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[idx(a)] /= sum;
                }
            }
        }
        let track = self.tracked(&[x]);
        self.push(Tensor::new(out, s)?, Op::Softmax { x, axis }, track)
    }

    /// Row-wise softmax on a square `[L×L]` score matrix where row `i`
    /// attends only to columns `j ≤ i`; masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Dimension(format!(
                "causal_softmax_rows expects square 2-D scores, got {s:?}"
            )));
        }
        let l = s[0];
        let data = self.data(x);
        let mut out = vec![0.0; l * l];
        for i in 0..l {
            let row = &data[i * l..i * l + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..=i {
                let e = math::exp(row[j] - max);
                out[i * l + j] = e;
                sum += e;
            }
            for j in 0..=i {
                out[i * l + j] /= sum;
            }
        }
        let track = self.tracked(&[x]);
        self.push(Tensor::new(out, vec![l, l])?, Op::CausalSoftmaxRows { x }, track)
    }

    /// SiLU activation `x · sigmoid(x)`.
    pub fn silu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let track = self.tracked(&[x]);
        self.push(Tensor::new(out, shape)?, Op::Silu { x }, track)
    }

    /// Arithmetic mean along `axis`; the axis is removed (a 1-D input yields
    /// a scalar).
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Dimension(format!(
                "mean axis {axis} invalid for shape {s:?}"
            )));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let data = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut sum = 0.0;
                for a in 0..len {
                    sum += data[(o * len + a) * inner + i];
                }
                out[o * inner + i] = sum / len as f64;
            }
        }
        let mut out_shape = s.clone();
        out_shape.remove(axis);
        let track = self.tracked(&[x]);
        self.push(Tensor::new(out, out_shape)?, Op::MeanAxis { x, axis }, track)
    }

    /// Sum of all elements -> scalar.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        let track = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll { x }, track)
    }

    /// Stack scalar nodes into a 1-D vector.
    pub fn stack_scalars(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("stack_scalars of zero inputs".into()));
        }
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            if !self.tensor(x).is_scalar() {
                return Err(Error::Contract(format!(
                    "stack_scalars expects scalars, got shape {:?}",
                    self.shape(x)
                )));
            }
            out.push(self.data(x)[0]);
        }
        let track = self.tracked(xs);
        self.push(
            Tensor::new(out, vec![xs.len()])?,
            Op::StackScalars { xs: xs.to_vec() },
            track,
        )
    }

    /// `-log softmax(logits)[target]` with max subtraction and an `ln(1+x)`
    /// tail so losses far below 1 keep full relative precision.
    pub fn neg_log_softmax(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let s = self.shape(logits);
        if s.len() != 1 {
            return Err(Error::Dimension(format!(
                "neg_log_softmax expects 1-D logits, got {s:?}"
            )));
        }
        let n = s[0];
        if target >= n {
            return Err(Error::Contract(format!(
                "target index {target} out of range for {n} logits"
            )));
        }
        let data = self.data(logits);
        let loss = neg_log_softmax_value(data, target);
        let track = self.tracked(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::NegLogSoftmax { logits, target },
            track,
        )
    }

    /// Cosine similarity of two 1-D vectors -> scalar in `[-1, 1]`.
    pub fn cosine_sim(&mut self, u: TensorId, v: TensorId) -> Result<TensorId> {
        let (su, sv) = (self.shape(u), self.shape(v));
        if su.len() != 1 || su != sv {
            return Err(Error::Dimension(format!(
                "cosine_sim expects equal-length 1-D vectors, got {su:?} and {sv:?}"
            )));
        }
        let c = cosine(self.data(u), self.data(v))?;
        let track = self.tracked(&[u, v]);
        self.push(Tensor::scalar(c), Op::CosineSim { u, v }, track)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar output. Adjoints are accumulated
    /// into each tracked node's persistent `grad`, so repeated calls add up
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, output: TensorId) -> Result<()> {
        if !self.tensor(output).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            if !self.nodes[i].track {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (m, k, nn) = (sa[0], sa[1], sb[1]);
                    if self.nodes[a.0].track {
                        // dA[i,p] = Σ_j G[i,j]·B[p,j]
                        let bd = self.data(b);
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..nn {
                                    s += g[r * nn + j] * bd[p * nn + j];
                                }
                                da[r * k + p] = s;
                            }
                        }
                        accumulate(&mut adj[a.0], &da);
                    }
                    if self.nodes[b.0].track {
                        // dB[p,j] = Σ_i A[i,p]·G[i,j]
                        let ad = self.data(a);
                        let mut db = vec![0.0; k * nn];
                        for r in 0..m {
                            for p in 0..k {
                                let a_rp = ad[r * k + p];
                                if a_rp == 0.0 {
                                    continue;
                                }
                                for j in 0..nn {
                                    db[p * nn + j] += a_rp * g[r * nn + j];
                                }
                            }
                        }
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Transpose { x } => {
                    let s = self.shape(x).to_vec();
                    let (m, nn) = (s[0], s[1]);
                    // grad has shape [n×m]; transpose it back.
                    let gt = transpose_raw(&g, nn, m);
                    accumulate(&mut adj[x.0], &gt);
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].track {
                        accumulate(&mut adj[a.0], &g);
                    }
                    if self.nodes[b.0].track {
                        accumulate(&mut adj[b.0], &g);
                    }
                }
                Op::MulElem { a, b } => {
                    if self.nodes[a.0].track {
                        let da: Vec<f64> =
                            g.iter().zip(self.data(b)).map(|(gv, bv)| gv * bv).collect();
                        accumulate(&mut adj[a.0], &da);
                    }
                    if self.nodes[b.0].track {
                        let db: Vec<f64> =
                            g.iter().zip(self.data(a)).map(|(gv, av)| gv * av).collect();
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::DivScalar { x, denom } => {
                    let dx: Vec<f64> = g.iter().map(|gv| gv / denom).collect();
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::Gather { table, ids } => {
                    let d = self.shape(table)[1];
                    let numel = self.tensor(table).numel();
                    let dt = adj[table.0].get_or_insert_with(|| vec![0.0; numel]);
                    for (t, &row) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[row * d + j] += g[t * d + j];
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let s = self.shape(x).to_vec();
                    let (m, nn) = (s[0], s[1]);
                    let numel = m * nn;
                    let dx = adj[x.0].get_or_insert_with(|| vec![0.0; numel]);
                    for r in 0..m {
                        for j in 0..len {
                            dx[r * nn + start + j] += g[r * len + j];
                        }
                    }
                }
                Op::ConcatCols { xs } => {
                    let m = self.shape(xs[0])[0];
                    let total: usize = xs.iter().map(|&x| self.shape(x)[1]).sum();
                    let mut col = 0;
                    for &x in &xs {
                        let nn = self.shape(x)[1];
                        if self.nodes[x.0].track {
                            let mut dx = vec![0.0; m * nn];
                            for r in 0..m {
                                dx[r * nn..(r + 1) * nn]
                                    .copy_from_slice(&g[r * total + col..r * total + col + nn]);
                            }
                            accumulate(&mut adj[x.0], &dx);
                        }
                        col += nn;
                    }
                }
                Op::Rope { x, base } => {
                    let s = self.shape(x).to_vec();
                    let (l, d) = (s[0], s[1]);
                    let mut dx = vec![0.0; l * d];
                    for pos in 0..l {
                        for p in 0..d / 2 {
                            let angle = rope_angle(pos, p, d, base);
                            let (sin, cos) = (math::sin(angle), math::cos(angle));
                            let g0 = g[pos * d + 2 * p];
                            let g1 = g[pos * d + 2 * p + 1];
                            // Inverse rotation.
                            dx[pos * d + 2 * p] = g0 * cos + g1 * sin;
                            dx[pos * d + 2 * p + 1] = -g0 * sin + g1 * cos;
                        }
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::RmsNorm { x, gain, eps } => {
                    let s = self.shape(x).to_vec();
                    let d = *s.last().expect("rms_norm input is at least 1-D");
                    let rows = self.tensor(x).numel() / d;
                    let xd = self.data(x);
                    let gd = self.data(gain);
                    let mut dx = vec![0.0; rows * d];
                    let mut dgain = vec![0.0; d];
                    for r in 0..rows {
                        let row = &xd[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let rms = math::sqrt(ms + eps);
                        let inv = 1.0 / rms;
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += grow[j] * gd[j] * row[j];
                            dgain[j] += grow[j] * row[j] * inv;
                        }
                        let coef = dot / (d as f64 * rms * rms * rms);
                        for j in 0..d {
                            dx[r * d + j] = grow[j] * gd[j] * inv - row[j] * coef;
                        }
                    }
                    if self.nodes[x.0].track {
                        accumulate(&mut adj[x.0], &dx);
                    }
                    if self.nodes[gain.0].track {
                        accumulate(&mut adj[gain.0], &dgain);
                    }
                }
                Op::Softmax { x, axis } => {
                    let s = self.shape(x).to_vec();
                    let (outer, len, inner) = axis_split(&s, axis);
                    let out = self.data(TensorId(i));
                    let mut dx = vec![0.0; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + ii;
                            let mut dot = 0.0;
                            for a in 0..len {
                                dot += g[idx(a)] * out[idx(a)];
                            }
                            for a in 0..len {
                                dx[idx(a)] = out[idx(a)] * (g[idx(a)] - dot);
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::CausalSoftmaxRows { x } => {
                    let l = self.shape(x)[0];
                    let out = self.data(TensorId(i));
                    let mut dx = vec![0.0; l * l];
                    for r in 0..l {
                        let mut dot = 0.0;
                        for j in 0..=r {
                            dot += g[r * l + j] * out[r * l + j];
                        }
                        for j in 0..=r {
                            dx[r * l + j] = out[r * l + j] * (g[r * l + j] - dot);
                        }
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::Silu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(gv, &xv)| {
                            let s = sigmoid(xv);
                            gv * s * (1.0 + xv * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::MeanAxis { x, axis } => {
                    let s = self.shape(x).to_vec();
                    let (outer, len, inner) = axis_split(&s, axis);
                    let mut dx = vec![0.0; self.tensor(x).numel()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let gv = g[o * inner + ii] / len as f64;
                            for a in 0..len {
                                dx[(o * len + a) * inner + ii] = gv;
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::SumAll { x } => {
                    let dx = vec![g[0]; self.tensor(x).numel()];
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::StackScalars { xs } => {
                    for (j, &x) in xs.iter().enumerate() {
                        if self.nodes[x.0].track {
                            accumulate(&mut adj[x.0], &[g[j]]);
                        }
                    }
                }
                Op::NegLogSoftmax { logits, target } => {
                    let data = self.data(logits);
                    let nn = data.len();
                    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut exps = vec![0.0; nn];
                    let mut sum = 0.0;
                    for j in 0..nn {
                        exps[j] = math::exp(data[j] - max);
                        sum += exps[j];
                    }
                    let mut dx = vec![0.0; nn];
                    for j in 0..nn {
                        let p = exps[j] / sum;
                        dx[j] = g[0] * (p - if j == target { 1.0 } else { 0.0 });
                    }
                    accumulate(&mut adj[logits.0], &dx);
                }
                Op::CosineSim { u, v } => {
                    let ud = self.data(u);
                    let vd = self.data(v);
                    let nu = norm(ud);
                    let nv = norm(vd);
                    let c = dot(ud, vd) / (nu * nv);
                    if self.nodes[u.0].track {
                        let du: Vec<f64> = ud
                            .iter()
                            .zip(vd)
                            .map(|(&uj, &vj)| g[0] * (vj / (nu * nv) - c * uj / (nu * nu)))
                            .collect();
                        accumulate(&mut adj[u.0], &du);
                    }
                    if self.nodes[v.0].track {
                        let dv: Vec<f64> = vd
                            .iter()
                            .zip(ud)
                            .map(|(&vj, &uj)| g[0] * (uj / (nu * nv) - c * vj / (nv * nv)))
                            .collect();
                        accumulate(&mut adj[v.0], &dv);
                    }
                }
            }
            // Fold this node's adjoint into its persistent gradient.
            let node = &mut self.nodes[i];
            let grad = node
                .tensor
                .grad
                .get_or_insert_with(|| vec![0.0; node.tensor.data.len()]);
            for (acc, gv) in grad.iter_mut().zip(&g) {
                *acc += gv;
            }
        }
        Ok(())
    }

    /// Reset all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn same_shape(&self, what: &str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn rows_and_last_dim(&self, what: &str, x: TensorId) -> Result<(usize, usize)> {
        let s = self.shape(x);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Dimension(format!(
                "{what} expects 1-D or 2-D input, got {s:?}"
            ))),
        }
    }
}

// ── Raw kernels and helpers ─────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += a_ip * brow[j];
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Vec<f64>>, src: &[f64]) {
    match slot {
        Some(dst) => {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        None => *slot = Some(src.to_vec()),
    }
}

fn rope_angle(pos: usize, pair: usize, d: usize, base: f64) -> f64 {
    let inv_freq = math::powf(base, -((2 * pair) as f64) / d as f64);
    pos as f64 * inv_freq
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

/// `-log softmax(x)[target]` at the value level, shared by the tape op and
/// the loss helpers. Keeps relative precision for losses near zero by
/// summing the non-max terms under `ln(1+·)`.
pub fn neg_log_softmax_value(logits: &[f64], target: usize) -> f64 {
    let mut max_idx = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > logits[max_idx] {
            max_idx = j;
        }
    }
    let max = logits[max_idx];
    let mut rest = 0.0;
    for (j, &v) in logits.iter().enumerate() {
        if j != max_idx {
            rest += math::exp(v - max);
        }
    }
    // (max - x_t) + ln(1 + rest), not lse - x_t: keeps losses far below 1
    // at full relative precision instead of being absorbed into max.
    (max - logits[target]) + math::ln_1p(rest)
}

/// Plain (non-tape) cosine similarity; the tape op and the mining/eval
/// paths share this definition.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput("cosine of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Central finite differences and error metrics used as the gradient oracle
/// throughout the test suites. Forward-only: independent of the backward
/// implementation it checks.
pub mod gradcheck {
    use alloc::vec::Vec;

    /// Spec step for double-precision gradient checks.
    pub const FD_STEP: f64 = 1e-5;

    /// Central finite-difference gradient of `f` at `x`.
    pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], step: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(x.len());
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let orig = probe[i];
            probe[i] = orig + step;
            let fp = f(&probe);
            probe[i] = orig - step;
            let fm = f(&probe);
            probe[i] = orig;
            grad.push((fp - fm) / (2.0 * step));
        }
        grad
    }

    /// Relative error with an absolute floor of 1: plain relative error for
    /// gradients above unit magnitude, absolute error below it.
    pub fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1.0)
    }

    pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{central_diff, max_rel_err, FD_STEP};
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn tensor_validates_shape_and_extents() {
        assert!(Tensor::new(vec![1.0, 2.0], vec![2]).is_ok());
        assert!(matches!(
            Tensor::new(vec![1.0, 2.0], vec![3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![], vec![0]),
            Err(Error::Dimension(_))
        ));
        // Scalar: empty shape, one element.
        assert!(Tensor::new(vec![1.0], vec![]).is_ok());
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut t = Tape::validated();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let ia = t.matmul(i2, a).unwrap();
        assert_eq!(t.data(ia), &[1.0, 2.0, 3.0, 4.0]);
        let ai = t.matmul(a, i2).unwrap();
        assert_eq!(t.data(ai), &[1.0, 2.0, 3.0, 4.0]);

        let p = t.constant(vec![1.0, 0.0, 0.0, 0.0], vec![2, 2]).unwrap();
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]).unwrap();
        let pb = t.matmul(p, b).unwrap();
        assert_eq!(t.data(pb), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        let b = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        assert!(matches!(t.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(11);
        let a0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b0: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |a: &[f64], b: &[f64]| -> f64 {
            let mut t = Tape::new();
            let ta = t.constant(a.to_vec(), vec![3, 4]).unwrap();
            let tb = t.constant(b.to_vec(), vec![4, 2]).unwrap();
            let c = t.matmul(ta, tb).unwrap();
            let s = t.sum_all(c).unwrap();
            t.data(s)[0]
        };

        let mut t = Tape::new();
        let ta = t.param(a0.clone(), vec![3, 4]).unwrap();
        let tb = t.param(b0.clone(), vec![4, 2]).unwrap();
        let c = t.matmul(ta, tb).unwrap();
        let s = t.sum_all(c).unwrap();
        t.backward(s).unwrap();

        let na = central_diff(|a| eval(a, &b0), &a0, FD_STEP);
        let nb = central_diff(|b| eval(&a0, b), &b0, FD_STEP);
        assert!(max_rel_err(t.grad(ta).unwrap(), &na) <= 1e-6);
        assert!(max_rel_err(t.grad(tb).unwrap(), &nb) <= 1e-6);
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let mut t = Tape::validated();
        let x = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let s = t.stable_softmax(x, 0).unwrap();
        assert_close(t.data(s), &[0.5, 0.5], 1e-15);

        let y = t.constant(vec![1000.0, 0.0], vec![2]).unwrap();
        let sy = t.stable_softmax(y, 0).unwrap();
        let out = t.data(sy);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_oracle() {
        // Oracle: direct exp/sum evaluation, frozen.
        let x = [1.0f64, 2.0, 3.0];
        let exps: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        let expected: Vec<f64> = exps.iter().map(|e| e / total).collect();
        assert_close(
            &expected,
            &[
                0.09003057317038046,
                0.24472847105479764,
                0.6652409557748218,
            ],
            1e-15,
        );

        let mut t = Tape::new();
        let xs = t.constant(x.to_vec(), vec![3]).unwrap();
        let s = t.stable_softmax(xs, 0).unwrap();
        assert_close(t.data(s), &expected, 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_invalid_axis_errors() {
        let mut rng = seeded_rng(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(data, vec![3, 4]).unwrap();
        let s = t.stable_softmax(x, 1).unwrap();
        for r in 0..3 {
            let row_sum: f64 = t.data(s)[r * 4..(r + 1) * 4].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
            assert!(t.data(s)[r * 4..(r + 1) * 4].iter().all(|&v| v >= 0.0));
        }
        assert!(matches!(t.stable_softmax(x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn rms_norm_examples() {
        let mut t = Tape::validated();
        let x = t.constant(vec![2.0, 2.0], vec![2]).unwrap();
        let g = t.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let y = t.rms_norm(x, g, 1e-12).unwrap();
        assert_close(t.data(y), &[1.0, 1.0], 1e-6);

        let z = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let yz = t.rms_norm(z, g, 1e-6).unwrap();
        assert_eq!(t.data(yz), &[0.0, 0.0]);

        assert!(matches!(t.rms_norm(x, g, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn rope_position_zero_is_identity_and_norms_preserved() {
        let mut rng = seeded_rng(9);
        let data: Vec<f64> = (0..5 * 6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(data.clone(), vec![5, 6]).unwrap();
        let y = t.rope_apply(x, 10_000.0).unwrap();
        // Row 0 (position 0) unchanged.
        assert_close(&t.data(y)[..6], &data[..6], 1e-15);
        // Pair norms preserved everywhere.
        for pos in 0..5 {
            for p in 0..3 {
                let x0 = data[pos * 6 + 2 * p];
                let x1 = data[pos * 6 + 2 * p + 1];
                let y0 = t.data(y)[pos * 6 + 2 * p];
                let y1 = t.data(y)[pos * 6 + 2 * p + 1];
                let nin = (x0 * x0 + x1 * x1).sqrt();
                let nout = (y0 * y0 + y1 * y1).sqrt();
                assert!((nin - nout).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rope_matches_direct_sincos_oracle() {
        // Oracle: direct sin/cos recomputation for L=3, d=4, base=10000.
        let data: Vec<f64> = (0..12).map(|i| (i as f64) * 0.25 - 1.0).collect();
        let base: f64 = 10_000.0;
        let mut expected = vec![0.0; 12];
        for pos in 0..3usize {
            for pair in 0..2usize {
                let angle = pos as f64 * base.powf(-((2 * pair) as f64) / 4.0);
                let (s, c) = angle.sin_cos();
                let x0 = data[pos * 4 + 2 * pair];
                let x1 = data[pos * 4 + 2 * pair + 1];
                expected[pos * 4 + 2 * pair] = x0 * c - x1 * s;
                expected[pos * 4 + 2 * pair + 1] = x0 * s + x1 * c;
            }
        }
        let mut t = Tape::new();
        let x = t.constant(data, vec![3, 4]).unwrap();
        let y = t.rope_apply(x, base).unwrap();
        assert_close(t.data(y), &expected, 1e-12);

        let odd = t.constant(vec![0.0; 9], vec![3, 3]).unwrap();
        assert!(matches!(t.rope_apply(odd, base), Err(Error::Config(_))));
    }

    #[test]
    fn mean_axis_examples_and_gradient() {
        let mut t = Tape::new();
        let x = t
            .constant(vec![1.0, 3.0, 3.0, 5.0], vec![2, 2])
            .unwrap();
        let m = t.mean_axis(x, 0).unwrap();
        assert_eq!(t.data(m), &[2.0, 4.0]);
        assert_eq!(t.shape(m), &[2]);

        // Constant rows: mean equals the row.
        let c = t
            .constant(vec![7.0, -1.0, 7.0, -1.0, 7.0, -1.0], vec![3, 2])
            .unwrap();
        let mc = t.mean_axis(c, 0).unwrap();
        assert_eq!(t.data(mc), &[7.0, -1.0]);

        // Gradient of sum(mean(x, axis 0)) is exactly 1/L everywhere.
        let mut t2 = Tape::new();
        let p = t2
            .param(vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5], vec![3, 2])
            .unwrap();
        let mp = t2.mean_axis(p, 0).unwrap();
        let s = t2.sum_all(mp).unwrap();
        t2.backward(s).unwrap();
        assert_eq!(t2.grad(p).unwrap(), &[1.0 / 3.0; 6]);
    }

    #[test]
    fn cosine_sim_contracts() {
        let mut t = Tape::new();
        let u = t.constant(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let su = t.cosine_sim(u, u).unwrap();
        assert!((t.data(su)[0] - 1.0).abs() < 1e-15);

        let e1 = t.constant(vec![1.0, 0.0], vec![2]).unwrap();
        let e2 = t.constant(vec![0.0, 1.0], vec![2]).unwrap();
        let o = t.cosine_sim(e1, e2).unwrap();
        assert_eq!(t.data(o)[0], 0.0);

        let v = t.constant(vec![3.0, 6.0, 9.0], vec![3]).unwrap();
        let sv = t.cosine_sim(u, v).unwrap();
        assert!((t.data(sv)[0] - 1.0).abs() < 1e-15);

        let z = t.constant(vec![0.0, 0.0], vec![2]).unwrap();
        assert!(matches!(
            t.cosine_sim(e1, z),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn backward_identity_and_square_sum() {
        // y = x (via scale by 1): dy/dx = 1.
        let mut t = Tape::new();
        let x = t.param(vec![3.0], vec![]).unwrap();
        let y = t.scale(x, 1.0).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);

        // y = sum(x²) at x = [1, 2] -> grad [2, 4].
        let mut t2 = Tape::new();
        let p = t2.param(vec![1.0, 2.0], vec![2]).unwrap();
        let sq = t2.mul_elem(p, p).unwrap();
        let s = t2.sum_all(sq).unwrap();
        t2.backward(s).unwrap();
        assert_eq!(t2.grad(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0], vec![2]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0], vec![2]).unwrap();
        let sq = t.mul_elem(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn validation_flags_non_finite_values() {
        let mut t = Tape::validated();
        let huge = t.constant(vec![1e308, 1e308], vec![2]).unwrap();
        let one = t.constant(vec![1.0, 1.0], vec![2]).unwrap();
        let sum = t.add(huge, huge);
        assert!(matches!(sum, Err(Error::NonFinite(_))));
        let _ok = t.add(huge, one).unwrap();

        // Leaves are validated too.
        assert!(matches!(
            t.leaf(Tensor::new(vec![f64::NAN], vec![1]).unwrap()),
            Err(Error::NonFinite(_))
        ));

        // Unvalidated tapes let the same value pass.
        let mut raw = Tape::new();
        let h = raw.constant(vec![1e308, 1e308], vec![2]).unwrap();
        assert!(raw.add(h, h).is_ok());
    }

    /// Gradient check for every differentiable op at randomized inputs.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = seeded_rng(1234);
        // Each case: (name, dims of one flat param, closure building a scalar).
        type Builder = fn(&mut Tape, TensorId) -> TensorId;
        let cases: &[(&str, Vec<usize>, Builder)] = &[
            ("transpose", vec![3, 4], |t, x| {
                let y = t.transpose(x).unwrap();
                t.sum_all(y).unwrap()
            }),
            ("add", vec![2, 3], |t, x| {
                let y = t.add(x, x).unwrap();
                let z = t.mul_elem(y, y).unwrap();
                t.sum_all(z).unwrap()
            }),
            ("mul_elem", vec![2, 3], |t, x| {
                let y = t.mul_elem(x, x).unwrap();
                t.sum_all(y).unwrap()
            }),
            ("scale", vec![5], |t, x| {
                let y = t.scale(x, -2.5).unwrap();
                let z = t.mul_elem(y, y).unwrap();
                t.sum_all(z).unwrap()
            }),
            ("div_scalar", vec![5], |t, x| {
                let y = t.div_scalar(x, 0.7).unwrap();
                let s = t.stable_softmax(y, 0).unwrap();
                let z = t.mul_elem(s, s).unwrap();
                t.sum_all(z).unwrap()
            }),
            ("slice_concat", vec![3, 6], |t, x| {
                let a = t.slice_cols(x, 0, 2).unwrap();
                let b = t.slice_cols(x, 2, 4).unwrap();
                let c = t.concat_cols(&[b, a]).unwrap();
                let sq = t.mul_elem(c, c).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("rope", vec![4, 6], |t, x| {
                let y = t.rope_apply(x, 97.0).unwrap();
                let sq = t.mul_elem(y, y).unwrap();
                let w = t.scale(sq, 0.3).unwrap();
                let z = t.add(w, y).unwrap();
                t.sum_all(z).unwrap()
            }),
            ("softmax", vec![3, 4], |t, x| {
                let s = t.stable_softmax(x, 1).unwrap();
                let sq = t.mul_elem(s, s).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("softmax_axis0", vec![3, 4], |t, x| {
                let s = t.stable_softmax(x, 0).unwrap();
                let sq = t.mul_elem(s, s).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("causal_softmax", vec![4, 4], |t, x| {
                let s = t.causal_softmax_rows(x).unwrap();
                let sq = t.mul_elem(s, s).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("silu", vec![7], |t, x| {
                let y = t.silu(x).unwrap();
                t.sum_all(y).unwrap()
            }),
            ("mean_axis0", vec![3, 4], |t, x| {
                let m = t.mean_axis(x, 0).unwrap();
                let sq = t.mul_elem(m, m).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("mean_axis1", vec![3, 4], |t, x| {
                let m = t.mean_axis(x, 1).unwrap();
                let sq = t.mul_elem(m, m).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("neg_log_softmax", vec![5], |t, x| {
                t.neg_log_softmax(x, 2).unwrap()
            }),
            ("matmul_square", vec![3, 3], |t, x| {
                let y = t.matmul(x, x).unwrap();
                t.sum_all(y).unwrap()
            }),
            ("rms_norm_x", vec![2, 4], |t, x| {
                let g = t.constant(vec![0.5, 1.0, 1.5, 2.0], vec![4]).unwrap();
                let y = t.rms_norm(x, g, 1e-5).unwrap();
                let sq = t.mul_elem(y, y).unwrap();
                let z = t.add(sq, y).unwrap();
                t.sum_all(z).unwrap()
            }),
            ("rms_norm_gain", vec![4], |t, g| {
                let x = t
                    .constant(vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1, -2.2, 0.9], vec![2, 4])
                    .unwrap();
                let y = t.rms_norm(x, g, 1e-5).unwrap();
                let sq = t.mul_elem(y, y).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("gather", vec![4, 3], |t, table| {
                let y = t.gather_rows(table, &[2, 0, 2]).unwrap();
                let sq = t.mul_elem(y, y).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("stack_scalars", vec![3], |t, x| {
                let a = t.slice_cols_of_vec(x, 0);
                let b = t.slice_cols_of_vec(x, 1);
                let c = t.slice_cols_of_vec(x, 2);
                let stacked = t.stack_scalars(&[a, b, c]).unwrap();
                let sq = t.mul_elem(stacked, stacked).unwrap();
                t.sum_all(sq).unwrap()
            }),
            ("cosine_sim", vec![6], |t, x| {
                let u = t.constant(vec![0.4, -0.9, 1.3, 0.2, -0.5, 0.8], vec![6]).unwrap();
                t.cosine_sim(x, u).unwrap()
            }),
        ];

        for (name, shape, build) in cases {
            let numel: usize = shape.iter().product();
            let x0: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect();

            let mut t = Tape::new();
            let x = t.param(x0.clone(), shape.clone()).unwrap();
            let out = build(&mut t, x);
            t.backward(out).unwrap();
            let analytic = t.grad(x).unwrap().to_vec();

            let numeric = central_diff(
                |probe| {
                    let mut t = Tape::new();
                    let x = t.constant(probe.to_vec(), shape.clone()).unwrap();
                    let out = build(&mut t, x);
                    t.data(out)[0]
                },
                &x0,
                FD_STEP,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err <= 1e-6, "op {name}: max rel err {err}");
        }
    }
}

#[cfg(test)]
impl Tape {
    /// Test helper: view element `i` of a 1-D tensor as a scalar node.
    fn slice_cols_of_vec(&mut self, x: TensorId, i: usize) -> TensorId {
        let v = self.data(x)[i];
        let n = self.shape(x)[0];
        // Build via mean trick to stay differentiable: one-hot dot product.
        let mut onehot = vec![0.0; n];
        onehot[i] = n as f64;
        let oh = self.constant(onehot, vec![n]).unwrap();
        let prod = self.mul_elem(x, oh).unwrap();
        let m = self.mean_axis(prod, 0).unwrap();
        debug_assert!((self.data(m)[0] - v).abs() < 1e-12);
        m
    }
}
