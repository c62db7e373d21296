//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward`]
//! replays the nodes in reverse creation order (a reverse topological order,
//! since inputs always precede outputs) and accumulates gradients into the
//! leaves. Quantizer nodes carry a surrogate gradient rule instead of the
//! true (zero almost everywhere) derivative; see [`Op::FakeQuant`].

use crate::error::{Error, Result};
use crate::quant::{self, QuantExec, QuantizerState};
use crate::tensor::{
    broadcast_shape, broadcast_strides, matmul2d, matmul2d_bt, strides_for, transpose2d,
    BroadcastIter, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(pub(crate) usize);

/// Gradients keyed by caller-assigned parameter id.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, param_id: usize) -> Option<&Tensor> {
        self.grads.get(param_id).and_then(|g| g.as_ref())
    }

    pub fn insert(&mut self, param_id: usize, grad: Tensor) {
        if self.grads.len() <= param_id {
            self.grads.resize(param_id + 1, None);
        }
        self.grads[param_id] = Some(grad);
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|t| (i, t)))
    }

    pub fn has_non_finite(&self) -> bool {
        self.iter().any(|(_, g)| g.has_non_finite())
    }
}

/// Snapshot of the quantizer parameters a fake-quant node was executed with.
#[derive(Clone, Debug)]
pub struct FakeQuantSnap {
    pub alpha: f64,
    pub zero_point: f64,
    pub q_n: f64,
    pub q_p: f64,
    /// 1/sqrt(numel * q_p); scales the step-size gradient.
    pub grad_scale: f64,
    pub exec: QuantExec,
}

enum Op {
    Leaf { param: Option<usize> },
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    Neg(Value),
    Sqrt(Value),
    Gelu(Value),
    AddScalar(Value),
    MulScalar(Value, f64),
    Matmul(Value, Value),
    SumAxes { x: Value, axes: Vec<usize> },
    MeanAxes { x: Value, axes: Vec<usize> },
    SoftmaxLastDim(Value),
    CrossEntropy { logits: Value, labels: Vec<usize> },
    Reshape(Value),
    Permute { x: Value, perm: Vec<usize> },
    Concat { parts: Vec<Value>, axis: usize },
    SelectIndex { x: Value, axis: usize, index: usize },
    BroadcastTo(Value),
    ImagePatches { x: Value, patch: usize },
    FakeQuant { x: Value, alpha_param: Option<Value>, snap: FakeQuantSnap },
    RowNormalizeL2(Value),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Sqrt(..) => "sqrt",
            Op::Gelu(..) => "gelu",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Matmul(..) => "matmul",
            Op::SumAxes { .. } => "sum_axes",
            Op::MeanAxes { .. } => "mean_axes",
            Op::SoftmaxLastDim(..) => "softmax_lastdim",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::SelectIndex { .. } => "select_index",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::ImagePatches { .. } => "image_patches",
            Op::FakeQuant { .. } => "fake_quant",
            Op::RowNormalizeL2(..) => "row_normalize_l2",
        }
    }
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

#[derive(Clone, Debug)]
pub struct TapeOptions {
    /// Scan every op output for NaN/Inf. On by default; timed runs switch it
    /// off explicitly.
    pub nan_check: bool,
}

impl Default for TapeOptions {
    fn default() -> Self {
        TapeOptions { nan_check: true }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    options: TapeOptions,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), options: TapeOptions::default() }
    }

    pub fn with_options(options: TapeOptions) -> Self {
        Tape { nodes: Vec::new(), options }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tensor held by a node.
    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input: participates in the forward pass only.
    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push_unchecked(t, Op::Leaf { param: None }, false)
    }

    /// Differentiable leaf. `param_id` keys the entry in the [`GradientMap`].
    pub fn leaf(&mut self, t: Tensor, param_id: usize) -> Value {
        self.push_unchecked(t, Op::Leaf { param: Some(param_id) }, true)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Value {
        self.nodes.push(Node { value, needs_grad, op });
        Value(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Value> {
        if self.options.nan_check && value.has_non_finite() {
            return Err(Error::Internal(format!(
                "non-finite value produced by {}",
                op.name()
            )));
        }
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementwise ----

    fn binary_forward(
        &mut self,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Value, Value) -> Op,
    ) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let numel: usize = out_shape.iter().product();
            let mut data = vec![0.0f64; numel];
            let (da, db) = (ta.data(), tb.data());
            for ((dst, ia), (_, ib)) in
                BroadcastIter::new(&out_shape, &sa).zip(BroadcastIter::new(&out_shape, &sb))
            {
                data[dst] = f(da[ia], db[ib]);
            }
            data
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(out_shape, data)?, op(a, b), needs)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_forward(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_forward(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_forward(a, b, |x, y| x * y, Op::Mul)
    }

    /// Division by exact zero yields the IEEE infinity sentinel; with
    /// nan-checking enabled the scan turns it into an error.
    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary_forward(a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, x: Value) -> Result<Value> {
        let t = self.nodes[x.0].value.map(|v| -v);
        let needs = self.needs(x);
        self.push(t, Op::Neg(x), needs)
    }

    pub fn sqrt(&mut self, x: Value) -> Result<Value> {
        let t = self.nodes[x.0].value.map(f64::sqrt);
        let needs = self.needs(x);
        self.push(t, Op::Sqrt(x), needs)
    }

    pub fn gelu(&mut self, x: Value) -> Result<Value> {
        let t = self.nodes[x.0].value.map(gelu_fwd);
        let needs = self.needs(x);
        self.push(t, Op::Gelu(x), needs)
    }

    pub fn add_scalar(&mut self, x: Value, c: f64) -> Result<Value> {
        let t = self.nodes[x.0].value.map(|v| v + c);
        let needs = self.needs(x);
        self.push(t, Op::AddScalar(x), needs)
    }

    pub fn mul_scalar(&mut self, x: Value, c: f64) -> Result<Value> {
        let t = self.nodes[x.0].value.map(|v| v * c);
        let needs = self.needs(x);
        self.push(t, Op::MulScalar(x, c), needs)
    }

    // ---- matmul ----

    /// `a [..., m, k] * b [k, n]` (shared rhs) or `a [..., m, k] * b [..., k, n]`
    /// (batched rhs with identical leading dims).
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {sa:?} vs {sb:?}"
            )));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let out_data;
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        if sb.len() == 2 {
            // fold the batch into the row dimension
            out_data = matmul2d(ta.data(), tb.data(), batch * m, k, n);
        } else {
            if sb[..sb.len() - 2] != sa[..sa.len() - 2] {
                return Err(Error::dim(format!(
                    "batched matmul leading dims disagree: {sa:?} vs {sb:?}"
                )));
            }
            out_data = batched_matmul(ta.data(), tb.data(), batch, m, k, n, false);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(out_shape, out_data)?, Op::Matmul(a, b), needs)
    }

    // ---- reductions ----

    fn reduce_shape(shape: &[usize], axes: &[usize], keep: bool) -> Result<Vec<usize>> {
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::dim(format!("axis {ax} out of range for {shape:?}")));
            }
        }
        let mut out = Vec::new();
        for (i, &d) in shape.iter().enumerate() {
            if axes.contains(&i) {
                if keep {
                    out.push(1);
                }
            } else {
                out.push(d);
            }
        }
        if out.is_empty() {
            out.push(1);
        }
        Ok(out)
    }

    fn reduce_forward(t: &Tensor, axes: &[usize], keep: bool) -> Result<(Vec<usize>, Vec<f64>)> {
        let out_shape = Self::reduce_shape(t.shape(), axes, keep)?;
        // strides of the output viewed against the input's full coordinates
        let mut keep_shape: Vec<usize> = t.shape().to_vec();
        for &ax in axes {
            keep_shape[ax] = 1;
        }
        let bstrides = broadcast_strides(&keep_shape, t.shape());
        let numel: usize = keep_shape.iter().product();
        let mut acc = vec![0.0f64; numel];
        for (src, dst) in BroadcastIter::new(t.shape(), &bstrides) {
            acc[dst] += t.data()[src];
        }
        Ok((out_shape, acc))
    }

    pub fn sum_axes(&mut self, x: Value, axes: &[usize], keep: bool) -> Result<Value> {
        let (shape, data) = Self::reduce_forward(&self.nodes[x.0].value, axes, keep)?;
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data)?,
            Op::SumAxes { x, axes: axes.to_vec() },
            needs,
        )
    }

    pub fn mean_axes(&mut self, x: Value, axes: &[usize], keep: bool) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        let count: usize = axes.iter().map(|&ax| t.shape()[ax]).product();
        let (shape, mut data) = Self::reduce_forward(t, axes, keep)?;
        let inv = 1.0 / count as f64;
        for v in &mut data {
            *v *= inv;
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data)?,
            Op::MeanAxes { x, axes: axes.to_vec() },
            needs,
        )
    }

    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let axes: Vec<usize> = (0..self.nodes[x.0].value.rank()).collect();
        self.sum_axes(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Value) -> Result<Value> {
        let axes: Vec<usize> = (0..self.nodes[x.0].value.rank()).collect();
        self.mean_axes(x, &axes, false)
    }

    // ---- softmax / loss ----

    pub fn softmax_lastdim(&mut self, x: Value) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax on rank-0 tensor".to_string()))?;
        if d == 0 {
            return Err(Error::dim("softmax over empty last dimension".to_string()));
        }
        let mut data = vec![0.0f64; t.numel()];
        for (row_out, row_in) in data.chunks_mut(d).zip(t.data().chunks(d)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(t.shape().to_vec(), data)?,
            Op::SoftmaxLastDim(x),
            needs,
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Value, labels: &[usize]) -> Result<Value> {
        let t = &self.nodes[logits.0].value;
        if t.rank() != 2 {
            return Err(Error::dim(format!(
                "cross_entropy expects logits [batch, classes], got {:?}",
                t.shape()
            )));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if labels.len() != b {
            return Err(Error::dim(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut loss = 0.0f64;
        for (row, &label) in t.data().chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss -= row[label] - logsum;
        }
        loss /= b as f64;
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            needs,
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        let t = self.nodes[x.0].value.reshape(shape)?;
        let needs = self.needs(x);
        self.push(t, Op::Reshape(x), needs)
    }

    pub fn permute(&mut self, x: Value, perm: &[usize]) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        if perm.len() != t.rank() {
            return Err(Error::dim(format!(
                "permutation {perm:?} does not match rank {}",
                t.rank()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::dim(format!("invalid permutation {perm:?}")));
            }
            seen[p] = true;
        }
        let (shape, data) = permute_raw(t, perm);
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data)?,
            Op::Permute { x, perm: perm.to_vec() },
            needs,
        )
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors".to_string()));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range")));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim(format!(
                    "concat shapes disagree off-axis: {s:?} vs {first:?}"
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut offset = 0usize;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let rows = t.shape()[axis];
            let block = rows * inner;
            for o in 0..outer {
                let src = &t.data()[o * block..(o + 1) * block];
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + block].copy_from_slice(src);
            }
            offset += rows;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat { parts: parts.to_vec(), axis },
            needs,
        )
    }

    /// Drop `axis` by picking a single index along it.
    pub fn select_index(&mut self, x: Value, axis: usize, index: usize) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        if axis >= t.rank() || index >= t.shape()[axis] {
            return Err(Error::dim(format!(
                "select_index axis {axis} index {index} out of range for {:?}",
                t.shape()
            )));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let rows = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut data = vec![0.0f64; outer * inner];
        for o in 0..outer {
            let src = (o * rows + index) * inner;
            data[o * inner..(o + 1) * inner].copy_from_slice(&t.data()[src..src + inner]);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, data)?,
            Op::SelectIndex { x, axis, index },
            needs,
        )
    }

    pub fn broadcast_to(&mut self, x: Value, shape: &[usize]) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        if broadcast_shape(t.shape(), shape)? != shape {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} to {shape:?}",
                t.shape()
            )));
        }
        let bstrides = broadcast_strides(t.shape(), shape);
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        for (dst, src) in BroadcastIter::new(shape, &bstrides) {
            data[dst] = t.data()[src];
        }
        let needs = self.needs(x);
        self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(x), needs)
    }

    /// `[B, H, W, C]` image to `[B, N, patch*patch*C]` non-overlapping patch
    /// rows, patches in row-major grid order.
    pub fn image_patches(&mut self, x: Value, patch: usize) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        if t.rank() != 4 {
            return Err(Error::dim(format!(
                "image_patches expects [B, H, W, C], got {:?}",
                t.shape()
            )));
        }
        let (b, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::dim(format!(
                "patch size {patch} does not tile {h}x{w}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let plen = patch * patch * c;
        let mut data = vec![0.0f64; b * n * plen];
        let src = t.data();
        let mut dst = 0usize;
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    for py in 0..patch {
                        let row = (bi * h + gy * patch + py) * w + gx * patch;
                        let s = row * c;
                        data[dst..dst + patch * c].copy_from_slice(&src[s..s + patch * c]);
                        dst += patch * c;
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![b, n, plen], data)?,
            Op::ImagePatches { x, patch },
            needs,
        )
    }

    // ---- quantization ----

    /// Quantize-dequantize with a straight-through gradient: upstream passes
    /// where the pre-clip argument lies in `[-q_n, q_p]`, zero elsewhere.
    /// `alpha_param`, when given, receives the learned-step-size gradient.
    pub fn fake_quant(
        &mut self,
        x: Value,
        state: &QuantizerState,
        exec: QuantExec,
        alpha_param: Option<Value>,
    ) -> Result<Value> {
        if state.alpha <= 0.0 {
            return Err(Error::contract(format!(
                "fake_quant requires alpha > 0, got {}",
                state.alpha
            )));
        }
        let t = &self.nodes[x.0].value;
        let snap = FakeQuantSnap {
            alpha: state.alpha,
            zero_point: state.zero_point,
            q_n: state.q_n,
            q_p: state.q_p,
            grad_scale: 1.0 / ((t.numel() as f64) * state.q_p).sqrt(),
            exec,
        };
        let snap_state =
            QuantizerState::raw(snap.alpha, snap.zero_point, snap.q_n, snap.q_p);
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| quant::fake_quant_scalar(v, &snap_state, exec))
            .collect();
        let needs = self.needs(x) || alpha_param.map(|a| self.needs(a)).unwrap_or(false);
        self.push(
            Tensor::new(t.shape().to_vec(), data)?,
            Op::FakeQuant { x, alpha_param, snap },
            needs,
        )
    }

    /// L2-normalize each last-axis row; all-zero rows stay zero.
    pub fn row_normalize_l2(&mut self, x: Value) -> Result<Value> {
        let t = &self.nodes[x.0].value;
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::dim("row_normalize_l2 on rank-0 tensor".to_string()))?;
        let mut data = vec![0.0f64; t.numel()];
        for (out, row) in data.chunks_mut(d).zip(t.data().chunks(d)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(t.shape().to_vec(), data)?,
            Op::RowNormalizeL2(x),
            needs,
        )
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// `requires_grad` leaf reachable from `loss`.
    pub fn backward(&self, loss: Value) -> Result<GradientMap> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            self.backprop_node(id, &grad, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf { param: Some(_) }) {
                grads[id] = Some(grad);
            }
        }

        let mut map = GradientMap::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = grads[id].take() {
                    map.insert(pid, Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(map)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Value, contribution: &[f64]) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Scatter-add `grad` (laid out in `out_shape`) back into operand `v`
    /// whose shape may have been broadcast up to `out_shape`.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Value,
        out_shape: &[usize],
        grad: impl Iterator<Item = f64>,
    ) {
        if !self.needs(v) {
            return;
        }
        let t = &self.nodes[v.0].value;
        if t.shape() == out_shape {
            let slot = &mut grads[v.0];
            match slot {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(grad) {
                        *a += b;
                    }
                }
                None => *slot = Some(grad.collect()),
            }
            return;
        }
        let bstrides = broadcast_strides(t.shape(), out_shape);
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; t.numel()]);
        for ((_, src), g) in BroadcastIter::new(out_shape, &bstrides).zip(grad) {
            slot[src] += g;
        }
    }

    fn backprop_node(
        &self,
        id: usize,
        grad: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf { .. } => {}

            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, out_shape, grad.iter().copied());
                self.accumulate_broadcast(grads, *b, out_shape, grad.iter().copied());
            }

            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, out_shape, grad.iter().copied());
                self.accumulate_broadcast(grads, *b, out_shape, grad.iter().map(|g| -g));
            }

            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let sb = broadcast_strides(tb.shape(), out_shape);
                let db = tb.data();
                self.accumulate_broadcast(
                    grads,
                    *a,
                    out_shape,
                    BroadcastIter::new(out_shape, &sb).map(|(dst, src)| grad[dst] * db[src]),
                );
                let sa = broadcast_strides(ta.shape(), out_shape);
                let da = ta.data();
                self.accumulate_broadcast(
                    grads,
                    *b,
                    out_shape,
                    BroadcastIter::new(out_shape, &sa).map(|(dst, src)| grad[dst] * da[src]),
                );
            }

            Op::Div(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let sb = broadcast_strides(tb.shape(), out_shape);
                let db = tb.data();
                self.accumulate_broadcast(
                    grads,
                    *a,
                    out_shape,
                    BroadcastIter::new(out_shape, &sb).map(|(dst, src)| grad[dst] / db[src]),
                );
                // d(a/b)/db = -a / b^2 = -y / b
                let _ = ta;
                let y = node.value.data();
                self.accumulate_broadcast(
                    grads,
                    *b,
                    out_shape,
                    BroadcastIter::new(out_shape, &sb)
                        .map(|(dst, src)| -grad[dst] * y[dst] / db[src]),
                );
            }

            Op::Neg(x) => {
                self.accumulate(grads, *x, &grad.iter().map(|g| -g).collect::<Vec<_>>());
            }

            Op::Sqrt(x) => {
                // subgradient 0 at y == 0 so norms of identical operands stay finite
                let y = node.value.data();
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(y)
                    .map(|(g, &s)| if s == 0.0 { 0.0 } else { g / (2.0 * s) })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::Gelu(x) => {
                let input = self.nodes[x.0].value.data();
                let dx: Vec<f64> = grad
                    .iter()
                    .zip(input)
                    .map(|(g, &v)| g * gelu_bwd(v))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::AddScalar(x) => {
                self.accumulate(grads, *x, grad);
            }

            Op::MulScalar(x, c) => {
                let dx: Vec<f64> = grad.iter().map(|g| g * c).collect();
                self.accumulate(grads, *x, &dx);
            }

            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                if sb.len() == 2 {
                    if self.needs(*a) {
                        // dA = dC * B^T
                        let da = matmul2d_bt(grad, tb.data(), batch * m, n, k);
                        self.accumulate(grads, *a, &da);
                    }
                    if self.needs(*b) {
                        // dB = A^T * dC, batch folded into rows
                        let at = transpose2d(ta.data(), batch * m, k);
                        let db = matmul2d(&at, grad, k, batch * m, n);
                        self.accumulate(grads, *b, &db);
                    }
                } else {
                    if self.needs(*a) {
                        // dA[bi] = dC[bi] * B[bi]^T
                        let da = batched_matmul(grad, tb.data(), batch, m, n, k, true);
                        self.accumulate(grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let db = batched_matmul_at(ta.data(), grad, batch, m, k, n);
                        self.accumulate(grads, *b, &db);
                    }
                }
            }

            Op::SumAxes { x, axes } => {
                let t = &self.nodes[x.0].value;
                self.reduce_backward(grads, *x, t, axes, grad, 1.0);
            }

            Op::MeanAxes { x, axes } => {
                let t = &self.nodes[x.0].value;
                let count: usize = axes.iter().map(|&ax| t.shape()[ax]).product();
                self.reduce_backward(grads, *x, t, axes, grad, 1.0 / count as f64);
            }

            Op::SoftmaxLastDim(x) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f64; y.len()];
                for ((dx_row, y_row), g_row) in
                    dx.chunks_mut(d).zip(y.chunks(d)).zip(grad.chunks(d))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for ((o, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::CrossEntropy { logits, labels } => {
                let t = &self.nodes[logits.0].value;
                let (b, c) = (t.shape()[0], t.shape()[1]);
                let scale = grad[0] / b as f64;
                let mut dx = vec![0.0f64; t.numel()];
                for ((dx_row, row), &label) in
                    dx.chunks_mut(c).zip(t.data().chunks(c)).zip(labels)
                {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for (j, (o, &v)) in dx_row.iter_mut().zip(row).enumerate() {
                        let p = (v - max).exp() / sum;
                        *o = scale * (p - if j == label { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, &dx);
            }

            Op::Reshape(x) => {
                self.accumulate(grads, *x, grad);
            }

            Op::Permute { x, perm } => {
                let inverse = invert_permutation(perm);
                let (_, dx) = permute_raw_slices(grad, node.value.shape(), &inverse);
                self.accumulate(grads, *x, &dx);
            }

            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total_rows = out_shape[axis];
                let mut offset = 0usize;
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    let rows = t.shape()[axis];
                    if self.needs(p) {
                        let mut dp = vec![0.0f64; t.numel()];
                        let block = rows * inner;
                        for o in 0..outer {
                            let src = o * total_rows * inner + offset * inner;
                            dp[o * block..(o + 1) * block]
                                .copy_from_slice(&grad[src..src + block]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    offset += rows;
                }
            }

            Op::SelectIndex { x, axis, index } => {
                let t = &self.nodes[x.0].value;
                let outer: usize = t.shape()[..*axis].iter().product();
                let rows = t.shape()[*axis];
                let inner: usize = t.shape()[*axis + 1..].iter().product();
                let mut dx = vec![0.0f64; t.numel()];
                for o in 0..outer {
                    let dst = (o * rows + index) * inner;
                    dx[dst..dst + inner].copy_from_slice(&grad[o * inner..(o + 1) * inner]);
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::BroadcastTo(x) => {
                let t = &self.nodes[x.0].value;
                let bstrides = broadcast_strides(t.shape(), out_shape);
                let mut dx = vec![0.0f64; t.numel()];
                for (dst, src) in BroadcastIter::new(out_shape, &bstrides) {
                    dx[src] += grad[dst];
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::ImagePatches { x, patch } => {
                let t = &self.nodes[x.0].value;
                let (b, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
                let (gh, gw) = (h / patch, w / patch);
                let mut dx = vec![0.0f64; t.numel()];
                let mut src = 0usize;
                for bi in 0..b {
                    for gy in 0..gh {
                        for gx in 0..gw {
                            for py in 0..*patch {
                                let row = (bi * h + gy * patch + py) * w + gx * patch;
                                let d = row * c;
                                dx[d..d + patch * c].copy_from_slice(&grad[src..src + patch * c]);
                                src += patch * c;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
            }

            Op::FakeQuant { x, alpha_param, snap } => {
                let input = self.nodes[x.0].value.data();
                if self.needs(*x) {
                    let dx: Vec<f64> = grad
                        .iter()
                        .zip(input)
                        .map(|(g, &v)| {
                            let arg = (v - snap.zero_point) / snap.alpha;
                            if (-snap.q_n..=snap.q_p).contains(&arg) {
                                *g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(grads, *x, &dx);
                }
                if let Some(ap) = alpha_param {
                    if self.needs(*ap) {
                        let mut dalpha = 0.0f64;
                        for (g, &v) in grad.iter().zip(input) {
                            let arg = (v - snap.zero_point) / snap.alpha;
                            let h = if arg < -snap.q_n {
                                -snap.q_n
                            } else if arg > snap.q_p {
                                snap.q_p
                            } else {
                                match snap.exec {
                                    QuantExec::Round => arg.round_ties_even() - arg,
                                    QuantExec::ClipOnly => 0.0,
                                }
                            };
                            dalpha += g * h;
                        }
                        self.accumulate(grads, *ap, &[dalpha * snap.grad_scale]);
                    }
                }
            }

            Op::RowNormalizeL2(x) => {
                let input = self.nodes[x.0].value.data();
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f64; input.len()];
                for (((dx_row, x_row), y_row), g_row) in dx
                    .chunks_mut(d)
                    .zip(input.chunks(d))
                    .zip(y.chunks(d))
                    .zip(grad.chunks(d))
                {
                    let norm = x_row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for ((o, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                        *o = (gv - yv * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
        }
        Ok(())
    }

    fn reduce_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Value,
        t: &Tensor,
        axes: &[usize],
        grad: &[f64],
        scale: f64,
    ) {
        if !self.needs(x) {
            return;
        }
        let mut keep_shape: Vec<usize> = t.shape().to_vec();
        for &ax in axes {
            keep_shape[ax] = 1;
        }
        let bstrides = broadcast_strides(&keep_shape, t.shape());
        let mut dx = vec![0.0f64; t.numel()];
        for (dst, src) in BroadcastIter::new(t.shape(), &bstrides) {
            dx[dst] = grad[src] * scale;
        }
        self.accumulate(grads, x, &dx);
    }
}

const PAR_BATCH_THRESHOLD: usize = 16 * 1024;

/// Pairwise-batched product: `C[bi] = A[bi] * B[bi]` (or `A[bi] * B[bi]^T`
/// when `b_transposed`; then `b` is laid out `[batch, n, k]`). Each batch
/// item is computed independently in a fixed order, so rayon splitting does
/// not change results.
fn batched_matmul(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_transposed: bool,
) -> Vec<f64> {
    let mut out = vec![0.0f64; batch * m * n];
    let body = |(bi, chunk): (usize, &mut [f64])| {
        let av = &a[bi * m * k..(bi + 1) * m * k];
        let bv = &b[bi * k * n..(bi + 1) * k * n];
        let r = if b_transposed {
            matmul2d_bt(av, bv, m, k, n)
        } else {
            matmul2d(av, bv, m, k, n)
        };
        chunk.copy_from_slice(&r);
    };
    if batch * m * k * n >= PAR_BATCH_THRESHOLD && batch > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(m * n).enumerate().for_each(body);
    } else {
        out.chunks_mut(m * n).enumerate().for_each(body);
    }
    out
}

/// `C[bi] = A[bi]^T * G[bi]` with `A [batch, m, k]`, `G [batch, m, n]`.
fn batched_matmul_at(a: &[f64], g: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; batch * k * n];
    let body = |(bi, chunk): (usize, &mut [f64])| {
        let av = &a[bi * m * k..(bi + 1) * m * k];
        let gv = &g[bi * m * n..(bi + 1) * m * n];
        let at = transpose2d(av, m, k);
        chunk.copy_from_slice(&matmul2d(&at, gv, k, m, n));
    };
    if batch * m * k * n >= PAR_BATCH_THRESHOLD && batch > 1 {
        use rayon::prelude::*;
        out.par_chunks_mut(k * n).enumerate().for_each(body);
    } else {
        out.chunks_mut(k * n).enumerate().for_each(body);
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_raw(t: &Tensor, perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    permute_raw_slices(t.data(), t.shape(), perm)
}

fn permute_raw_slices(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_for(shape);
    // walking the output in order, the source index follows permuted strides
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0f64; numel];
    let mut coords = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        let mut axis = out_shape.len();
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            coords[axis] += 1;
            src += walk[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            src -= coords[axis] * walk[axis];
            coords[axis] = 0;
        }
    }
    (out_shape, out)
}

/// Mean 0 / variance 1 over the last dimension, then `gain * x + bias`.
/// `gain` and `bias` are `[d]` vectors.
pub fn layer_norm(
    tape: &mut Tape,
    x: Value,
    gain: Value,
    bias: Value,
    eps: f64,
) -> Result<Value> {
    let rank = tape.value(x).rank();
    let last = rank - 1;
    let mu = tape.mean_axes(x, &[last], true)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axes(sq, &[last], true)?;
    let var_eps = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(var_eps)?;
    let normed = tape.div(centered, std)?;
    let scaled = tape.mul(normed, gain)?;
    tape.add(scaled, bias)
}

/// Max over coordinates of `|analytic - central difference| / (|analytic| + 1e-8)`.
///
/// `f` must build a scalar loss from its input on the given tape. The same
/// closure provides both sides: the analytic gradient via [`Tape::backward`]
/// and the central-difference quotient via two perturbed forward passes.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Value) -> Result<Value>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), 0);
    let loss = f(&mut tape, leaf)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(0)
        .ok_or_else(|| Error::Internal("finite_diff_check: input left no gradient".to_string()))?
        .clone();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data)?);
        let loss = f(&mut t, v)?;
        Ok(t.value(loss).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let denom = plus[i] - minus[i];
        let fd = (eval(plus)? - eval(minus)?) / denom;
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / (a.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{QuantExec, QuantizerState};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t1(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_expansion() {
        // [[1,2]] * [[3],[4]] = [[1*3 + 2*4]] = [[11]]
        let mut tape = Tape::new();
        let a = tape.constant(t2(1, 2, &[1.0, 2.0]));
        let b = tape.constant(t2(2, 1, &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dim_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[0.0; 6]));
        let b = tape.constant(t2(2, 2, &[0.0; 4]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn matmul_backward_da_is_upstream_times_bt() {
        // d sum(A*B) / dA at A = I2, B = [[2,3],[4,5]] is 1*B^T = [[5,9],[5,9]]
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]), 0);
        let b = tape.constant(t2(2, 2, &[2.0, 3.0, 4.0, 5.0]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[5.0, 9.0, 5.0, 9.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[0.0, 0.0]));
        let y = tape.softmax_lastdim(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.constant(t1(&[1000.0, 0.0]));
        let y = tape.softmax_lastdim(big).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-6);
        assert!(tape.value(y).data()[1].abs() < 1e-6);
    }

    #[test]
    fn softmax_log_ratios() {
        // exp of [ln1, ln2, ln3] is 1, 2, 3 -> probabilities 1/6, 2/6, 3/6
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[0.0, 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax_lastdim(x).unwrap();
        let got = tape.value(y).data().to_vec();
        for (g, e) in got.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((g - e).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_large_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[8, 16], -1e4, 1e4, &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax_lastdim(v).unwrap();
        for row in tape.value(y).data().chunks(16) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn mean_and_population_variance() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[1.0, 2.0, 3.0]));
        let mu = tape.mean_all(x).unwrap();
        assert_eq!(tape.value(mu).item(), 2.0);

        // variance = sum((x - mu)^2) / n
        let mu_keep = tape.mean_axes(x, &[0], true).unwrap();
        let centered = tape.sub(x, mu_keep).unwrap();
        let sq = tape.mul(centered, centered).unwrap();
        let var = tape.mean_all(sq).unwrap();
        assert!((tape.value(var).item() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_zero_fixed_point() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[0.0]));
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn div_by_zero_flagged_in_debug_scan() {
        let mut tape = Tape::new();
        let a = tape.constant(t1(&[1.0]));
        let b = tape.constant(t1(&[0.0]));
        assert!(matches!(tape.div(a, b), Err(Error::Internal(_))));

        // with scanning off the infinity sentinel propagates
        let mut tape = Tape::with_options(TapeOptions { nan_check: false });
        let a = tape.constant(t1(&[1.0]));
        let b = tape.constant(t1(&[0.0]));
        let y = tape.div(a, b).unwrap();
        assert!(tape.value(y).item().is_infinite());
    }

    #[test]
    fn broadcast_mismatch_is_dim_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t1(&[1.0, 2.0, 3.0]));
        let b = tape.constant(t1(&[1.0, 2.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn layer_norm_standardizes() {
        // x = [1,2,3], eps = 0: mean 2, population variance 2/3
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[1.0, 2.0, 3.0]));
        let gain = tape.constant(t1(&[1.0, 1.0, 1.0]));
        let bias = tape.constant(t1(&[0.0, 0.0, 0.0]));
        let y = layer_norm(&mut tape, x, gain, bias, 0.0).unwrap();
        let expect = (1.5f64).sqrt();
        let got = tape.value(y).data();
        assert!((got[0] + expect).abs() < 1e-12);
        assert!(got[1].abs() < 1e-12);
        assert!((got[2] - expect).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_and_zero_gain() {
        let mut tape = Tape::new();
        let x = tape.constant(t1(&[5.0, 5.0]));
        let gain = tape.constant(t1(&[1.0, 1.0]));
        let bias = tape.constant(t1(&[0.0, 0.0]));
        let y = layer_norm(&mut tape, x, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let x = tape.constant(t1(&[1.0, 4.0]));
        let zero_gain = tape.constant(t1(&[0.0, 0.0]));
        let bias = tape.constant(t1(&[0.5, 0.5]));
        let y = layer_norm(&mut tape, x, zero_gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_and_certain() {
        let mut tape = Tape::new();
        let logits = tape.constant(t2(1, 2, &[0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(loss).item() - 2f64.ln()).abs() < 1e-12);

        let logits = tape.constant(t2(1, 2, &[1000.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss).item() < 1e-6);

        // softmax of [0, ln 3] is (1/4, 3/4); -log(1/4) = ln 4
        let logits = tape.constant(t2(1, 2, &[0.0, 3f64.ln()]));
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let logits = tape.constant(t2(1, 2, &[0.0, 0.0]));
        assert!(matches!(
            tape.cross_entropy(logits, &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_square_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[3.0]), 0);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]), 0);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn ste_passthrough_inside_clip_range() {
        // bits=2 signed: q_n = 2, q_p = 1; alpha = 0.5 puts +-0.4 in range
        let s = QuantizerState::raw(0.5, 0.0, 2.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.3, -0.4, 0.1]), 0);
        let q = tape.fake_quant(x, &s, QuantExec::Round, None).unwrap();
        let loss = tape.sum_all(q).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn ste_zero_outside_clip_range() {
        let s = QuantizerState::raw(0.5, 0.0, 2.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[10.0, -10.0]), 0);
        let q = tape.fake_quant(x, &s, QuantExec::Round, None).unwrap();
        let loss = tape.sum_all(q).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_of_independent_subgraphs_is_linear() {
        let xa = t1(&[1.0, -0.5]);
        let xb = t1(&[0.25, 2.0]);

        let run_joint = || {
            let mut tape = Tape::new();
            let a = tape.leaf(xa.clone(), 0);
            let b = tape.leaf(xb.clone(), 1);
            let a2 = tape.mul(a, a).unwrap();
            let gb = tape.gelu(b).unwrap();
            let sa = tape.sum_all(a2).unwrap();
            let sb = tape.sum_all(gb).unwrap();
            let loss = tape.add(sa, sb).unwrap();
            tape.backward(loss).unwrap()
        };
        let joint = run_joint();

        let mut tape = Tape::new();
        let a = tape.leaf(xa.clone(), 0);
        let a2 = tape.mul(a, a).unwrap();
        let sa = tape.sum_all(a2).unwrap();
        let ga = tape.backward(sa).unwrap();

        let mut tape = Tape::new();
        let b = tape.leaf(xb.clone(), 0);
        let gb_v = tape.gelu(b).unwrap();
        let sb = tape.sum_all(gb_v).unwrap();
        let gb = tape.backward(sb).unwrap();

        assert_eq!(joint.get(0).unwrap().data(), ga.get(0).unwrap().data());
        assert_eq!(joint.get(1).unwrap().data(), gb.get(0).unwrap().data());
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::randn(&[4, 8], 0.0, 1.0, &mut rng);
            let w = Tensor::randn(&[8, 3], 0.0, 0.5, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.leaf(x, 0);
            let wv = tape.leaf(w, 1);
            let y = tape.matmul(xv, wv).unwrap();
            let sm = tape.softmax_lastdim(y).unwrap();
            let loss = tape.sum_all(sm).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                grads.get(0).unwrap().data().to_vec(),
                grads.get(1).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finite_diff_square() {
        let err = finite_diff_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                tape.sum_all(sq)
            },
            &t1(&[3.0]),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn finite_diff_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 4], 0.0, 1.0, &mut rng).reshape(vec![1, 4]).unwrap();
        let err = finite_diff_check(
            |tape, v| tape.cross_entropy(v, &[2]),
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn finite_diff_layer_norm_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[8], 0.0, 1.5, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let gain = tape.constant(Tensor::full(&[8], 1.2));
                let bias = tape.constant(Tensor::full(&[8], -0.3));
                let y = layer_norm(tape, v, gain, bias, 1e-5)?;
                // square so the gradient is not trivially constant
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn finite_diff_smooth_primitives_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[6], -2.0, 2.0, &mut rng);

        type LossFn = fn(&mut Tape, Value) -> Result<Value>;
        let cases: Vec<(&str, LossFn)> = vec![
            ("gelu", |tape, v| {
                let y = tape.gelu(v)?;
                tape.sum_all(y)
            }),
            ("mul_sub", |tape, v| {
                let c = tape.constant(Tensor::full(&[6], 0.7));
                let m = tape.mul(v, c)?;
                let s = tape.sub(m, v)?;
                let sq = tape.mul(s, s)?;
                tape.sum_all(sq)
            }),
            ("softmax", |tape, v| {
                let r = tape.reshape(v, vec![2, 3])?;
                let y = tape.softmax_lastdim(r)?;
                let sq = tape.mul(y, y)?;
                tape.sum_all(sq)
            }),
            ("div_sqrt", |tape, v| {
                let sq = tape.mul(v, v)?;
                let shifted = tape.add_scalar(sq, 1.0)?;
                let rt = tape.sqrt(shifted)?;
                let y = tape.div(v, rt)?;
                tape.sum_all(y)
            }),
            ("row_normalize", |tape, v| {
                let r = tape.reshape(v, vec![2, 3])?;
                let y = tape.row_normalize_l2(r)?;
                let c = tape.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 0.5, 2.0, 0.1, -0.4]).unwrap());
                let m = tape.mul(y, c)?;
                tape.sum_all(m)
            }),
            ("mean_axes", |tape, v| {
                let r = tape.reshape(v, vec![2, 3])?;
                let m = tape.mean_axes(r, &[1], true)?;
                let d = tape.sub(r, m)?;
                let sq = tape.mul(d, d)?;
                tape.sum_all(sq)
            }),
        ];
        for (name, f) in cases {
            let err = finite_diff_check(f, &x, 1e-4).unwrap();
            assert!(err < 1e-3, "{name}: relative error {err}");
        }
    }

    #[test]
    fn permute_concat_select_roundtrip_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 3, 4], 0.0, 1.0, &mut rng);
        let err = finite_diff_check(
            |tape, v| {
                let p = tape.permute(v, &[1, 0, 2])?;
                let s = tape.select_index(p, 0, 1)?;
                let w = tape.constant(Tensor::full(&[2, 4], 0.5));
                let m = tape.mul(s, w)?;
                tape.sum_all(m)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn image_patches_layout() {
        // 1x4x4x1 image, patch 2: patches in row-major grid order, each patch
        // row-major over (py, px)
        let img: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4, 4, 1], img).unwrap());
        let p = tape.image_patches(x, 2).unwrap();
        assert_eq!(tape.value(p).shape(), &[1, 4, 4]);
        let d = tape.value(p).data();
        assert_eq!(&d[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&d[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&d[8..12], &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(&d[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn broadcast_to_accumulates_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[2.0]), 0);
        let b = tape.broadcast_to(x, &[3]).unwrap();
        let loss = tape.sum_all(b).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[3.0]);
    }
}
