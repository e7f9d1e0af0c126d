//! Reverse-mode autodiff over a dynamic tape.
//!
//! Every forward op records its inputs so `backward` can replay the graph in
//! reverse. One tape per loss evaluation; parameters are registered as leaves
//! and looked up by name when the gradient map is assembled.

use std::collections::HashMap;

use super::params::{GradientMap, ParameterStore};
use super::tensor::{Tensor, TensorError};

/// Sigmoid outputs are pinned strictly inside (0, 1): the upper bound is the
/// largest double below 1 (raw sigmoid rounds to exactly 1.0 beyond logits of
/// about 36.7) and the floor guards the underflow-to-zero region. Both engage
/// only where f64 itself has already flattened the curve.
pub const SIGMOID_MIN: f64 = 1e-300;
pub const SIGMOID_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Forward operations. The elementwise binary ops accept equal shapes or one
/// scalar operand; all other shape rules are strict.
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    Add,
    ElementwiseMul,
    /// Vectors join end to end; matrices with equal row counts join columns.
    Concat,
    Sigmoid,
    Relu,
    Log,
    Exp,
    /// Row-wise for matrices, whole vector otherwise.
    Softmax,
    /// out[s] = sum of input rows i with segments[i] == s.
    SegmentSum { segments: Vec<usize>, num_segments: usize },
    /// Column means: [n,d] -> [d], [n] -> [1].
    ReduceMean,
    /// Column population variances: [n,d] -> [d], [n] -> [1].
    ReduceVar,
    /// Replicate a vector [d] into [rows, d].
    BroadcastRow { rows: usize },
    /// Select rows by index (duplicates allowed); inverse of SegmentSum.
    GatherRows { indices: Vec<usize> },
    /// Stack matrices with equal column counts along rows.
    ConcatRows,
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::Concat => "concat",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Softmax => "softmax",
            OpKind::SegmentSum { .. } => "segment_sum",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceVar => "reduce_var",
            OpKind::BroadcastRow { .. } => "broadcast_row",
            OpKind::GatherRows { .. } => "gather_rows",
            OpKind::ConcatRows => "concat_rows",
        }
    }
}

enum Provenance {
    Leaf,
    Op { kind: OpKind, inputs: Vec<TensorId> },
}

struct Node {
    value: Tensor,
    provenance: Provenance,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_ids: HashMap<String, TensorId>,
}

fn shape_err(op: &OpKind, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op: op.name().into(), detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, mut t: Tensor) -> TensorId {
        t.requires_grad = false;
        self.push(t, Provenance::Leaf)
    }

    /// Register a named parameter from the store as a differentiable leaf.
    /// Repeated registration of the same name returns the existing id.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<TensorId, TensorError> {
        if let Some(id) = self.param_ids.get(name) {
            return Ok(*id);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::Invalid(format!("unknown parameter `{name}`")))?;
        let mut t = t.clone();
        t.requires_grad = true;
        let id = self.push(t, Provenance::Leaf);
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, provenance: Provenance) -> TensorId {
        let requires_grad = match &provenance {
            Provenance::Leaf => value.requires_grad,
            Provenance::Op { inputs, .. } => {
                inputs.iter().any(|i| self.nodes[i.0].requires_grad)
            }
        };
        self.nodes.push(Node { value, provenance, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    /// Run one forward op, recording provenance for backward.
    pub fn apply(&mut self, op: OpKind, inputs: &[TensorId]) -> Result<TensorId, TensorError> {
        let vals: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
        let out = forward(&op, &vals)?;
        if out.values().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name().into() });
        }
        Ok(self.push(out, Provenance::Op { kind: op, inputs: inputs.to_vec() }))
    }

    /// Reverse-mode gradients of a scalar loss with respect to every parameter
    /// in `params`. Parameters the loss never touched map to zero tensors.
    pub fn backward(
        &self,
        loss: TensorId,
        params: &ParameterStore,
    ) -> Result<GradientMap, TensorError> {
        let loss_t = self.value(loss);
        if !loss_t.is_scalar() {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_t.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        // Tape order is topological: every consumer of a node sits after it,
        // so in reverse each node's gradient is complete when reached. Op-node
        // gradients are consumed here; leaf gradients survive for collection.
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Provenance::Op { kind, inputs } = &node.provenance else { continue };
            let Some(out_grad) = grads[idx].take() else { continue };
            let in_vals: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
            let in_grads = backward_op(kind, &in_vals, &node.value, &out_grad);
            for (input_id, g) in inputs.iter().zip(in_grads) {
                if !self.nodes[input_id.0].requires_grad {
                    continue;
                }
                match &mut grads[input_id.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }

        let mut map = GradientMap::default();
        for name in params.names() {
            let shape = params.get(name).expect("listed name").shape().to_vec();
            let g = self
                .param_ids
                .get(name)
                .and_then(|id| grads[id.0].clone())
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            map.insert(name.to_string(), Tensor::new(shape, g)?);
        }
        Ok(map)
    }
}

fn binary_shapes<'a>(
    op: &OpKind,
    a: &'a Tensor,
    b: &'a Tensor,
) -> Result<Vec<usize>, TensorError> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn forward(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let arity_err = |want: &str| {
        TensorError::Invalid(format!("{} expects {want}, got {} inputs", op.name(), inputs.len()))
    };
    match op {
        OpKind::MatMul => {
            let [a, b] = inputs else { return Err(arity_err("2 inputs")) };
            if a.rank() != 2 || b.rank() != 2 {
                return Err(shape_err(op, format!("{:?} x {:?} (rank-2 only)", a.shape(), b.shape())));
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(shape_err(op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; m * n];
            let (av, bv) = (a.values(), b.values());
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
            Ok(Tensor::raw(vec![m, n], out))
        }
        OpKind::Add | OpKind::ElementwiseMul => {
            let [a, b] = inputs else { return Err(arity_err("2 inputs")) };
            let shape = binary_shapes(op, a, b)?;
            let numel: usize = shape.iter().product();
            let pick = |t: &Tensor, i: usize| {
                if t.is_scalar() {
                    t.values()[0]
                } else {
                    t.values()[i]
                }
            };
            let out: Vec<f64> = (0..numel)
                .map(|i| match op {
                    OpKind::Add => pick(a, i) + pick(b, i),
                    _ => pick(a, i) * pick(b, i),
                })
                .collect();
            Ok(Tensor::raw(shape, out))
        }
        OpKind::Concat => {
            if inputs.is_empty() {
                return Err(arity_err(">= 1 input"));
            }
            if inputs.iter().all(|t| t.rank() == 1) {
                let out: Vec<f64> = inputs.iter().flat_map(|t| t.values().iter().copied()).collect();
                let n = out.len();
                Ok(Tensor::raw(vec![n], out))
            } else if inputs.iter().all(|t| t.rank() == 2) {
                let rows = inputs[0].shape()[0];
                if inputs.iter().any(|t| t.shape()[0] != rows) {
                    return Err(shape_err(op, "row counts differ".into()));
                }
                let total_cols: usize = inputs.iter().map(|t| t.shape()[1]).sum();
                let mut out = Vec::with_capacity(rows * total_cols);
                for r in 0..rows {
                    for t in inputs {
                        out.extend_from_slice(t.row(r));
                    }
                }
                Ok(Tensor::raw(vec![rows, total_cols], out))
            } else {
                Err(shape_err(op, "mixed ranks".into()))
            }
        }
        OpKind::Sigmoid => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            let out = x
                .values()
                .iter()
                .map(|v| (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_MIN, SIGMOID_MAX))
                .collect();
            Ok(Tensor::raw(x.shape().to_vec(), out))
        }
        OpKind::Relu => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            Ok(Tensor::raw(x.shape().to_vec(), x.values().iter().map(|v| v.max(0.0)).collect()))
        }
        OpKind::Log => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            Ok(Tensor::raw(x.shape().to_vec(), x.values().iter().map(|v| v.ln()).collect()))
        }
        OpKind::Exp => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            Ok(Tensor::raw(x.shape().to_vec(), x.values().iter().map(|v| v.exp()).collect()))
        }
        OpKind::Softmax => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            let (rows, cols) = x.dims2();
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &x.values()[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = (v - max).exp();
                    sum += *o;
                }
                for o in &mut out[r * cols..(r + 1) * cols] {
                    *o /= sum;
                }
            }
            Ok(Tensor::raw(x.shape().to_vec(), out))
        }
        OpKind::SegmentSum { segments, num_segments } => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            let (rows, cols) = x.rows_cols();
            if segments.len() != rows {
                return Err(shape_err(op, format!("{} rows vs {} segment ids", rows, segments.len())));
            }
            if let Some(bad) = segments.iter().find(|s| **s >= *num_segments) {
                return Err(shape_err(op, format!("segment id {bad} >= {num_segments}")));
            }
            let mut out = vec![0.0; num_segments * cols];
            for (r, seg) in segments.iter().enumerate() {
                let src = &x.values()[r * cols..(r + 1) * cols];
                let dst = &mut out[seg * cols..(seg + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            if x.rank() == 1 {
                Ok(Tensor::raw(vec![out.len()], out))
            } else {
                Ok(Tensor::raw(vec![*num_segments, cols], out))
            }
        }
        OpKind::ReduceMean => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            let (rows, cols) = x.rows_cols();
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, v) in out.iter_mut().zip(&x.values()[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o /= rows as f64;
            }
            Ok(Tensor::raw(vec![cols], out))
        }
        OpKind::ReduceVar => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            let (rows, cols) = x.rows_cols();
            let mut mean = vec![0.0; cols];
            for r in 0..rows {
                for (m, v) in mean.iter_mut().zip(&x.values()[r * cols..(r + 1) * cols]) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= rows as f64;
            }
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for ((o, m), v) in out.iter_mut().zip(&mean).zip(&x.values()[r * cols..(r + 1) * cols]) {
                    let d = v - m;
                    *o += d * d;
                }
            }
            for o in &mut out {
                *o /= rows as f64;
            }
            Ok(Tensor::raw(vec![cols], out))
        }
        OpKind::BroadcastRow { rows } => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            if x.rank() != 1 {
                return Err(shape_err(op, format!("vector input required, got {:?}", x.shape())));
            }
            let d = x.numel();
            let mut out = Vec::with_capacity(rows * d);
            for _ in 0..*rows {
                out.extend_from_slice(x.values());
            }
            Ok(Tensor::raw(vec![*rows, d], out))
        }
        OpKind::GatherRows { indices } => {
            let [x] = inputs else { return Err(arity_err("1 input")) };
            let (rows, cols) = x.rows_cols();
            if let Some(bad) = indices.iter().find(|i| **i >= rows) {
                return Err(shape_err(op, format!("row index {bad} >= {rows}")));
            }
            let mut out = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                out.extend_from_slice(&x.values()[i * cols..(i + 1) * cols]);
            }
            if x.rank() == 1 {
                Ok(Tensor::raw(vec![out.len()], out))
            } else {
                Ok(Tensor::raw(vec![indices.len(), cols], out))
            }
        }
        OpKind::ConcatRows => {
            if inputs.is_empty() {
                return Err(arity_err(">= 1 input"));
            }
            if inputs.iter().any(|t| t.rank() != 2) {
                return Err(shape_err(op, "rank-2 inputs required".into()));
            }
            let cols = inputs[0].shape()[1];
            if inputs.iter().any(|t| t.shape()[1] != cols) {
                return Err(shape_err(op, "column counts differ".into()));
            }
            let rows: usize = inputs.iter().map(|t| t.shape()[0]).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for t in inputs {
                out.extend_from_slice(t.values());
            }
            Ok(Tensor::raw(vec![rows, cols], out))
        }
    }
}

/// Gradient of each input given input values, the forward output, and the
/// output gradient. Shapes mirror the forward rules exactly.
fn backward_op(op: &OpKind, inputs: &[&Tensor], output: &Tensor, dout: &[f64]) -> Vec<Vec<f64>> {
    match op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            let (av, bv) = (a.values(), b.values());
            // dA = dC . B^T
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    let drow = &dout[i * n..(i + 1) * n];
                    let brow = &bv[p * n..(p + 1) * n];
                    for j in 0..n {
                        s += drow[j] * brow[j];
                    }
                    da[i * k + p] = s;
                }
            }
            // dB = A^T . dC
            for i in 0..m {
                let drow = &dout[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let dbrow = &mut db[p * n..(p + 1) * n];
                    for j in 0..n {
                        dbrow[j] += aip * drow[j];
                    }
                }
            }
            vec![da, db]
        }
        OpKind::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let reduce = |t: &Tensor| -> Vec<f64> {
                if t.is_scalar() && dout.len() > 1 {
                    vec![dout.iter().sum()]
                } else {
                    dout.to_vec()
                }
            };
            vec![reduce(a), reduce(b)]
        }
        OpKind::ElementwiseMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let pick = |t: &Tensor, i: usize| if t.is_scalar() { t.values()[0] } else { t.values()[i] };
            let grad_for = |this: &Tensor, other: &Tensor| -> Vec<f64> {
                if this.is_scalar() && dout.len() > 1 {
                    vec![dout.iter().enumerate().map(|(i, d)| d * pick(other, i)).sum()]
                } else {
                    dout.iter().enumerate().map(|(i, d)| d * pick(other, i)).collect()
                }
            };
            vec![grad_for(a, b), grad_for(b, a)]
        }
        OpKind::Concat => {
            if inputs[0].rank() == 1 {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let g = dout[offset..offset + t.numel()].to_vec();
                        offset += t.numel();
                        g
                    })
                    .collect()
            } else {
                let rows = inputs[0].shape()[0];
                let total_cols: usize = inputs.iter().map(|t| t.shape()[1]).sum();
                let mut grads: Vec<Vec<f64>> =
                    inputs.iter().map(|t| vec![0.0; t.numel()]).collect();
                let mut col_off = 0;
                for (t, g) in inputs.iter().zip(grads.iter_mut()) {
                    let c = t.shape()[1];
                    for r in 0..rows {
                        let src = &dout[r * total_cols + col_off..r * total_cols + col_off + c];
                        g[r * c..(r + 1) * c].copy_from_slice(src);
                    }
                    col_off += c;
                }
                grads
            }
        }
        OpKind::Sigmoid => {
            let y = output.values();
            vec![dout.iter().zip(y).map(|(d, y)| d * y * (1.0 - y)).collect()]
        }
        OpKind::Relu => {
            let x = inputs[0].values();
            vec![dout.iter().zip(x).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect()]
        }
        OpKind::Log => {
            let x = inputs[0].values();
            vec![dout.iter().zip(x).map(|(d, x)| d / x).collect()]
        }
        OpKind::Exp => {
            let y = output.values();
            vec![dout.iter().zip(y).map(|(d, y)| d * y).collect()]
        }
        OpKind::Softmax => {
            let (rows, cols) = inputs[0].dims2();
            let y = output.values();
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let dr = &dout[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                for ((dxv, y), d) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(dr) {
                    *dxv = y * (d - dot);
                }
            }
            vec![dx]
        }
        OpKind::SegmentSum { segments, .. } => {
            let (rows, cols) = inputs[0].rows_cols();
            let mut dx = vec![0.0; rows * cols];
            for (r, seg) in segments.iter().enumerate() {
                dx[r * cols..(r + 1) * cols]
                    .copy_from_slice(&dout[seg * cols..(seg + 1) * cols]);
            }
            vec![dx]
        }
        OpKind::ReduceMean => {
            let (rows, cols) = inputs[0].rows_cols();
            let inv = 1.0 / rows as f64;
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                for (dxv, d) in dx[r * cols..(r + 1) * cols].iter_mut().zip(dout) {
                    *dxv = d * inv;
                }
            }
            vec![dx]
        }
        OpKind::ReduceVar => {
            let (rows, cols) = inputs[0].rows_cols();
            let x = inputs[0].values();
            let mut mean = vec![0.0; cols];
            for r in 0..rows {
                for (m, v) in mean.iter_mut().zip(&x[r * cols..(r + 1) * cols]) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= rows as f64;
            }
            let scale = 2.0 / rows as f64;
            let mut dx = vec![0.0; rows * cols];
            for r in 0..rows {
                for j in 0..cols {
                    dx[r * cols + j] = dout[j] * scale * (x[r * cols + j] - mean[j]);
                }
            }
            vec![dx]
        }
        OpKind::BroadcastRow { rows } => {
            let d = inputs[0].numel();
            let mut dx = vec![0.0; d];
            for r in 0..*rows {
                for (dxv, g) in dx.iter_mut().zip(&dout[r * d..(r + 1) * d]) {
                    *dxv += g;
                }
            }
            vec![dx]
        }
        OpKind::GatherRows { indices } => {
            let (rows, cols) = inputs[0].rows_cols();
            let mut dx = vec![0.0; rows * cols];
            for (r, &i) in indices.iter().enumerate() {
                for (dxv, g) in dx[i * cols..(i + 1) * cols]
                    .iter_mut()
                    .zip(&dout[r * cols..(r + 1) * cols])
                {
                    *dxv += g;
                }
            }
            vec![dx]
        }
        OpKind::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let g = dout[offset..offset + t.numel()].to_vec();
                    offset += t.numel();
                    g
                })
                .collect()
        }
    }
}
