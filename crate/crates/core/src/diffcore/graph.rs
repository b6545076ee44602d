use std::collections::HashMap;

use super::array::{
    broadcast_shape, matmul, matmul_nt, matmul_tn, reduce_broadcast, split_axis, Bcast,
};
use super::{DiffError, GradientMap, NdArray, ParamId, ParamStore};

/// Epsilon added to the variance in [`Op::LayerNorm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Reference to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recordable operation together with its inputs and attributes.
#[derive(Clone, Debug)]
pub enum Op {
    Constant(NdArray),
    Param(ParamId),
    /// `[m,k] x [k,n]`.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { input: NodeId, axis: usize, start: usize, end: usize },
    Reshape { input: NodeId, shape: Vec<usize> },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Abs(NodeId),
    /// `ln(max(x, floor))`.
    Log { input: NodeId, floor: f64 },
    Scale(NodeId, f64),
    Softmax { input: NodeId, axis: usize },
    /// Normalizes to zero mean and unit variance along `axis`, no affine part.
    LayerNorm { input: NodeId, axis: usize },
    /// `axis: None` reduces everything to a scalar.
    Sum { input: NodeId, axis: Option<usize> },
    Mean { input: NodeId, axis: Option<usize> },
    GatherRows { input: NodeId, index: Vec<usize> },
    /// Adds row `i` of the input into output row `index[i]`, in input order.
    ScatterAddRows { input: NodeId, index: Vec<usize>, rows: usize },
    /// Column-wise softmax of a 2-D input within groups of rows sharing a segment id.
    SegmentSoftmax { input: NodeId, segment: Vec<usize>, segments: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant(_) => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "elemwise-mul",
            Op::Div(..) => "div",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Abs(_) => "abs",
            Op::Log { .. } => "log",
            Op::Scale(..) => "scale",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::GatherRows { .. } => "gather-rows",
            Op::ScatterAddRows { .. } => "scatter-add-rows",
            Op::SegmentSoftmax { .. } => "segment-softmax",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Constant(_) | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. }
            | Op::Reshape { input, .. }
            | Op::Log { input, .. }
            | Op::Softmax { input, .. }
            | Op::LayerNorm { input, .. }
            | Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::GatherRows { input, .. }
            | Op::ScatterAddRows { input, .. }
            | Op::SegmentSoftmax { input, .. } => vec![*input],
            Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Abs(a)
            | Op::Scale(a, _) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: NdArray,
    needs_grad: bool,
    /// Saved per-row inverse standard deviations for layer-norm.
    saved: Vec<f64>,
}

/// Eagerly evaluated tape of operations supporting reverse-mode gradients.
///
/// Every op computes its output when recorded; [`Graph::backward`] walks the
/// tape once in reverse. Reductions accumulate sequentially along the leading
/// axis, so results are reproducible bit for bit. `scatter-add-rows` sums in
/// input order: permuting its (index, row) pairs can change the last bits of
/// the result (differences stay within 1e-12 for unit-scale data).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> DiffError {
    DiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> DiffError {
    DiffError::Invalid { op, msg: msg.into() }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &NdArray {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// First node (in recording order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (NodeId(i), n.op.name()))
    }

    pub fn constant(&mut self, value: NdArray) -> NodeId {
        // the tape keeps the value on the node only
        self.push(Op::Constant(NdArray::zeros(&[0])), value, false, Vec::new())
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(NdArray::scalar(value))
    }

    /// Leaf node for a registered parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let value = store.get(id).clone();
        let node = self.push(Op::Param(id), value, store.is_trainable(id), Vec::new());
        self.params.insert(id, node);
        node
    }

    fn push(&mut self, op: Op, value: NdArray, needs_grad: bool, saved: Vec<f64>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            saved,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&NdArray, DiffError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| invalid("record", format!("unknown node {}", id.0)))
    }

    /// Evaluates `op` on its (already recorded) inputs and appends it to the tape.
    pub fn record(&mut self, op: Op) -> Result<NodeId, DiffError> {
        if let Op::Constant(value) = op {
            return Ok(self.constant(value));
        }
        let inputs = op.inputs();
        for &i in &inputs {
            self.check(i)?;
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let (value, saved) = self.forward(&op)?;
        Ok(self.push(op, value, needs_grad, saved))
    }

    fn forward(&self, op: &Op) -> Result<(NdArray, Vec<f64>), DiffError> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = match op {
            Op::Constant(a) => a.clone(),
            Op::Param(_) => return Err(invalid("param", "use Graph::param to add parameters")),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(shape_err("matmul", &[a.shape(), b.shape()]));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                NdArray::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))?
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (v(a), v(b));
                let out_shape = broadcast_shape(a.shape(), b.shape())
                    .ok_or_else(|| shape_err(op.name(), &[a.shape(), b.shape()]))?;
                let ma = Bcast::new(a.shape(), &out_shape);
                let mb = Bcast::new(b.shape(), &out_shape);
                let n: usize = out_shape.iter().product();
                let (ad, bd) = (a.data(), b.data());
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    Op::Mul(..) => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                let data = (0..n).map(|i| f(ad[ma.at(i)], bd[mb.at(i)])).collect();
                NdArray::new(out_shape, data)?
            }
            Op::Concat { inputs, axis } => {
                let first = inputs
                    .first()
                    .ok_or_else(|| invalid("concat", "no inputs"))?;
                let base = v(first).shape().to_vec();
                if *axis >= base.len() {
                    return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
                }
                let mut total = 0;
                for id in inputs {
                    let s = v(id).shape();
                    let compatible = s.len() == base.len()
                        && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                    if !compatible {
                        let shapes: Vec<&[usize]> = inputs.iter().map(|i| v(i).shape()).collect();
                        return Err(shape_err("concat", &shapes));
                    }
                    total += s[*axis];
                }
                let mut shape = base.clone();
                shape[*axis] = total;
                let (outer, _, inner) = split_axis(&shape, *axis);
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for id in inputs {
                        let a = v(id);
                        let block = a.shape()[*axis] * inner;
                        data.extend_from_slice(&a.data()[o * block..(o + 1) * block]);
                    }
                }
                NdArray::new(shape, data)?
            }
            Op::Slice { input, axis, start, end } => {
                let a = v(input);
                if *axis >= a.rank() || start > end || *end > a.shape()[*axis] {
                    return Err(invalid(
                        "slice",
                        format!("range {start}..{end} on axis {axis} of {:?}", a.shape()),
                    ));
                }
                let (outer, n, inner) = split_axis(a.shape(), *axis);
                let mut shape = a.shape().to_vec();
                shape[*axis] = end - start;
                let mut data = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * n * inner;
                    data.extend_from_slice(&a.data()[base + start * inner..base + end * inner]);
                }
                NdArray::new(shape, data)?
            }
            Op::Reshape { input, shape } => {
                let a = v(input);
                if shape.iter().product::<usize>() != a.len() {
                    return Err(shape_err("reshape", &[a.shape(), shape]));
                }
                a.clone().with_shape(shape.clone())
            }
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::Tanh(a) => v(a).map(f64::tanh),
            Op::Relu(a) => v(a).map(|x| x.max(0.0)),
            Op::Softplus(a) => v(a).map(softplus),
            Op::Sin(a) => v(a).map(f64::sin),
            Op::Cos(a) => v(a).map(f64::cos),
            Op::Abs(a) => v(a).map(f64::abs),
            Op::Log { input, floor } => v(input).map(|x| x.max(*floor).ln()),
            Op::Scale(a, s) => v(a).map(|x| x * s),
            Op::Softmax { input, axis } => {
                let a = v(input);
                if *axis >= a.rank() {
                    return Err(invalid("softmax", format!("axis {axis} on {:?}", a.shape())));
                }
                let (outer, n, inner) = split_axis(a.shape(), *axis);
                let mut data = a.data().to_vec();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        let max = (0..n).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for k in 0..n {
                            let e = (data[idx(k)] - max).exp();
                            data[idx(k)] = e;
                            total += e;
                        }
                        for k in 0..n {
                            data[idx(k)] /= total;
                        }
                    }
                }
                NdArray::new(a.shape().to_vec(), data)?
            }
            Op::LayerNorm { input, axis } => {
                let a = v(input);
                if *axis >= a.rank() {
                    return Err(invalid("layer-norm", format!("axis {axis} on {:?}", a.shape())));
                }
                let (outer, n, inner) = split_axis(a.shape(), *axis);
                let mut data = a.data().to_vec();
                let mut inv_std = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        let mean = (0..n).map(|k| data[idx(k)]).sum::<f64>() / n as f64;
                        let var = (0..n).map(|k| (data[idx(k)] - mean).powi(2)).sum::<f64>() / n as f64;
                        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        for k in 0..n {
                            data[idx(k)] = (data[idx(k)] - mean) * s;
                        }
                        inv_std.push(s);
                    }
                }
                return Ok((NdArray::new(a.shape().to_vec(), data)?, inv_std));
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let a = v(input);
                let mean = matches!(op, Op::Mean { .. });
                match axis {
                    None => {
                        let total: f64 = a.data().iter().sum();
                        let n = a.len().max(1) as f64;
                        NdArray::scalar(if mean { total / n } else { total })
                    }
                    Some(axis) => {
                        if *axis >= a.rank() {
                            return Err(invalid(op.name(), format!("axis {axis} on {:?}", a.shape())));
                        }
                        let (outer, n, inner) = split_axis(a.shape(), *axis);
                        let mut data = vec![0.0; outer * inner];
                        for o in 0..outer {
                            for k in 0..n {
                                let src = &a.data()[(o * n + k) * inner..(o * n + k + 1) * inner];
                                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        if mean && n > 0 {
                            data.iter_mut().for_each(|d| *d /= n as f64);
                        }
                        let mut shape = a.shape().to_vec();
                        shape.remove(*axis);
                        NdArray::new(shape, data)?
                    }
                }
            }
            Op::GatherRows { input, index } => {
                let a = v(input);
                if a.rank() == 0 {
                    return Err(shape_err("gather-rows", &[a.shape()]));
                }
                let rows = a.shape()[0];
                let width = a.len() / rows.max(1);
                let mut data = Vec::with_capacity(index.len() * width);
                for &r in index {
                    if r >= rows {
                        return Err(invalid("gather-rows", format!("row {r} of {rows}")));
                    }
                    data.extend_from_slice(&a.data()[r * width..(r + 1) * width]);
                }
                let mut shape = a.shape().to_vec();
                shape[0] = index.len();
                NdArray::new(shape, data)?
            }
            Op::ScatterAddRows { input, index, rows } => {
                let a = v(input);
                if a.rank() == 0 || a.shape()[0] != index.len() {
                    return Err(invalid(
                        "scatter-add-rows",
                        format!("{} indices for input {:?}", index.len(), a.shape()),
                    ));
                }
                let width: usize = a.shape()[1..].iter().product();
                let mut shape = a.shape().to_vec();
                shape[0] = *rows;
                let mut data = vec![0.0; rows * width];
                for (i, &r) in index.iter().enumerate() {
                    if r >= *rows {
                        return Err(invalid("scatter-add-rows", format!("row {r} of {rows}")));
                    }
                    let src = &a.data()[i * width..(i + 1) * width];
                    for (d, s) in data[r * width..(r + 1) * width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                NdArray::new(shape, data)?
            }
            Op::SegmentSoftmax { input, segment, segments } => {
                let a = v(input);
                if a.rank() != 2 || a.shape()[0] != segment.len() {
                    return Err(invalid(
                        "segment-softmax",
                        format!("{} segment ids for input {:?}", segment.len(), a.shape()),
                    ));
                }
                if let Some(&s) = segment.iter().find(|&&s| s >= *segments) {
                    return Err(invalid("segment-softmax", format!("segment {s} of {segments}")));
                }
                let cols = a.shape()[1];
                let mut max = vec![f64::NEG_INFINITY; segments * cols];
                for (i, &s) in segment.iter().enumerate() {
                    for c in 0..cols {
                        max[s * cols + c] = max[s * cols + c].max(a.data()[i * cols + c]);
                    }
                }
                let mut data = vec![0.0; a.len()];
                let mut total = vec![0.0; segments * cols];
                for (i, &s) in segment.iter().enumerate() {
                    for c in 0..cols {
                        let e = (a.data()[i * cols + c] - max[s * cols + c]).exp();
                        data[i * cols + c] = e;
                        total[s * cols + c] += e;
                    }
                }
                for (i, &s) in segment.iter().enumerate() {
                    for c in 0..cols {
                        data[i * cols + c] /= total[s * cols + c];
                    }
                }
                NdArray::new(a.shape().to_vec(), data)?
            }
        };
        Ok((out, Vec::new()))
    }

    /// Reverse pass from a scalar `loss`. Frozen parameters receive no gradient.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<GradientMap, DiffError> {
        let root = self.check(loss)?;
        if root.len() != 1 {
            return Err(DiffError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut out = GradientMap::zeros(store);
        let mut grads: Vec<Option<NdArray>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(NdArray::filled(root.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(pid) = node.op {
                if pid.0 < out.len() && store.is_trainable(pid) {
                    out.get_mut(pid).add_assign(&grad);
                }
                continue;
            }
            for (input, contribution) in self.input_grads(node, &grad) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(out)
    }

    fn input_grads(&self, node: &Node, grad: &NdArray) -> Vec<(NodeId, NdArray)> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = &node.value;
        let g = grad.data();
        let wants = |id: &NodeId| self.nodes[id.0].needs_grad;
        match &node.op {
            Op::Constant(_) | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut res = Vec::new();
                if wants(a) {
                    let da = matmul_nt(g, bv.data(), m, n, k);
                    res.push((*a, NdArray::new(vec![m, k], da).expect("shape")));
                }
                if wants(b) {
                    let db = matmul_tn(av.data(), g, m, k, n);
                    res.push((*b, NdArray::new(vec![k, n], db).expect("shape")));
                }
                res
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (av, bv) = (v(a), v(b));
                let ma = Bcast::new(av.shape(), out.shape());
                let mb = Bcast::new(bv.shape(), out.shape());
                let (ad, bd) = (av.data(), bv.data());
                let mut res = Vec::new();
                if wants(a) {
                    let ga: Vec<f64> = match &node.op {
                        Op::Add(..) | Op::Sub(..) => g.to_vec(),
                        Op::Mul(..) => g.iter().enumerate().map(|(i, g)| g * bd[mb.at(i)]).collect(),
                        _ => g.iter().enumerate().map(|(i, g)| g / bd[mb.at(i)]).collect(),
                    };
                    res.push((*a, reduce_broadcast(&ga, av.shape(), &ma)));
                }
                if wants(b) {
                    let gb: Vec<f64> = match &node.op {
                        Op::Add(..) => g.to_vec(),
                        Op::Sub(..) => g.iter().map(|g| -g).collect(),
                        Op::Mul(..) => g.iter().enumerate().map(|(i, g)| g * ad[ma.at(i)]).collect(),
                        _ => g
                            .iter()
                            .enumerate()
                            .map(|(i, g)| {
                                let y = bd[mb.at(i)];
                                -g * ad[ma.at(i)] / (y * y)
                            })
                            .collect(),
                    };
                    res.push((*b, reduce_broadcast(&gb, bv.shape(), &mb)));
                }
                res
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut res = Vec::new();
                let mut offset = 0;
                for id in inputs {
                    let a = v(id);
                    let n = a.shape()[*axis];
                    if wants(id) {
                        let mut data = Vec::with_capacity(a.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g[base..base + n * inner]);
                        }
                        res.push((*id, NdArray::new(a.shape().to_vec(), data).expect("shape")));
                    }
                    offset += n;
                }
                res
            }
            Op::Slice { input, axis, start, end } => {
                let a = v(input);
                let (outer, n, inner) = split_axis(a.shape(), *axis);
                let width = (end - start) * inner;
                let mut ga = NdArray::zeros(a.shape());
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    ga.data_mut()[dst..dst + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                vec![(*input, ga)]
            }
            Op::Reshape { input, .. } => {
                vec![(*input, grad.clone().with_shape(v(input).shape().to_vec()))]
            }
            Op::Sigmoid(a) => vec![(*a, zip_map(grad, out, |g, y| g * y * (1.0 - y)))],
            Op::Tanh(a) => vec![(*a, zip_map(grad, out, |g, y| g * (1.0 - y * y)))],
            Op::Relu(a) => vec![(*a, zip_map(grad, v(a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Softplus(a) => vec![(*a, zip_map(grad, v(a), |g, x| g * sigmoid(x)))],
            Op::Sin(a) => vec![(*a, zip_map(grad, v(a), |g, x| g * x.cos()))],
            Op::Cos(a) => vec![(*a, zip_map(grad, v(a), |g, x| -g * x.sin()))],
            Op::Abs(a) => vec![(*a, zip_map(grad, v(a), |g, x| g * sign(x)))],
            Op::Log { input, floor } => {
                let floor = *floor;
                vec![(*input, zip_map(grad, v(input), |g, x| if x > floor { g / x } else { 0.0 }))]
            }
            Op::Scale(a, s) => vec![(*a, grad.map(|g| g * s))],
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..n {
                            ga[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*input, NdArray::new(out.shape().to_vec(), ga).expect("shape"))]
            }
            Op::LayerNorm { input, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let s = node.saved[o * inner + i];
                        let idx = |k: usize| o * n * inner + k * inner + i;
                        let mean_g: f64 = (0..n).map(|k| g[idx(k)]).sum::<f64>() / n as f64;
                        let mean_gy: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum::<f64>() / n as f64;
                        for k in 0..n {
                            ga[idx(k)] = s * (g[idx(k)] - mean_g - y[idx(k)] * mean_gy);
                        }
                    }
                }
                vec![(*input, NdArray::new(out.shape().to_vec(), ga).expect("shape"))]
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let a = v(input);
                let mean = matches!(node.op, Op::Mean { .. });
                let ga = match axis {
                    None => {
                        let scale = if mean { 1.0 / a.len().max(1) as f64 } else { 1.0 };
                        NdArray::filled(a.shape(), g[0] * scale)
                    }
                    Some(axis) => {
                        let (outer, n, inner) = split_axis(a.shape(), *axis);
                        let scale = if mean && n > 0 { 1.0 / n as f64 } else { 1.0 };
                        let mut data = Vec::with_capacity(a.len());
                        for o in 0..outer {
                            for _ in 0..n {
                                data.extend(g[o * inner..(o + 1) * inner].iter().map(|x| x * scale));
                            }
                        }
                        NdArray::new(a.shape().to_vec(), data).expect("shape")
                    }
                };
                vec![(*input, ga)]
            }
            Op::GatherRows { input, index } => {
                let a = v(input);
                let width = a.len() / a.shape()[0].max(1);
                let mut ga = NdArray::zeros(a.shape());
                for (i, &r) in index.iter().enumerate() {
                    let src = &g[i * width..(i + 1) * width];
                    for (d, s) in ga.data_mut()[r * width..(r + 1) * width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![(*input, ga)]
            }
            Op::ScatterAddRows { input, index, .. } => {
                let a = v(input);
                let width: usize = a.shape()[1..].iter().product();
                let mut data = Vec::with_capacity(a.len());
                for &r in index {
                    data.extend_from_slice(&g[r * width..(r + 1) * width]);
                }
                vec![(*input, NdArray::new(a.shape().to_vec(), data).expect("shape"))]
            }
            Op::SegmentSoftmax { input, segment, segments } => {
                let cols = out.shape()[1];
                let y = out.data();
                let mut dot = vec![0.0; segments * cols];
                for (i, &s) in segment.iter().enumerate() {
                    for c in 0..cols {
                        dot[s * cols + c] += y[i * cols + c] * g[i * cols + c];
                    }
                }
                let mut ga = vec![0.0; y.len()];
                for (i, &s) in segment.iter().enumerate() {
                    for c in 0..cols {
                        let j = i * cols + c;
                        ga[j] = y[j] * (g[j] - dot[s * cols + c]);
                    }
                }
                vec![(*input, NdArray::new(out.shape().to_vec(), ga).expect("shape"))]
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(grad: &NdArray, other: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    let data = grad.data().iter().zip(other.data()).map(|(&g, &x)| f(g, x)).collect();
    NdArray::new(other.shape().to_vec(), data).expect("shape")
}

/// Convenience wrappers around [`Graph::record`].
impl Graph {
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Div(a, b))
    }
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        self.record(Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        })
    }
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId, DiffError> {
        self.record(Op::Slice { input, axis, start, end })
    }
    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.record(Op::Reshape {
            input,
            shape: shape.to_vec(),
        })
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Sigmoid(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Tanh(a))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Relu(a))
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Softplus(a))
    }
    pub fn sin(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Sin(a))
    }
    pub fn cos(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Cos(a))
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.record(Op::Abs(a))
    }
    pub fn log(&mut self, input: NodeId, floor: f64) -> Result<NodeId, DiffError> {
        self.record(Op::Log { input, floor })
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, DiffError> {
        self.record(Op::Scale(a, factor))
    }
    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.record(Op::Softmax { input, axis })
    }
    pub fn layer_norm(&mut self, input: NodeId, axis: usize) -> Result<NodeId, DiffError> {
        self.record(Op::LayerNorm { input, axis })
    }
    pub fn sum(&mut self, input: NodeId, axis: Option<usize>) -> Result<NodeId, DiffError> {
        self.record(Op::Sum { input, axis })
    }
    pub fn mean(&mut self, input: NodeId, axis: Option<usize>) -> Result<NodeId, DiffError> {
        self.record(Op::Mean { input, axis })
    }
    pub fn gather_rows(&mut self, input: NodeId, index: Vec<usize>) -> Result<NodeId, DiffError> {
        self.record(Op::GatherRows { input, index })
    }
    pub fn scatter_add_rows(&mut self, input: NodeId, index: Vec<usize>, rows: usize) -> Result<NodeId, DiffError> {
        self.record(Op::ScatterAddRows { input, index, rows })
    }
    pub fn segment_softmax(
        &mut self,
        input: NodeId,
        segment: Vec<usize>,
        segments: usize,
    ) -> Result<NodeId, DiffError> {
        self.record(Op::SegmentSoftmax {
            input,
            segment,
            segments,
        })
    }
}
