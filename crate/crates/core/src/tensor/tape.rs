use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_raw, Array};

/// Index of a node on the tape. Inputs always reference strictly smaller
/// ids, so the tape is topologically ordered by construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// How the right operand of an elementwise op is expanded to the left
/// operand's shape.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    /// Shapes match exactly.
    None,
    /// rhs is a single value.
    Scalar,
    /// rhs has shape (n) or (1, n); repeated for every row.
    Row,
    /// rhs has shape (m, 1); repeated for every column.
    Col,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Add { a: NodeId, b: NodeId, bc: Broadcast },
    Sub { a: NodeId, b: NodeId, bc: Broadcast },
    Mul { a: NodeId, b: NodeId, bc: Broadcast },
    MatMul { a: NodeId, b: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Neg { a: NodeId },
    Sigmoid { a: NodeId },
    Softplus { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Scale { a: NodeId, c: f64 },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    LogSumExpAxis { a: NodeId, axis: usize },
    SoftmaxAxis { a: NodeId, axis: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    GatherRows { a: NodeId, idx: Vec<u32> },
    /// Max over consecutive row blocks; argmax rows kept for backward routing.
    MaxPoolRows { a: NodeId, argmax: Vec<u32> },
    /// Forward: exact one-hot of the row argmax. Backward: softmax jacobian
    /// of the input logits (straight-through estimator).
    StraightThroughOneHot { a: NodeId },
}

struct Node {
    op: Op,
    value: Array,
    adjoint: Option<Array>,
}

/// Gradients of a scalar root with respect to trainable leaves, keyed by
/// the leaf's NodeId.
pub struct GradientMap {
    grads: HashMap<NodeId, Array>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode tape. Confined to one thread for its lifetime.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn err(op: &'static str, details: String) -> Error {
    Error::ShapeMismatch { op, details }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value, adjoint: None });
        id
    }

    /// Register a trainable leaf.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf { trainable: true }, value)
    }

    /// Register a non-trainable leaf (inputs, frozen parameters).
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Leaf { trainable: false }, value)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.idx()].value
    }

    fn bc_kind(op: &'static str, a: &Array, b: &Array) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            return Ok(Broadcast::None);
        }
        if b.numel() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if a.shape().len() == 2 {
            let (m, n) = (a.rows(), a.cols());
            // (n) or (1, n) repeats over rows; (m, 1) repeats over columns.
            if b.numel() == n && b.rows() == 1 {
                return Ok(Broadcast::Row);
            }
            if b.shape() == [m, 1] {
                return Ok(Broadcast::Col);
            }
        }
        Err(err(op, format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape())))
    }

    fn elementwise(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(NodeId, NodeId, Broadcast) -> Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let bc = Self::bc_kind(opname, va, vb)?;
        let n = va.cols();
        let mut out = va.clone();
        match bc {
            Broadcast::None => {
                let bd = vb.data();
                for (o, &x) in out.data_mut().iter_mut().zip(bd) {
                    *o = f(*o, x);
                }
            }
            Broadcast::Scalar => {
                let s = vb.item();
                for o in out.data_mut().iter_mut() {
                    *o = f(*o, s);
                }
            }
            Broadcast::Row => {
                let bd = vb.data().to_vec();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = f(*o, bd[i % n]);
                }
            }
            Broadcast::Col => {
                let bd = vb.data().to_vec();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = f(*o, bd[i / n]);
                }
            }
        }
        Ok(self.push(mk(a, b, bc), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("add", a, b, |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("subtract", a, b, |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("multiply", a, b, |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(err(
                "matmul",
                format!("lhs {:?} vs rhs {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let out = Array::new(vec![m, n], matmul_raw(va.data(), vb.data(), m, k, n))?;
        Ok(self.push(Op::MatMul { a, b }, out))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut().iter_mut() {
            *v = f(*v);
        }
        self.push(op, out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// Natural log; inputs below 1e-300 are clamped so finite inputs never
    /// produce -inf.
    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(1e-300).ln(), Op::Log { a })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid { a },
        )
    }

    /// ln(1 + e^x) computed stably; -softplus(-x) is log sigmoid(x).
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p(), Op::Softplus { a })
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, Op::Scale { a, c })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum { a }, Array::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Op::Mean { a }, Array::scalar(s))
    }

    fn check_axis(op: &'static str, v: &Array, axis: usize) -> Result<(usize, usize)> {
        if v.shape().len() != 2 || axis > 1 {
            return Err(err(op, format!("need 2-d input, got {:?} axis {}", v.shape(), axis)));
        }
        Ok((v.rows(), v.cols()))
    }

    /// Sum along `axis` of a 2-d array, keeping the reduced axis with size 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = Self::check_axis("sum-axis", v, axis)?;
        let out = if axis == 1 {
            let mut o = Array::zeros(vec![m, 1]);
            for i in 0..m {
                o.data_mut()[i] = v.row(i).iter().sum();
            }
            o
        } else {
            let mut o = Array::zeros(vec![1, n]);
            for i in 0..m {
                for j in 0..n {
                    o.data_mut()[j] += v.at(i, j);
                }
            }
            o
        };
        Ok(self.push(Op::SumAxis { a, axis }, out))
    }

    /// Numerically stable logsumexp along `axis`, reduced axis kept as size 1.
    pub fn logsumexp_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = Self::check_axis("logsumexp", v, axis)?;
        let out = if axis == 1 {
            let mut o = Array::zeros(vec![m, 1]);
            for i in 0..m {
                o.data_mut()[i] = logsumexp(v.row(i));
            }
            o
        } else {
            let mut o = Array::zeros(vec![1, n]);
            for j in 0..n {
                let col: Vec<f64> = (0..m).map(|i| v.at(i, j)).collect();
                o.data_mut()[j] = logsumexp(&col);
            }
            o
        };
        Ok(self.push(Op::LogSumExpAxis { a, axis }, out))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = Self::check_axis("softmax", v, axis)?;
        let mut out = v.clone();
        if axis == 1 {
            for i in 0..m {
                let lse = logsumexp(v.row(i));
                for j in 0..n {
                    out.set(i, j, (v.at(i, j) - lse).exp());
                }
            }
        } else {
            for j in 0..n {
                let col: Vec<f64> = (0..m).map(|i| v.at(i, j)).collect();
                let lse = logsumexp(&col);
                for i in 0..m {
                    out.set(i, j, (v.at(i, j) - lse).exp());
                }
            }
        }
        Ok(self.push(Op::SoftmaxAxis { a, axis }, out))
    }

    /// Concatenate 2-d arrays with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(err("concat", "no inputs".into()));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != m {
                return Err(err(
                    "concat",
                    format!("row mismatch: {:?} vs {} rows", v.shape(), m),
                ));
            }
            total += v.cols();
        }
        let mut out = Array::zeros(vec![m, total]);
        let cols = total;
        let mut off = 0;
        for &p in parts {
            let v = self.value(p).clone();
            let c = v.cols();
            for i in 0..m {
                out.data_mut()[i * cols + off..i * cols + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, out))
    }

    /// Stack 2-d arrays with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(err("concat-rows", "no inputs".into()));
        }
        let n = self.value(parts[0]).cols();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(err(
                    "concat-rows",
                    format!("column mismatch: {:?} vs {} cols", v.shape(), n),
                ));
            }
            total += v.rows();
        }
        let mut data = Vec::with_capacity(total * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Array::new(vec![total, n], data)?;
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, out))
    }

    /// Columns [start, start+len) of a 2-d array.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        if v.shape().len() != 2 || start + len > n {
            return Err(err(
                "slice-cols",
                format!("[{}..{}) of {:?}", start, start + len, v.shape()),
            ));
        }
        let mut out = Array::zeros(vec![m, len]);
        for i in 0..m {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&v.row(i)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { a, start, len }, out))
    }

    /// Select rows by index, with repetition allowed; backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[u32]) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= m) {
            return Err(err("gather-rows", format!("index {} out of {} rows", bad, m)));
        }
        let mut out = Array::zeros(vec![idx.len(), n]);
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(v.row(i as usize));
        }
        Ok(self.push(Op::GatherRows { a, idx: idx.to_vec() }, out))
    }

    /// Max over consecutive row blocks of size `group`: (G*group, C) -> (G, C).
    pub fn max_pool_rows(&mut self, a: NodeId, group: usize) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        if group == 0 || m % group != 0 {
            return Err(err(
                "max-pool-rows",
                format!("{} rows not divisible by group {}", m, group),
            ));
        }
        let g = m / group;
        let mut out = Array::zeros(vec![g, n]);
        let mut argmax = vec![0u32; g * n];
        for b in 0..g {
            for j in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = b * group;
                for r in b * group..(b + 1) * group {
                    let x = v.at(r, j);
                    if x > best {
                        best = x;
                        best_r = r;
                    }
                }
                out.set(b, j, best);
                argmax[b * n + j] = best_r as u32;
            }
        }
        Ok(self.push(Op::MaxPoolRows { a, argmax }, out))
    }

    /// Row-wise hard one-hot of the argmax; gradients flow as if the forward
    /// had been a row softmax.
    pub fn straight_through_onehot(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (m, n) = Self::check_axis("straight-through", v, 1)?;
        let mut out = Array::zeros(vec![m, n]);
        for i in 0..m {
            let row = v.row(i);
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.set(i, best, 1.0);
        }
        Ok(self.push(Op::StraightThroughOneHot { a }, out))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// trainable leaf reached by the sweep.
    pub fn backward(&mut self, root: NodeId) -> Result<GradientMap> {
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(self.value(root).shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        let root_shape = self.nodes[root.idx()].value.shape().to_vec();
        self.nodes[root.idx()].adjoint = Some(Array::new(root_shape, vec![1.0])?);

        for i in (0..=root.idx()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(g) = node.adjoint.take() else { continue };
            apply_backward(&node.op, &node.value, &g, before);
            node.adjoint = Some(g);
        }

        let mut grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                if let Some(adj) = &node.adjoint {
                    grads.insert(NodeId(i as u32), adj.clone());
                }
            }
        }
        Ok(GradientMap { grads })
    }

    /// Adjoint of a node after `backward`, if it was reached.
    pub fn adjoint(&self, id: NodeId) -> Option<&Array> {
        self.nodes[id.idx()].adjoint.as_ref()
    }
}

/// Stable logsumexp of a slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn accumulate(target: &mut Option<Array>, shape: &[usize], add: impl Fn(&mut [f64])) {
    let arr = target.get_or_insert_with(|| Array::zeros(shape.to_vec()));
    add(arr.data_mut());
}

/// Reduce a full-shape gradient onto a broadcast operand.
fn reduce_bc(g: &[f64], rows: usize, cols: usize, bc: Broadcast, out: &mut [f64], sign: f64) {
    match bc {
        Broadcast::None => {
            for (o, &x) in out.iter_mut().zip(g) {
                *o += sign * x;
            }
        }
        Broadcast::Scalar => {
            out[0] += sign * g.iter().sum::<f64>();
        }
        Broadcast::Row => {
            for i in 0..rows {
                for j in 0..cols {
                    out[j] += sign * g[i * cols + j];
                }
            }
        }
        Broadcast::Col => {
            for i in 0..rows {
                for j in 0..cols {
                    out[i] += sign * g[i * cols + j];
                }
            }
        }
    }
}

fn apply_backward(op: &Op, value: &Array, g: &Array, before: &mut [Node]) {
    match op {
        Op::Leaf { .. } => {}
        Op::Add { a, b, bc } => {
            let (rows, cols) = (g.rows(), g.cols());
            {
                let na = &mut before[a.idx()];
                let shape = na.value.shape().to_vec();
                accumulate(&mut na.adjoint, &shape, |d| {
                    for (o, &x) in d.iter_mut().zip(g.data()) {
                        *o += x;
                    }
                });
            }
            let nb = &mut before[b.idx()];
            let shape = nb.value.shape().to_vec();
            accumulate(&mut nb.adjoint, &shape, |d| reduce_bc(g.data(), rows, cols, *bc, d, 1.0));
        }
        Op::Sub { a, b, bc } => {
            let (rows, cols) = (g.rows(), g.cols());
            {
                let na = &mut before[a.idx()];
                let shape = na.value.shape().to_vec();
                accumulate(&mut na.adjoint, &shape, |d| {
                    for (o, &x) in d.iter_mut().zip(g.data()) {
                        *o += x;
                    }
                });
            }
            let nb = &mut before[b.idx()];
            let shape = nb.value.shape().to_vec();
            accumulate(&mut nb.adjoint, &shape, |d| reduce_bc(g.data(), rows, cols, *bc, d, -1.0));
        }
        Op::Mul { a, b, bc } => {
            let (rows, cols) = (g.rows(), g.cols());
            let va = before[a.idx()].value.clone();
            let vb = before[b.idx()].value.clone();
            {
                let na = &mut before[a.idx()];
                let shape = na.value.shape().to_vec();
                accumulate(&mut na.adjoint, &shape, |d| {
                    for (i, o) in d.iter_mut().enumerate() {
                        let bval = match bc {
                            Broadcast::None => vb.data()[i],
                            Broadcast::Scalar => vb.item(),
                            Broadcast::Row => vb.data()[i % cols],
                            Broadcast::Col => vb.data()[i / cols],
                        };
                        *o += g.data()[i] * bval;
                    }
                });
            }
            let nb = &mut before[b.idx()];
            let shape = nb.value.shape().to_vec();
            accumulate(&mut nb.adjoint, &shape, |d| {
                let ga: Vec<f64> =
                    g.data().iter().zip(va.data()).map(|(&gx, &ax)| gx * ax).collect();
                reduce_bc(&ga, rows, cols, *bc, d, 1.0);
            });
        }
        Op::MatMul { a, b } => {
            let va = before[a.idx()].value.clone();
            let vb = before[b.idx()].value.clone();
            let (m, k) = (va.rows(), va.cols());
            let n = vb.cols();
            {
                // dA = G * B^T
                let na = &mut before[a.idx()];
                accumulate(&mut na.adjoint, &[m, k], |d| {
                    matmul_acc(d, g.data(), false, m, n, vb.data(), true, k, n);
                });
            }
            // dB = A^T * G
            let nb = &mut before[b.idx()];
            accumulate(&mut nb.adjoint, &[k, n], |d| {
                matmul_acc(d, va.data(), true, m, k, g.data(), false, m, n);
            });
        }
        Op::Tanh { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    let y = value.data()[i];
                    *o += g.data()[i] * (1.0 - y * y);
                }
            });
        }
        Op::Relu { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let va = na.value.clone();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    if va.data()[i] > 0.0 {
                        *o += g.data()[i];
                    }
                }
            });
        }
        Op::Exp { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    *o += g.data()[i] * value.data()[i];
                }
            });
        }
        Op::Log { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let va = na.value.clone();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    let x = va.data()[i];
                    if x >= 1e-300 {
                        *o += g.data()[i] / x;
                    }
                }
            });
        }
        Op::Neg { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    *o -= g.data()[i];
                }
            });
        }
        Op::Sigmoid { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    let y = value.data()[i];
                    *o += g.data()[i] * y * (1.0 - y);
                }
            });
        }
        Op::Softplus { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let va = na.value.clone();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    let x = va.data()[i];
                    let sig = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) };
                    *o += g.data()[i] * sig;
                }
            });
        }
        Op::Clamp { a, lo, hi } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let va = na.value.clone();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    let x = va.data()[i];
                    if x >= *lo && x <= *hi {
                        *o += g.data()[i];
                    }
                }
            });
        }
        Op::Scale { a, c } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            accumulate(&mut na.adjoint, &shape, |d| {
                for (i, o) in d.iter_mut().enumerate() {
                    *o += c * g.data()[i];
                }
            });
        }
        Op::Sum { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let gs = g.item();
            accumulate(&mut na.adjoint, &shape, |d| {
                for o in d.iter_mut() {
                    *o += gs;
                }
            });
        }
        Op::Mean { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let n: usize = shape.iter().product();
            let gs = g.item() / n as f64;
            accumulate(&mut na.adjoint, &shape, |d| {
                for o in d.iter_mut() {
                    *o += gs;
                }
            });
        }
        Op::SumAxis { a, axis } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let (m, n) = (shape[0], shape[1]);
            accumulate(&mut na.adjoint, &shape, |d| {
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += if *axis == 1 { g.data()[i] } else { g.data()[j] };
                    }
                }
            });
        }
        Op::LogSumExpAxis { a, axis } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let (m, n) = (shape[0], shape[1]);
            let va = na.value.clone();
            accumulate(&mut na.adjoint, &shape, |d| {
                for i in 0..m {
                    for j in 0..n {
                        let (lse, gv) = if *axis == 1 {
                            (value.data()[i], g.data()[i])
                        } else {
                            (value.data()[j], g.data()[j])
                        };
                        d[i * n + j] += gv * (va.at(i, j) - lse).exp();
                    }
                }
            });
        }
        Op::SoftmaxAxis { a, axis } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let (m, n) = (shape[0], shape[1]);
            // dx = y * (g - sum(g*y)) along the reduced axis
            accumulate(&mut na.adjoint, &shape, |d| {
                if *axis == 1 {
                    for i in 0..m {
                        let dot: f64 =
                            (0..n).map(|j| g.data()[i * n + j] * value.data()[i * n + j]).sum();
                        for j in 0..n {
                            let y = value.data()[i * n + j];
                            d[i * n + j] += y * (g.data()[i * n + j] - dot);
                        }
                    }
                } else {
                    for j in 0..n {
                        let dot: f64 =
                            (0..m).map(|i| g.data()[i * n + j] * value.data()[i * n + j]).sum();
                        for i in 0..m {
                            let y = value.data()[i * n + j];
                            d[i * n + j] += y * (g.data()[i * n + j] - dot);
                        }
                    }
                }
            });
        }
        Op::ConcatCols { parts } => {
            let m = g.rows();
            let total = g.cols();
            let mut off = 0;
            for &p in parts {
                let np = &mut before[p.idx()];
                let shape = np.value.shape().to_vec();
                let c = np.value.cols();
                accumulate(&mut np.adjoint, &shape, |d| {
                    for i in 0..m {
                        for j in 0..c {
                            d[i * c + j] += g.data()[i * total + off + j];
                        }
                    }
                });
                off += c;
            }
        }
        Op::ConcatRows { parts } => {
            let n = g.cols();
            let mut off = 0;
            for &p in parts {
                let np = &mut before[p.idx()];
                let shape = np.value.shape().to_vec();
                let rows = np.value.rows();
                accumulate(&mut np.adjoint, &shape, |d| {
                    d.iter_mut()
                        .zip(&g.data()[off * n..(off + rows) * n])
                        .for_each(|(o, &x)| *o += x);
                });
                off += rows;
            }
        }
        Op::SliceCols { a, start, len } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let n = shape[1];
            let m = shape[0];
            accumulate(&mut na.adjoint, &shape, |d| {
                for i in 0..m {
                    for j in 0..*len {
                        d[i * n + start + j] += g.data()[i * len + j];
                    }
                }
            });
        }
        Op::GatherRows { a, idx } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let n = shape[1];
            accumulate(&mut na.adjoint, &shape, |d| {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[i as usize * n + j] += g.data()[r * n + j];
                    }
                }
            });
        }
        Op::MaxPoolRows { a, argmax } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let n = shape[1];
            accumulate(&mut na.adjoint, &shape, |d| {
                for (k, &r) in argmax.iter().enumerate() {
                    let j = k % n;
                    d[r as usize * n + j] += g.data()[k];
                }
            });
        }
        Op::StraightThroughOneHot { a } => {
            let na = &mut before[a.idx()];
            let shape = na.value.shape().to_vec();
            let (m, n) = (shape[0], shape[1]);
            let va = na.value.clone();
            accumulate(&mut na.adjoint, &shape, |d| {
                for i in 0..m {
                    let lse = logsumexp(va.row(i));
                    let soft: Vec<f64> = va.row(i).iter().map(|x| (x - lse).exp()).collect();
                    let dot: f64 = (0..n).map(|j| g.data()[i * n + j] * soft[j]).sum();
                    for j in 0..n {
                        d[i * n + j] += soft[j] * (g.data()[i * n + j] - dot);
                    }
                }
            });
        }
    }
}
