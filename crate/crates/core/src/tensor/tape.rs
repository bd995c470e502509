use std::collections::{BTreeMap, BTreeSet};

use super::{gelu, gelu_grad, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Index of a recorded node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Identifier of a model parameter registered on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowVector(NodeId, NodeId),
    Gelu(NodeId),
    /// Saved value is the node's own output.
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    SliceRows {
        src: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    MseTokenLoss(NodeId, NodeId),
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowVector(..) => "add_row_vector",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::Transpose(_) => "transpose",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::MseTokenLoss(..) => "mse_token_loss",
            Op::Sum(_) => "sum",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowVector(a, b)
            | Op::MseTokenLoss(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::Sum(a) => vec![*a],
            Op::SliceCols { src, .. } | Op::SliceRows { src, .. } => vec![*src],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients keyed by parameter, one entry per trainable parameter on the tape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradMap(BTreeMap<ParamId, Tensor>);

impl GradMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.0.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }
}

/// Append-only record of one forward computation.
///
/// A tape supports exactly one [`backward`](Tape::backward) call.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::Tape("tape already consumed by backward".into()));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("{} (node {})", op.name(), self.nodes.len()),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::Tape(format!("unknown node {}", id.0)))
    }

    /// Records a constant input. Never receives a gradient entry.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, value)
    }

    /// Records a parameter. It receives a gradient only if it is trainable
    /// at backward time.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<NodeId> {
        self.push(Op::Param(id), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        self.push(Op::MatMul(a, b), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    fn binary(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        ta.zip_map(tb, f)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let out = self.check(a)?.map(|v| v * s);
        self.push(Op::Scale(a, s), out)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row_vector(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (ta, tv) = (self.check(a)?, self.check(v)?);
        let (_, n) = ta.dims2()?;
        if tv.shape() != [n] {
            return Err(Error::shape("add_row_vector", ta.shape(), tv.shape()));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tv.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRowVector(a, v), out)
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.check(a)?.map(gelu);
        self.push(Op::Gelu(a), out)
    }

    /// Row-wise softmax of `a + mask`. Mask entries are `0` (keep) or `-inf`
    /// (drop); dropped entries come out as exactly `0`.
    pub fn softmax_rows(&mut self, a: NodeId, mask: &Tensor) -> Result<NodeId> {
        let ta = self.check(a)?;
        let (m, n) = ta.dims2()?;
        if mask.shape() != ta.shape() {
            return Err(Error::shape("softmax_rows", ta.shape(), mask.shape()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let mrow = &mask.data()[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (&x, &mk) in row.iter().zip(mrow) {
                if mk == 0.0 {
                    max = max.max(x);
                } else if mk != f64::NEG_INFINITY {
                    return Err(Error::Tape(format!(
                        "softmax mask entries must be 0 or -inf, found {mk}"
                    )));
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Tape(format!("softmax row {i} is fully masked")));
            }
            let orow = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for ((o, &x), &mk) in orow.iter_mut().zip(row).zip(mrow) {
                if mk == 0.0 {
                    *o = (x - max).exp();
                    total += *o;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Per-row standardization followed by an affine map with `gain` and `bias`.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layernorm eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (m, n) = tx.dims2()?;
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::shape("layernorm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                let xh = (row[j] - mean) * istd;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.check(a)?.transpose()?;
        self.push(Op::Transpose(a), out)
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let ta = self.check(a)?;
        let (m, n) = ta.dims2()?;
        if start + width > n {
            return Err(Error::shape("slice_cols", ta.shape(), &[start, width]));
        }
        let mut out = Vec::with_capacity(m * width);
        for row in ta.data().chunks(n) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let out = Tensor::new(vec![m, width], out)?;
        self.push(Op::SliceCols { src: a, start }, out)
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.check(a)?;
        let (m, n) = ta.dims2()?;
        if start + len > m {
            return Err(Error::shape("slice_rows", ta.shape(), &[start, len]));
        }
        let out = Tensor::new(vec![len, n], ta.data()[start * n..(start + len) * n].to_vec())?;
        self.push(Op::SliceRows { src: a, start }, out)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Tape("concat_cols of zero parts".into()))?;
        let (m, _) = self.check(*first)?.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.check(p)?;
            let (r, c) = t.dims2()?;
            if r != m {
                return Err(Error::shape("concat_cols", self.check(*first)?.shape(), t.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = self.check(table)?;
        let (v, n) = tt.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfRange {
                    what: "row index",
                    index: id,
                    max: v.saturating_sub(1),
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), n], out)?;
        self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    /// Mean over rows of the squared Euclidean distance between `h` and `target`.
    pub fn mse_token_loss(&mut self, h: NodeId, target: NodeId) -> Result<NodeId> {
        let (th, tt) = (self.check(h)?, self.check(target)?);
        if th.shape() != tt.shape() {
            return Err(Error::shape("mse_token_loss", th.shape(), tt.shape()));
        }
        let (rows, _) = th.dims2()?;
        if rows == 0 {
            return Err(Error::Tape("mse_token_loss over zero tokens".into()));
        }
        let total: f64 = th
            .data()
            .iter()
            .zip(tt.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        self.push(Op::MseTokenLoss(h, target), Tensor::scalar(total / rows as f64))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.check(a)?.data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(total))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every id in `trainable` must have been recorded with [`Tape::param`];
    /// each gets exactly one entry (zeros if it does not influence the loss).
    /// Parameters outside `trainable` get none. Consumes the tape.
    pub fn backward(&mut self, loss: NodeId, trainable: &BTreeSet<ParamId>) -> Result<GradMap> {
        if self.consumed {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        }
        let loss_value = self.check(loss)?;
        if !loss_value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut recorded = BTreeSet::new();
        for node in &self.nodes {
            if let Op::Param(p) = node.op {
                recorded.insert(p);
            }
        }
        if let Some(missing) = trainable.iter().find(|p| !recorded.contains(p)) {
            return Err(Error::Tape(format!(
                "trainable parameter {} was not recorded on the tape",
                missing.0
            )));
        }
        self.consumed = true;

        // Only nodes that depend on a trainable parameter need a gradient.
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Param(p) => trainable.contains(p),
                Op::Leaf => false,
                op => op.inputs().iter().any(|inp| needs[inp.0]),
            };
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !needs[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            let mut send = |id: NodeId, contrib: Vec<f64>| {
                if !needs[id.0] {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match out.get_mut(p) {
                        Some(acc) => {
                            let acc: &mut Tensor = acc;
                            acc.data_mut()
                                .iter_mut()
                                .zip(t.data())
                                .for_each(|(a, c)| *a += c);
                        }
                        None => {
                            out.insert(*p, t);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2()?;
                    let (_, n) = tb.dims2()?;
                    if needs[a.0] {
                        let bt = tb.transpose()?;
                        send(*a, matmul_raw(&g, bt.data(), m, n, k));
                    }
                    if needs[b.0] {
                        let at = ta.transpose()?;
                        send(*b, matmul_raw(at.data(), &g, k, m, n));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|v| -v).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    send(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                    send(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
                Op::AddRowVector(a, v) => {
                    let n = self.value(*v).numel();
                    let mut gv = vec![0.0; n];
                    for row in g.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(acc, x)| *acc += x);
                    }
                    send(*v, gv);
                    send(*a, g);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    send(*a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (_, n) = y.dims2()?;
                    let mut gx = vec![0.0; g.len()];
                    for ((grow, yrow), xrow) in
                        g.chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((x, &gy), &yy) in xrow.iter_mut().zip(grow).zip(yrow) {
                            *x = yy * (gy - dot);
                        }
                    }
                    send(*a, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gvals = self.value(*gain).data();
                    let n = gvals.len();
                    if needs[gain.0] {
                        let mut dg = vec![0.0; n];
                        for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                dg[j] += grow[j] * xrow[j];
                            }
                        }
                        send(*gain, dg);
                    }
                    if needs[bias.0] {
                        let mut db = vec![0.0; n];
                        for grow in g.chunks(n) {
                            db.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                        }
                        send(*bias, db);
                    }
                    if needs[x.0] {
                        let mut dx = vec![0.0; g.len()];
                        for (i, ((grow, xrow), drow)) in g
                            .chunks(n)
                            .zip(xhat.chunks(n))
                            .zip(dx.chunks_mut(n))
                            .enumerate()
                        {
                            let dxhat: Vec<f64> =
                                grow.iter().zip(gvals).map(|(a, b)| a * b).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                            let mean_dx =
                                dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for j in 0..n {
                                drow[j] = inv_std[i] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = node.value.dims2()?;
                    let gt = Tensor::new(vec![r, c], g)?.transpose()?;
                    send(*a, gt.into_data());
                }
                Op::SliceCols { src, start } => {
                    let (m, n) = self.value(*src).dims2()?;
                    let (_, w) = node.value.dims2()?;
                    let mut gs = vec![0.0; m * n];
                    for i in 0..m {
                        gs[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    send(*src, gs);
                }
                Op::SliceRows { src, start } => {
                    let (m, n) = self.value(*src).dims2()?;
                    let mut gs = vec![0.0; m * n];
                    gs[start * n..start * n + g.len()].copy_from_slice(&g);
                    send(*src, gs);
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = self.value(p).dims2()?;
                        let mut gp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        send(p, gp);
                        offset += w;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let (v, n) = self.value(*table).dims2()?;
                    let mut gt = vec![0.0; v * n];
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * n..(id + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(a, b)| *a += b);
                    }
                    send(*table, gt);
                }
                Op::MseTokenLoss(h, t) => {
                    let (th, tt) = (self.value(*h), self.value(*t));
                    let (rows, _) = th.dims2()?;
                    let k = 2.0 * g[0] / rows as f64;
                    let diff: Vec<f64> = th
                        .data()
                        .iter()
                        .zip(tt.data())
                        .map(|(a, b)| k * (a - b))
                        .collect();
                    if needs[t.0] {
                        send(*t, diff.iter().map(|v| -v).collect());
                    }
                    send(*h, diff);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    send(*a, vec![g[0]; n]);
                }
            }
        }

        for p in trainable {
            if !out.contains_key(p) {
                let shape = self
                    .nodes
                    .iter()
                    .find_map(|n| match n.op {
                        Op::Param(q) if q == *p => Some(n.value.shape().to_vec()),
                        _ => None,
                    })
                    .unwrap_or_default();
                out.insert(*p, Tensor::zeros(&shape));
            }
        }
        Ok(GradMap(out))
    }
}
