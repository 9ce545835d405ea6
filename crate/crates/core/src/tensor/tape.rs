use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::{Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Swish,
}

/// Padding mode of [`Var::depthwise_conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPadding {
    /// `k - 1` zeros on the left, none on the right.
    Causal,
    /// `(k - 1) / 2` zeros on each side; `k` must be odd.
    Same,
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Elementwise(Binary, usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Act(Activation, usize),
    LogSumExp {
        x: usize,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DepthwiseConv {
        x: usize,
        kernel: usize,
        left: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Transpose(usize),
    Reshape(usize),
    ReverseRows(usize),
    Sum(usize),
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    PairwiseAdd(usize, usize),
    /// Scalar loss whose gradient w.r.t. `x` was computed during the forward pass.
    Custom {
        x: usize,
        grad: Tensor,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for reverse-mode differentiation.
///
/// A tape and every [`Var`] on it are confined to one thread. Backward may be
/// run once; call [`Tape::reset_grads`] before running it again.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Records a leaf without copying its buffer.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        // Nothing upstream needs a gradient: keep the value, drop the bookkeeping.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn check_same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self, other.tape),
            "variables from different tapes"
        );
    }

    /// Stacks matrices (or higher-rank tensors) along axis 0.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let fv = first.value();
        let trailing = fv.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            self.check_same_tape(p);
            let v = p.value();
            if v.rank() == 0 || v.shape()[1..] != trailing[..] {
                return Err(Error::dim(format!(
                    "concat_rows: {:?} vs {:?}",
                    fv.shape(),
                    v.shape()
                )));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&trailing);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor { shape, data }, Op::ConcatRows(ids.clone()), &ids))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = first.value().rows();
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            if v.rank() != 2 || v.shape()[0] != rows {
                return Err(Error::dim(format!(
                    "concat_cols: {:?} vs {:?}",
                    values[0].shape(),
                    v.shape()
                )));
            }
        }
        let cols: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            Op::ConcatCols(ids.clone()),
            &ids,
        ))
    }

    /// Looks up rows of `table` (an embedding).
    pub fn gather<'t>(&'t self, table: Var<'t>, indices: &[usize]) -> Result<Var<'t>> {
        let tv = table.value();
        if tv.rank() != 2 {
            return Err(Error::dim(format!("gather table {:?}", tv.shape())));
        }
        let (n, e) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            if i >= n {
                return Err(Error::Input(format!("gather index {i} out of range {n}")));
            }
            data.extend_from_slice(tv.row(i));
        }
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), e],
                data,
            },
            Op::Gather {
                table: table.id,
                indices: indices.to_vec(),
            },
            &[table.id],
        ))
    }

    /// `out[t, u, :] = a[t, :] + b[u, :]`.
    pub fn pairwise_add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (a.value(), b.value());
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::dim(format!(
                "pairwise_add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (t, u, j) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
        let mut data = Vec::with_capacity(t * u * j);
        for ti in 0..t {
            let ar = av.row(ti);
            for ui in 0..u {
                data.extend(ar.iter().zip(bv.row(ui)).map(|(x, y)| x + y));
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![t, u, j],
                data,
            },
            Op::PairwiseAdd(a.id, b.id),
            &[a.id, b.id],
        ))
    }

    /// Records a scalar-valued function of `x` whose gradient the caller
    /// has already computed.
    pub fn custom_scalar<'t>(&'t self, x: Var<'t>, value: f64, grad: Tensor) -> Result<Var<'t>> {
        if grad.shape() != x.value().shape() {
            return Err(Error::dim(format!(
                "custom gradient {:?} for input {:?}",
                grad.shape(),
                x.shape()
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::Custom { x: x.id, grad }, &[x.id]))
    }

    /// Gradient of the last backward pass w.r.t. `var`, if one reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes.borrow()[var.id].value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check_same_tape(&loss);
        if self.backward_done.get() {
            return Err(Error::State(
                "backward already ran on this tape; reset_grads first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_op(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }
}

fn accumulate<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backward_op(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(da) = accumulate(nodes, grads, *a) {
                // dA = dC · Bᵀ
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let br = &bv.data()[p * n..(p + 1) * n];
                        da[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                // dB = Aᵀ · dC
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av.data()[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let dbr = &mut db[p * n..(p + 1) * n];
                        for (d, x) in dbr.iter_mut().zip(gr) {
                            *d += aip * x;
                        }
                    }
                }
            }
        }
        Op::Elementwise(kind, a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let bl = bv.len();
            if let Some(da) = accumulate(nodes, grads, *a) {
                match kind {
                    Binary::Add | Binary::Sub => da.iter_mut().zip(g).for_each(|(d, x)| *d += x),
                    Binary::Mul => {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i] * bv.data()[i % bl];
                        }
                    }
                }
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                match kind {
                    Binary::Add => g.iter().enumerate().for_each(|(i, x)| db[i % bl] += x),
                    Binary::Sub => g.iter().enumerate().for_each(|(i, x)| db[i % bl] -= x),
                    Binary::Mul => {
                        for (i, x) in g.iter().enumerate() {
                            db[i % bl] += x * av.data()[i];
                        }
                    }
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
            }
        }
        Op::Shift(a) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
        }
        Op::Act(kind, a) => {
            let xv = nodes[*a].value.clone();
            if let Some(da) = accumulate(nodes, grads, *a) {
                let y = out.data();
                let x = xv.data();
                for i in 0..da.len() {
                    let local = match kind {
                        Activation::Sigmoid => y[i] * (1.0 - y[i]),
                        Activation::Tanh => 1.0 - y[i] * y[i],
                        Activation::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::Swish => {
                            let s = sigmoid(x[i]);
                            s + y[i] * (1.0 - s)
                        }
                    };
                    da[i] += g[i] * local;
                }
            }
        }
        Op::LogSumExp { x, outer, n, inner } => {
            let xv = nodes[*x].value.clone();
            if let Some(dx) = accumulate(nodes, grads, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let r = out.data()[o * inner + i];
                        if r == f64::NEG_INFINITY {
                            continue;
                        }
                        let go = g[o * inner + i];
                        for j in 0..*n {
                            let idx = (o * n + j) * inner + i;
                            dx[idx] += go * (xv.data()[idx] - r).exp();
                        }
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                let w = *out.shape().last().unwrap_or(&1);
                for (r, (yr, gr)) in out.data().chunks(w).zip(g.chunks(w)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..w {
                        da[r * w + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                let w = *out.shape().last().unwrap_or(&1);
                for (r, (yr, gr)) in out.data().chunks(w).zip(g.chunks(w)).enumerate() {
                    let gs: f64 = gr.iter().sum();
                    for j in 0..w {
                        da[r * w + j] += gr[j] - yr[j].exp() * gs;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = nodes[*gain].value.clone();
            let d = gv.len();
            let gd = gv.data();
            if let Some(dg) = accumulate(nodes, grads, *gain) {
                for (i, gi) in g.iter().enumerate() {
                    dg[i % d] += gi * xhat[i];
                }
            }
            if let Some(db) = accumulate(nodes, grads, *bias) {
                for (i, gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
            }
            if let Some(dx) = accumulate(nodes, grads, *x) {
                let nf = d as f64;
                for (r, rs) in rstd.iter().enumerate() {
                    let base = r * d;
                    let mut sum_dh = 0.0;
                    let mut sum_dh_xh = 0.0;
                    for j in 0..d {
                        let dh = g[base + j] * gd[j];
                        sum_dh += dh;
                        sum_dh_xh += dh * xhat[base + j];
                    }
                    for j in 0..d {
                        let dh = g[base + j] * gd[j];
                        dx[base + j] +=
                            rs / nf * (nf * dh - sum_dh - xhat[base + j] * sum_dh_xh);
                    }
                }
            }
        }
        Op::DepthwiseConv { x, kernel, left } => {
            let (xv, kv) = (nodes[*x].value.clone(), nodes[*kernel].value.clone());
            let (t_len, d) = (xv.shape()[0], xv.shape()[1]);
            let k = kv.shape()[0];
            let left = *left as isize;
            if let Some(dx) = accumulate(nodes, grads, *x) {
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize + j as isize - left;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let s = src as usize;
                        for c in 0..d {
                            dx[s * d + c] += g[t * d + c] * kv.data()[j * d + c];
                        }
                    }
                }
            }
            if let Some(dk) = accumulate(nodes, grads, *kernel) {
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize + j as isize - left;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let s = src as usize;
                        for c in 0..d {
                            dk[j * d + c] += g[t * d + c] * xv.data()[s * d + c];
                        }
                    }
                }
            }
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &id in ids {
                let n = nodes[id].value.len();
                if let Some(d) = accumulate(nodes, grads, id) {
                    d.iter_mut()
                        .zip(&g[offset..offset + n])
                        .for_each(|(d, x)| *d += x);
                }
                offset += n;
            }
        }
        Op::ConcatCols(ids) => {
            let total = out.shape()[1];
            let mut col = 0;
            for &id in ids {
                let w = nodes[id].value.shape()[1];
                if let Some(d) = accumulate(nodes, grads, id) {
                    for (r, dr) in d.chunks_mut(w).enumerate() {
                        let src = &g[r * total + col..r * total + col + w];
                        dr.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                    }
                }
                col += w;
            }
        }
        Op::SliceRows { x, start } => {
            let w = nodes[*x].value.row_len();
            if let Some(dx) = accumulate(nodes, grads, *x) {
                dx[start * w..start * w + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, x)| *d += x);
            }
        }
        Op::SliceCols { x, start } => {
            let total = nodes[*x].value.shape()[1];
            let w = out.shape()[1];
            if let Some(dx) = accumulate(nodes, grads, *x) {
                for (r, gr) in g.chunks(w).enumerate() {
                    dx[r * total + start..r * total + start + w]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (out.shape()[0], out.shape()[1]);
            if let Some(da) = accumulate(nodes, grads, *a) {
                // out is c_in × r_in; da is r_in × c_in = c × r
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
        }
        Op::ReverseRows(a) => {
            let w = out.row_len();
            let rows = out.rows();
            if let Some(da) = accumulate(nodes, grads, *a) {
                for r in 0..rows {
                    let src = &g[r * w..(r + 1) * w];
                    let dst = &mut da[(rows - 1 - r) * w..(rows - r) * w];
                    dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = accumulate(nodes, grads, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Gather { table, indices } => {
            let e = out.shape()[1];
            if let Some(dt) = accumulate(nodes, grads, *table) {
                for (r, &i) in indices.iter().enumerate() {
                    dt[i * e..(i + 1) * e]
                        .iter_mut()
                        .zip(&g[r * e..(r + 1) * e])
                        .for_each(|(d, x)| *d += x);
                }
            }
        }
        Op::PairwiseAdd(a, b) => {
            let (t, u, j) = (out.shape()[0], out.shape()[1], out.shape()[2]);
            if let Some(da) = accumulate(nodes, grads, *a) {
                for ti in 0..t {
                    for ui in 0..u {
                        let base = (ti * u + ui) * j;
                        for k in 0..j {
                            da[ti * j + k] += g[base + k];
                        }
                    }
                }
            }
            if let Some(db) = accumulate(nodes, grads, *b) {
                for ti in 0..t {
                    for ui in 0..u {
                        let base = (ti * u + ui) * j;
                        for k in 0..j {
                            db[ui * j + k] += g[base + k];
                        }
                    }
                }
            }
        }
        Op::Custom { x, grad } => {
            if let Some(dx) = accumulate(nodes, grads, *x) {
                dx.iter_mut()
                    .zip(grad.data())
                    .for_each(|(d, v)| *d += g[0] * v);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted log-sum-exp of a slice; `-inf` when every entry is `-inf`.
pub(crate) fn lse_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-sum-exp of two values.
pub(crate) fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let br = &b.data()[p * n..(p + 1) * n];
                for (r, x) in row.iter_mut().zip(br) {
                    *r += aip * x;
                }
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        ))
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.tape.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let broadcastable = b.rank() <= a.rank() && a.shape()[a.rank() - b.rank()..] == *b.shape();
        if !broadcastable {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} onto {:?}",
                b.shape(),
                a.shape()
            )));
        }
        let bl = b.len();
        let bd = b.data();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let y = bd[i % bl];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        Ok(self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::Elementwise(kind, self.id, other.id),
            &[self.id, other.id],
        ))
    }

    /// `self + other`, with `other` broadcast along leading axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x * s).collect();
        self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::Scale(self.id, s),
            &[self.id],
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|x| x + s).collect();
        self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::Shift(self.id),
            &[self.id],
        )
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        let a = self.value();
        let data = a
            .data()
            .iter()
            .map(|&x| match kind {
                Activation::Sigmoid => sigmoid(x),
                Activation::Tanh => x.tanh(),
                Activation::Relu => x.max(0.0),
                Activation::Swish => x * sigmoid(x),
            })
            .collect();
        self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::Act(kind, self.id),
            &[self.id],
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.activation(Activation::Tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.activation(Activation::Relu)
    }

    pub fn swish(self) -> Var<'t> {
        self.activation(Activation::Swish)
    }

    /// Reduces `axis` with a max-shifted log-sum-exp.
    pub fn log_sum_exp(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::dim(format!(
                "log_sum_exp axis {axis} on shape {:?}",
                a.shape()
            )));
        }
        let outer: usize = a.shape()[..axis].iter().product();
        let n = a.shape()[axis];
        let inner: usize = a.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = a.data()[(o * n + j) * inner + i];
                }
                data.push(lse_slice(&buf));
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        Ok(self.tape.push(
            Tensor { shape, data },
            Op::LogSumExp {
                x: self.id,
                outer,
                n,
                inner,
            },
            &[self.id],
        ))
    }

    /// Softmax over the last axis. `-inf` entries get zero weight.
    pub fn softmax(self) -> Var<'t> {
        let a = self.value();
        let w = *a.shape().last().unwrap_or(&1);
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks(w) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|x| (x - m).exp()));
            let s: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|x| *x /= s);
        }
        self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::Softmax(self.id),
            &[self.id],
        )
    }

    pub fn log_softmax(self) -> Var<'t> {
        let a = self.value();
        let w = *a.shape().last().unwrap_or(&1);
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks(w) {
            let l = lse_slice(row);
            data.extend(row.iter().map(|x| x - l));
        }
        self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::LogSoftmax(self.id),
            &[self.id],
        )
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        if gain.value().shape() != [d] || bias.value().shape() != [d] {
            return Err(Error::dim(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            )));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let rows = x.len() / d.max(1);
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                data.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: x.shape().to_vec(),
                data,
            },
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            &[self.id, gain.id, bias.id],
        ))
    }

    /// Per-channel 1-D convolution of a `T×d` sequence with a `k×d` kernel.
    pub fn depthwise_conv1d(self, kernel: Var<'t>, padding: ConvPadding) -> Result<Var<'t>> {
        let (x, kv) = (self.value(), kernel.value());
        if x.rank() != 2 || kv.rank() != 2 || kv.shape()[1] != x.shape()[1] || kv.shape()[0] == 0
        {
            return Err(Error::dim(format!(
                "depthwise_conv1d: input {:?}, kernel {:?}",
                x.shape(),
                kv.shape()
            )));
        }
        let (t_len, d, k) = (x.shape()[0], x.shape()[1], kv.shape()[0]);
        let left = match padding {
            ConvPadding::Causal => k - 1,
            ConvPadding::Same => {
                if k % 2 == 0 {
                    return Err(Error::Contract(format!(
                        "same padding needs an odd kernel, got {k}"
                    )));
                }
                (k - 1) / 2
            }
        };
        let mut data = vec![0.0; t_len * d];
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize + j as isize - left as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let s = src as usize;
                for c in 0..d {
                    data[t * d + c] += kv.data()[j * d + c] * x.data()[s * d + c];
                }
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![t_len, d],
                data,
            },
            Op::DepthwiseConv {
                x: self.id,
                kernel: kernel.id,
                left,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() == 0 || start + len > a.shape()[0] {
            return Err(Error::dim(format!(
                "slice_rows {start}..{} of {:?}",
                start + len,
                a.shape()
            )));
        }
        let w = a.row_len();
        let mut shape = a.shape().to_vec();
        shape[0] = len;
        let data = a.data()[start * w..(start + len) * w].to_vec();
        Ok(self.tape.push(
            Tensor { shape, data },
            Op::SliceRows { x: self.id, start },
            &[self.id],
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 || start + len > a.shape()[1] {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                a.shape()
            )));
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * cols + start..r * cols + start + len]);
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![rows, len],
                data,
            },
            Op::SliceCols { x: self.id, start },
            &[self.id],
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rank() != 2 {
            return Err(Error::dim(format!("transpose of {:?}", a.shape())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.tape.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(self.id),
            &[self.id],
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = (*self.value()).clone().reshaped(shape.to_vec())?;
        Ok(self.tape.push(a, Op::Reshape(self.id), &[self.id]))
    }

    /// Reverses the order along axis 0.
    pub fn reverse_rows(self) -> Var<'t> {
        let a = self.value();
        let w = a.row_len();
        let mut data = Vec::with_capacity(a.len());
        for r in (0..a.rows()).rev() {
            data.extend_from_slice(&a.data()[r * w..(r + 1) * w]);
        }
        self.tape.push(
            Tensor {
                shape: a.shape().to_vec(),
                data,
            },
            Op::ReverseRows(self.id),
            &[self.id],
        )
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }
}
