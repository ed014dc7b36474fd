use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Additive mask value standing in for −∞. Masked logits are excluded before
/// exponentiation and their probabilities are written as literal zeros.
pub const MASKED: f64 = -1e30;

/// Whether an additive mask entry marks a masked position.
pub fn is_masked(entry: f64) -> bool {
    entry <= MASKED
}

fn validate_mask_entry(entry: f64) -> Result<bool> {
    if entry == 0.0 {
        Ok(false)
    } else if is_masked(entry) {
        Ok(true)
    } else {
        Err(Error::InvalidMask(entry))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    DivCol(usize, usize),
    DivScalar(usize, usize),
    Affine(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    /// Input and per-element live flags (broadcast over rows when one row long).
    MaskedSoftmax(usize),
    CrossEntropy { logits: usize, probs: Vec<f64>, target: usize },
    LayerNorm { input: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    L2NormalizeRows { input: usize, norms: Vec<f64> },
    Gelu(usize),
    Relu(usize),
    Abs(usize),
    Exp(usize),
    Ln(usize),
    XLogX(usize),
    Sum(usize),
    SumCols(usize),
    SumRows(usize),
    MaxCols { input: usize, argmax: Vec<usize> },
    SliceCols { input: usize, start: usize },
    SliceRows { input: usize, start: usize },
    SelectRows { input: usize, index: Arc<Vec<usize>> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    StraightThrough(usize),
    MulConst(usize, Arc<Tensor>),
    AddConst(usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of operation records in creation (topological) order.
///
/// Values are immutable once recorded. `backward` walks the tape in reverse exactly once;
/// a second call fails until [`Graph::reset_backward`] is invoked.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    backpropagated: Cell<bool>,
    surrogate: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a recorded tensor.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of every leaf that required one.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id.get(&var.id)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.by_id.remove(&var.id)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            backpropagated: Cell::new(false),
            surrogate: false,
        }
    }

    /// Graph whose straight-through nodes forward their soft input instead of the hard
    /// value. Gradients are unchanged; only forward values differ. Used by the
    /// finite-difference checker, which can only see the soft path.
    pub fn surrogate() -> Self {
        Self {
            surrogate: true,
            ..Self::new()
        }
    }

    pub fn is_surrogate(&self) -> bool {
        self.surrogate
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn reset_backward(&self) {
        self.backpropagated.set(false);
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.backpropagated.get() {
            return Err(Error::AlreadyBackpropagated);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        self.backpropagated.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.by_id
                    .insert(id, Tensor::new(node.value.shape(), g).expect("grad shape"));
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
        }
        Ok(out)
    }
}

/// Accumulator for the gradient slot of an input, or `None` if it needs no gradient.
fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    let val = |i: usize| nodes[i].value.clone();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &i in [a, b].iter() {
                if let Some(s) = slot(nodes, grads, *i) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), b) in s.iter_mut().zip(g).zip(bv.data()) {
                    *s += g * b;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((s, g), a) in s.iter_mut().zip(g).zip(av.data()) {
                    *s += g * a;
                }
            }
        }
        Op::AddRow(a, r) => {
            let n = node.value.cols();
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *r) {
                for row in g.chunks(n) {
                    s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::MulRow(a, r) => {
            let n = node.value.cols();
            let (av, rv) = (val(*a), val(*r));
            if let Some(s) = slot(nodes, grads, *a) {
                for (srow, grow) in s.chunks_mut(n).zip(g.chunks(n)) {
                    for ((s, g), r) in srow.iter_mut().zip(grow).zip(rv.data()) {
                        *s += g * r;
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *r) {
                for (grow, arow) in g.chunks(n).zip(av.data().chunks(n)) {
                    for ((s, g), a) in s.iter_mut().zip(grow).zip(arow) {
                        *s += g * a;
                    }
                }
            }
        }
        Op::MulCol(a, c) => {
            let n = node.value.cols();
            let (av, cv) = (val(*a), val(*c));
            if let Some(s) = slot(nodes, grads, *a) {
                for ((srow, grow), c) in s.chunks_mut(n).zip(g.chunks(n)).zip(cv.data()) {
                    srow.iter_mut().zip(grow).for_each(|(s, g)| *s += g * c);
                }
            }
            if let Some(s) = slot(nodes, grads, *c) {
                for ((s, grow), arow) in s.iter_mut().zip(g.chunks(n)).zip(av.data().chunks(n)) {
                    *s += grow.iter().zip(arow).map(|(g, a)| g * a).sum::<f64>();
                }
            }
        }
        Op::DivCol(a, c) => {
            let n = node.value.cols();
            let cv = val(*c);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((srow, grow), c) in s.chunks_mut(n).zip(g.chunks(n)).zip(cv.data()) {
                    srow.iter_mut().zip(grow).for_each(|(s, g)| *s += g / c);
                }
            }
            if let Some(s) = slot(nodes, grads, *c) {
                // d(a/c)/dc = -y/c
                for ((s, grow), (yrow, c)) in s
                    .iter_mut()
                    .zip(g.chunks(n))
                    .zip(y.chunks(n).zip(cv.data()))
                {
                    *s -= grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / c;
                }
            }
        }
        Op::DivScalar(a, sc) => {
            let c = val(*sc).item();
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g / c);
            }
            if let Some(s) = slot(nodes, grads, *sc) {
                s[0] -= g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / c;
            }
        }
        Op::Affine(a, mul) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += mul * g);
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            // dA = G·Bᵀ, dB = Aᵀ·G
            if let Some(s) = slot(nodes, grads, *a) {
                gemm(m, n, k, g, false, bv.data(), true, s, true);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                gemm(k, m, n, av.data(), true, g, false, s, true);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (node.value.rows(), node.value.cols());
            if let Some(s) = slot(nodes, grads, *a) {
                // y is [m,n] = aᵀ, so a is [n,m]
                for i in 0..m {
                    for j in 0..n {
                        s[j * m + i] += g[i * n + j];
                    }
                }
            }
        }
        Op::MaskedSoftmax(a) => {
            let n = node.value.cols();
            if let Some(s) = slot(nodes, grads, *a) {
                for ((srow, grow), yrow) in s.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                        // masked and dead entries have y == 0 exactly
                        if *y != 0.0 {
                            *s += y * (g - dot);
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            target,
        } => {
            if let Some(s) = slot(nodes, grads, *logits) {
                for (j, (s, p)) in s.iter_mut().zip(probs).enumerate() {
                    let t = if j == *target { 1.0 } else { 0.0 };
                    *s += g[0] * (p - t);
                }
            }
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = node.value.cols();
            let gv = val(*gamma);
            if let Some(s) = slot(nodes, grads, *input) {
                for (r, (srow, grow)) in s.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let xrow = &xhat[r * n..(r + 1) * n];
                    let mut sum_gx = 0.0;
                    let mut sum_gx_x = 0.0;
                    for j in 0..n {
                        let gx = grow[j] * gv.data()[j];
                        sum_gx += gx;
                        sum_gx_x += gx * xrow[j];
                    }
                    let inv_n = 1.0 / n as f64;
                    for j in 0..n {
                        let gx = grow[j] * gv.data()[j];
                        srow[j] += rstd[r] * (gx - inv_n * sum_gx - xrow[j] * inv_n * sum_gx_x);
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *gamma) {
                for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        s[j] += grow[j] * xrow[j];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *beta) {
                for grow in g.chunks(n) {
                    s.iter_mut().zip(grow).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::L2NormalizeRows { input, norms } => {
            let n = node.value.cols();
            if let Some(s) = slot(nodes, grads, *input) {
                for (r, (srow, grow)) in s.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                    let yrow = &y[r * n..(r + 1) * n];
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        srow[j] += (grow[j] - yrow[j] * dot) / norms[r];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(av.data()) {
                    *s += g * gelu_grad(*x);
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(av.data()) {
                    if *x > 0.0 {
                        *s += g;
                    }
                }
            }
        }
        Op::Abs(a) => {
            let av = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(av.data()) {
                    if *x > 0.0 {
                        *s += g;
                    } else if *x < 0.0 {
                        *s -= g;
                    }
                }
            }
        }
        Op::Exp(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * y;
                }
            }
        }
        Op::Ln(a) => {
            let av = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(av.data()) {
                    *s += g / x;
                }
            }
        }
        Op::XLogX(a) => {
            let av = val(*a);
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(av.data()) {
                    *s += g * (x.max(f64::MIN_POSITIVE).ln() + 1.0);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::SumCols(a) => {
            let n = val(*a).cols();
            if let Some(s) = slot(nodes, grads, *a) {
                for (srow, g) in s.chunks_mut(n).zip(g) {
                    srow.iter_mut().for_each(|s| *s += g);
                }
            }
        }
        Op::SumRows(a) => {
            let n = val(*a).cols();
            if let Some(s) = slot(nodes, grads, *a) {
                for srow in s.chunks_mut(n) {
                    srow.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::MaxCols { input, argmax } => {
            let n = val(*input).cols();
            if let Some(s) = slot(nodes, grads, *input) {
                for (r, (&j, g)) in argmax.iter().zip(g).enumerate() {
                    s[r * n + j] += g;
                }
            }
        }
        Op::SliceCols { input, start } => {
            let n_in = val(*input).cols();
            let n = node.value.cols();
            if let Some(s) = slot(nodes, grads, *input) {
                for (srow, grow) in s.chunks_mut(n_in).zip(g.chunks(n)) {
                    srow[*start..start + n]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::SliceRows { input, start } => {
            let n = node.value.cols();
            if let Some(s) = slot(nodes, grads, *input) {
                s[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(s, g)| *s += g);
            }
        }
        Op::SelectRows { input, index } => {
            let n = node.value.cols();
            if let Some(s) = slot(nodes, grads, *input) {
                for (&src, grow) in index.iter().zip(g.chunks(n)) {
                    s[src * n..(src + 1) * n]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let n = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(s) = slot(nodes, grads, p) {
                    for (srow, grow) in s.chunks_mut(w).zip(g.chunks(n)) {
                        srow.iter_mut()
                            .zip(&grow[offset..offset + w])
                            .for_each(|(s, g)| *s += g);
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(s) = slot(nodes, grads, p) {
                    s.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(s, g)| *s += g);
                }
                offset += len;
            }
        }
        Op::Reshape(a) | Op::StraightThrough(a) | Op::AddConst(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), c) in s.iter_mut().zip(g).zip(c.data()) {
                    *s += g * c;
                }
            }
        }
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

/// Row-wise softmax over live entries. Dead rows (no live entry) become all-zero.
pub(crate) fn masked_softmax_rows(x: &[f64], live: impl Fn(usize, usize) -> bool, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (orow, xrow)) in out.chunks_mut(n).zip(x.chunks(n)).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xrow.iter().enumerate() {
            if live(r, j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (j, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
            if live(r, j) {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        orow.iter_mut().for_each(|o| *o /= sum);
    }
    out
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    /// Copy of the value with no gradient path.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant((*self.value()).clone())
    }

    fn zip_same(&self, other: Var<'g>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(a.shape(), data)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let v = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// `[m,n] + [n]`, broadcasting the row over every row.
    pub fn add_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        let (a, r) = (self.value(), row.value());
        let n = a.cols();
        if r.len() != n {
            return Err(shape_err("add_row", &a, &r));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(r.data()).for_each(|(x, b)| *x += b);
        }
        let v = Tensor::new(a.shape(), data)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// `[m,n] ⊙ [n]`, broadcasting the row.
    pub fn mul_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        let (a, r) = (self.value(), row.value());
        let n = a.cols();
        if r.len() != n {
            return Err(shape_err("mul_row", &a, &r));
        }
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(r.data()).for_each(|(x, b)| *x *= b);
        }
        let v = Tensor::new(a.shape(), data)?;
        Ok(self.binary(row, v, Op::MulRow(self.id, row.id)))
    }

    /// Scales row `i` of `[m,n]` by `col[i]`.
    pub fn mul_col(&self, col: Var<'g>) -> Result<Var<'g>> {
        let (a, c) = (self.value(), col.value());
        let n = a.cols();
        if c.len() != a.rows() {
            return Err(shape_err("mul_col", &a, &c));
        }
        let mut data = a.data().to_vec();
        for (chunk, s) in data.chunks_mut(n).zip(c.data()) {
            chunk.iter_mut().for_each(|x| *x *= s);
        }
        let v = Tensor::new(a.shape(), data)?;
        Ok(self.binary(col, v, Op::MulCol(self.id, col.id)))
    }

    /// Divides row `i` of `[m,n]` by `col[i]`.
    pub fn div_col(&self, col: Var<'g>) -> Result<Var<'g>> {
        let (a, c) = (self.value(), col.value());
        let n = a.cols();
        if c.len() != a.rows() {
            return Err(shape_err("div_col", &a, &c));
        }
        let mut data = a.data().to_vec();
        for (chunk, s) in data.chunks_mut(n).zip(c.data()) {
            chunk.iter_mut().for_each(|x| *x /= s);
        }
        let v = Tensor::new(a.shape(), data)?;
        Ok(self.binary(col, v, Op::DivCol(self.id, col.id)))
    }

    /// Division by a single-element tensor.
    pub fn div_scalar(&self, s: Var<'g>) -> Result<Var<'g>> {
        let (a, sv) = (self.value(), s.value());
        if sv.len() != 1 {
            return Err(shape_err("div_scalar", &a, &sv));
        }
        let d = sv.item();
        let v = a.map(|x| x / d);
        Ok(self.binary(s, v, Op::DivScalar(self.id, s.id)))
    }

    /// `mul·x + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Var<'g> {
        let v = self.value().map(|x| mul * x + add);
        self.unary(v, Op::Affine(self.id, mul))
    }

    pub fn scale(&self, mul: f64) -> Var<'g> {
        self.affine(mul, 0.0)
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
            return Err(shape_err("matmul", &a, &b));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let v = Tensor::new(&[m, n], out)?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Result<Var<'g>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: a.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(self.unary(a.transpose(), Op::Transpose(self.id)))
    }

    /// Softmax along the last axis after adding an additive `{0, MASKED}` mask. Masked
    /// positions come out as exactly zero; rows with no live entry are all-zero.
    ///
    /// `mask` has the same shape as `self`, or is a single row broadcast to every row.
    pub fn masked_softmax(&self, mask: &Tensor) -> Result<Var<'g>> {
        let x = self.value();
        let n = x.cols();
        let broadcast = mask.len() == n && mask.rows() == 1;
        if !(mask.shape() == x.shape() || broadcast && (mask.ndim() <= 1 || x.ndim() > 1)) {
            return Err(shape_err("masked_softmax", &x, mask));
        }
        let mut live = Vec::with_capacity(mask.len());
        for &e in mask.data() {
            live.push(!validate_mask_entry(e)?);
        }
        let out = if broadcast {
            masked_softmax_rows(x.data(), |_, j| live[j], n)
        } else {
            masked_softmax_rows(x.data(), |r, j| live[r * n + j], n)
        };
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.unary(v, Op::MaskedSoftmax(self.id)))
    }

    /// Softmax along the last axis with boolean liveness instead of an additive mask.
    pub fn softmax_live(&self, live: &[bool]) -> Result<Var<'g>> {
        let x = self.value();
        if live.len() != x.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_live",
                lhs: x.shape().to_vec(),
                rhs: vec![live.len()],
            });
        }
        let n = x.cols();
        let out = masked_softmax_rows(x.data(), |r, j| live[r * n + j], n);
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.unary(v, Op::MaskedSoftmax(self.id)))
    }

    pub fn softmax(&self) -> Var<'g> {
        let x = self.value();
        let n = x.cols();
        let out = masked_softmax_rows(x.data(), |_, _| true, n);
        let v = Tensor::new(x.shape(), out).expect("same shape");
        self.unary(v, Op::MaskedSoftmax(self.id))
    }

    /// Negative log-likelihood of `target` under softmax of a logit vector.
    pub fn cross_entropy(&self, target: usize) -> Result<Var<'g>> {
        let x = self.value();
        if x.rows() != 1 || target >= x.cols() {
            return Err(Error::arg(format!(
                "cross_entropy expects one logit row and target < {}, got {:?} / {target}",
                x.cols(),
                x.shape()
            )));
        }
        let probs = masked_softmax_rows(x.data(), |_, _| true, x.cols());
        let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x.data()[target];
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                probs,
                target,
            },
        ))
    }

    /// Row-wise layer normalization with affine parameters of length `cols`.
    pub fn layer_norm(&self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
        let n = x.cols();
        if gv.len() != n || bv.len() != n {
            return Err(shape_err("layer_norm", &x, &gv));
        }
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(x.rows());
        let mut out = vec![0.0; x.len()];
        for (r, xrow) in x.data().chunks(n).enumerate() {
            let mean = xrow.iter().sum::<f64>() / n as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (xrow[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.graph.push(
            v,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Divides each row by its Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'g>> {
        let x = self.value();
        let n = x.cols();
        let mut norms = Vec::with_capacity(x.rows());
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm("l2_normalize_rows"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.unary(
            v,
            Op::L2NormalizeRows {
                input: self.id,
                norms,
            },
        ))
    }

    pub fn gelu(&self) -> Var<'g> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn relu(&self) -> Var<'g> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn abs(&self) -> Var<'g> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn exp(&self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'g> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Ln(self.id))
    }

    /// `x·ln x` with the continuous extension `0` at `x = 0`.
    pub fn xlogx(&self) -> Var<'g> {
        let v = self
            .value()
            .map(|x| if x <= 0.0 { 0.0 } else { x * x.ln() });
        self.unary(v, Op::XLogX(self.id))
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self).expect("same shape")
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the last axis: `[m,n] → [m]`.
    pub fn sum_cols(&self) -> Var<'g> {
        let x = self.value();
        let n = x.cols();
        let data: Vec<f64> = x.data().chunks(n).map(|r| r.iter().sum()).collect();
        self.unary(Tensor::vector(data), Op::SumCols(self.id))
    }

    /// Sum over rows: `[m,n] → [n]`.
    pub fn sum_rows(&self) -> Var<'g> {
        let x = self.value();
        let n = x.cols();
        let mut data = vec![0.0; n];
        for row in x.data().chunks(n) {
            data.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        self.unary(Tensor::vector(data), Op::SumRows(self.id))
    }

    /// Max over the last axis (`[m,n] → [m]`); ties resolve to the lowest column.
    pub fn max_cols(&self) -> Var<'g> {
        let x = self.value();
        let n = x.cols();
        let mut argmax = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.rows());
        for row in x.data().chunks(n) {
            let (j, m) = argmax_first(row);
            argmax.push(j);
            data.push(m);
        }
        self.unary(
            Tensor::vector(data),
            Op::MaxCols {
                input: self.id,
                argmax,
            },
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let n = x.cols();
        if start + len > n {
            return Err(Error::arg(format!("slice_cols {start}+{len} > {n}")));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for row in x.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let v = Tensor::new(&[x.rows(), len], data)?;
        Ok(self.unary(v, Op::SliceCols { input: self.id, start }))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let n = x.cols();
        if start + len > x.rows() {
            return Err(Error::arg(format!("slice_rows {start}+{len} > {}", x.rows())));
        }
        let v = Tensor::new(&[len, n], x.data()[start * n..(start + len) * n].to_vec())?;
        Ok(self.unary(v, Op::SliceRows { input: self.id, start }))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&self, index: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let n = x.cols();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= x.rows() {
                return Err(Error::arg(format!("row {i} out of range {}", x.rows())));
            }
            data.extend_from_slice(x.row(i));
        }
        let v = Tensor::new(&[index.len(), n], data)?;
        Ok(self.unary(
            v,
            Op::SelectRows {
                input: self.id,
                index: Arc::new(index.to_vec()),
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let v = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape() != c.shape() {
            return Err(shape_err("mul_const", &x, c));
        }
        let data = x.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::new(x.shape(), data)?;
        Ok(self.unary(v, Op::MulConst(self.id, Arc::new(c.clone()))))
    }

    /// Elementwise sum with a constant tensor of the same shape.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'g>> {
        let x = self.value();
        if x.shape() != c.shape() {
            return Err(shape_err("add_const", &x, c));
        }
        let data = x.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let v = Tensor::new(x.shape(), data)?;
        Ok(self.unary(v, Op::AddConst(self.id)))
    }

    /// Straight-through estimator: the forward value is `hard`, the backward pass routes the
    /// incoming gradient to `self` unchanged, as if the output were `self`.
    ///
    /// In a surrogate graph the forward value is `self` instead.
    pub fn straight_through(&self, hard: &Tensor) -> Result<Var<'g>> {
        let soft = self.value();
        if soft.shape() != hard.shape() {
            return Err(shape_err("straight_through", &soft, hard));
        }
        let v = if self.graph.surrogate {
            (*soft).clone()
        } else {
            hard.clone()
        };
        Ok(self.unary(v, Op::StraightThrough(self.id)))
    }
}

/// Concatenates along the last axis; all inputs share the row count.
pub fn concat_cols<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
    let graph = first.graph;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let m = vals[0].rows();
    let total: usize = vals.iter().map(|v| v.cols()).sum();
    for v in &vals {
        if v.rows() != m {
            return Err(shape_err("concat_cols", &vals[0], v));
        }
    }
    let mut data = Vec::with_capacity(m * total);
    for r in 0..m {
        for v in &vals {
            data.extend_from_slice(v.row(r));
        }
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(graph.push(Tensor::new(&[m, total], data)?, Op::ConcatCols(ids), rg))
}

/// Stacks row blocks; all inputs share the column count.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
    let graph = first.graph;
    let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let n = vals[0].cols();
    let mut rows = 0;
    let mut data = Vec::new();
    for v in &vals {
        if v.cols() != n {
            return Err(shape_err("concat_rows", &vals[0], v));
        }
        rows += v.rows();
        data.extend_from_slice(v.data());
    }
    let rg = parts.iter().any(|p| p.requires_grad());
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(graph.push(Tensor::new(&[rows, n], data)?, Op::ConcatRows(ids), rg))
}

/// Index and value of the first maximum.
pub fn argmax_first(row: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}
