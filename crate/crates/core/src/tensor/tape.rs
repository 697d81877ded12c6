//! The gradient tape: an append-only list of operation nodes in topological
//! order (inputs always precede their consumers). `backward` walks the list
//! in reverse, accumulating vector-Jacobian products into each node's grad
//! buffer.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

pub(crate) struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

pub(crate) struct Node {
    op: Op,
    value: Rc<Vec<f64>>,
    shape: Vec<usize>,
    grad: Vec<f64>, // allocated lazily; empty means all-zero
}

/// Recorded operations. Fields are node ids of the inputs plus whatever
/// constants the backward rule needs; input values are read back from the
/// referenced nodes.
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// k * x + c, elementwise with scalar constants
    Affine(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    /// axis-0 block slice: input id, start row, block length (elements per row)
    SliceRows(usize, usize, usize),
    /// 2-D column slice: input id, start col, input cols
    SliceCols(usize, usize, usize),
    /// axis-0 concatenation; (id, elements) per input
    ConcatRows(Vec<(usize, usize)>),
    /// 2-D column concatenation; (id, cols) per input
    ConcatCols(Vec<(usize, usize)>),
    /// axis-0 block gather (scatter-add on backward)
    GatherRows(usize, Rc<Vec<usize>>),
    /// out[i] = x[i, idx[i]]
    Pick(usize, Rc<Vec<usize>>),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    SoftmaxLastDim(usize),
    LogSoftmaxLastDim(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    /// x + b with b broadcast over leading dims
    AddBias(usize, usize),
    LogAddExp(usize, usize),
    Sum(usize),
    Mean(usize),
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                spent: Cell::new(false),
            }),
        }
    }

    pub(crate) fn same_tape(a: &Tape, b: &Tape) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a tensor as a leaf of this tape and returns a handle whose
    /// `grad()` reads back the accumulated gradient. Watching a tensor that
    /// already lives on this tape returns it unchanged.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        if let Some(node) = t.node() {
            assert!(
                Tape::same_tape(&node.tape, self),
                "tensor already recorded on a different tape"
            );
            return t.clone();
        }
        let id = self.push(Op::Leaf, Rc::new(t.data().to_vec()), t.shape().to_vec());
        t.detach().with_node(NodeRef {
            tape: self.clone(),
            id,
        })
    }

    pub(crate) fn push(&self, op: Op, value: Rc<Vec<f64>>, shape: Vec<usize>) -> usize {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            shape,
            grad: Vec::new(),
        });
        nodes.len() - 1
    }

    /// Node id for `t` on this tape, enlisting untaped tensors as constant
    /// leaves so every recorded input is addressable during backward.
    pub(crate) fn enlist(&self, t: &Tensor) -> Result<usize> {
        match t.node() {
            Some(node) => {
                if !Tape::same_tape(&node.tape, self) {
                    return Err(Error::Tape("operation mixes two tapes".into()));
                }
                Ok(node.id)
            }
            None => Ok(self.push(
                Op::Leaf,
                Rc::new(t.data().to_vec()),
                t.shape().to_vec(),
            )),
        }
    }

    pub(crate) fn grad_of(&self, id: usize, numel: usize) -> Vec<f64> {
        let nodes = self.inner.nodes.borrow();
        let g = &nodes[id].grad;
        if g.is_empty() {
            vec![0.0; numel]
        } else {
            g.clone()
        }
    }

    /// Runs reverse accumulation from `root`, which must be a scalar on this
    /// tape. A tape supports exactly one backward pass.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        let root_node = root
            .node()
            .ok_or_else(|| Error::Tape("backward on untaped tensor".into()))?;
        if !Tape::same_tape(&root_node.tape, self) {
            return Err(Error::Tape("root recorded on a different tape".into()));
        }
        if !root.is_scalar() {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        if self.inner.spent.get() {
            return Err(Error::Tape(
                "tape already consumed by a previous backward call".into(),
            ));
        }
        self.inner.spent.set(true);

        let mut nodes = self.inner.nodes.borrow_mut();
        ensure_grad(&mut nodes[root_node.id]);
        nodes[root_node.id].grad[0] = 1.0;

        for i in (0..nodes.len()).rev() {
            let (parents, node_slice) = nodes.split_at_mut(i);
            let node = &mut node_slice[0];
            if node.grad.is_empty() {
                continue; // did not influence the root
            }
            step(node, parents);
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn ensure_grad(node: &mut Node) {
    if node.grad.is_empty() {
        node.grad = vec![0.0; node.value.len()];
    }
}

fn grad_mut(parents: &mut [Node], id: usize) -> &mut [f64] {
    ensure_grad(&mut parents[id]);
    &mut parents[id].grad
}

fn value(parents: &[Node], id: usize) -> Rc<Vec<f64>> {
    parents[id].value.clone()
}

fn shape(parents: &[Node], id: usize) -> Vec<usize> {
    parents[id].shape.clone()
}

/// Propagates `node`'s output gradient to its parents.
fn step(node: &mut Node, parents: &mut [Node]) {
    let g = &node.grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (dst, &gv) in grad_mut(parents, *a).iter_mut().zip(g) {
                *dst += gv;
            }
            for (dst, &gv) in grad_mut(parents, *b).iter_mut().zip(g) {
                *dst += gv;
            }
        }
        Op::Sub(a, b) => {
            for (dst, &gv) in grad_mut(parents, *a).iter_mut().zip(g) {
                *dst += gv;
            }
            for (dst, &gv) in grad_mut(parents, *b).iter_mut().zip(g) {
                *dst -= gv;
            }
        }
        Op::Mul(a, b) => {
            let va = value(parents, *a);
            let vb = value(parents, *b);
            for ((dst, &gv), &bv) in grad_mut(parents, *a).iter_mut().zip(g).zip(vb.iter()) {
                *dst += gv * bv;
            }
            for ((dst, &gv), &av) in grad_mut(parents, *b).iter_mut().zip(g).zip(va.iter()) {
                *dst += gv * av;
            }
        }
        Op::Affine(a, k) => {
            let k = *k;
            for (dst, &gv) in grad_mut(parents, *a).iter_mut().zip(g) {
                *dst += k * gv;
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = {
                let s = shape(parents, *a);
                (s[0], s[1])
            };
            let n = shape(parents, *b)[1];
            let va = value(parents, *a);
            let vb = value(parents, *b);
            kernels::mm_nt(g, &vb, m, n, k, grad_mut(parents, *a));
            kernels::mm_tn(&va, g, k, m, n, grad_mut(parents, *b));
        }
        Op::Transpose(a) => {
            let s = shape(parents, *a);
            let (m, n) = (s[0], s[1]);
            let dst = grad_mut(parents, *a);
            for i in 0..m {
                for j in 0..n {
                    dst[i * n + j] += g[j * m + i];
                }
            }
        }
        Op::Reshape(a) => {
            for (dst, &gv) in grad_mut(parents, *a).iter_mut().zip(g) {
                *dst += gv;
            }
        }
        Op::SliceRows(a, start, block) => {
            let dst = grad_mut(parents, *a);
            let off = start * block;
            for (i, &gv) in g.iter().enumerate() {
                dst[off + i] += gv;
            }
        }
        Op::SliceCols(a, start, in_cols) => {
            let out_cols = node.shape[1];
            let dst = grad_mut(parents, *a);
            for i in 0..node.shape[0] {
                for j in 0..out_cols {
                    dst[i * in_cols + start + j] += g[i * out_cols + j];
                }
            }
        }
        Op::ConcatRows(items) => {
            let mut off = 0;
            for (id, len) in items.clone() {
                for (dst, &gv) in grad_mut(parents, id).iter_mut().zip(&g[off..off + len]) {
                    *dst += gv;
                }
                off += len;
            }
        }
        Op::ConcatCols(items) => {
            let rows = node.shape[0];
            let total_cols = node.shape[1];
            let mut col_off = 0;
            for (id, cols) in items.clone() {
                let dst = grad_mut(parents, id);
                for i in 0..rows {
                    for j in 0..cols {
                        dst[i * cols + j] += g[i * total_cols + col_off + j];
                    }
                }
                col_off += cols;
            }
        }
        Op::GatherRows(a, idx) => {
            let idx = idx.clone();
            let block = if node.shape.is_empty() {
                1
            } else {
                node.value.len() / node.shape[0].max(1)
            };
            let dst = grad_mut(parents, *a);
            for (j, &src_row) in idx.iter().enumerate() {
                for t in 0..block {
                    dst[src_row * block + t] += g[j * block + t];
                }
            }
        }
        Op::Pick(a, idx) => {
            let idx = idx.clone();
            let cols = shape(parents, *a)[1];
            let dst = grad_mut(parents, *a);
            for (i, &c) in idx.iter().enumerate() {
                dst[i * cols + c] += g[i];
            }
        }
        Op::Sigmoid(a) => {
            for ((dst, &gv), &yv) in grad_mut(parents, *a).iter_mut().zip(g).zip(y.iter()) {
                *dst += gv * yv * (1.0 - yv);
            }
        }
        Op::Relu(a) => {
            let vx = value(parents, *a);
            for ((dst, &gv), &xv) in grad_mut(parents, *a).iter_mut().zip(g).zip(vx.iter()) {
                if xv > 0.0 {
                    *dst += gv;
                }
            }
        }
        Op::Exp(a) => {
            for ((dst, &gv), &yv) in grad_mut(parents, *a).iter_mut().zip(g).zip(y.iter()) {
                *dst += gv * yv;
            }
        }
        Op::Ln(a) => {
            let vx = value(parents, *a);
            for ((dst, &gv), &xv) in grad_mut(parents, *a).iter_mut().zip(g).zip(vx.iter()) {
                *dst += gv / xv;
            }
        }
        Op::Abs(a) => {
            let vx = value(parents, *a);
            for ((dst, &gv), &xv) in grad_mut(parents, *a).iter_mut().zip(g).zip(vx.iter()) {
                // subgradient 0 at the kink
                *dst += gv * if xv > 0.0 {
                    1.0
                } else if xv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
        }
        Op::SoftmaxLastDim(a) => {
            let n = *node.shape.last().unwrap();
            let dst = grad_mut(parents, *a);
            for s in 0..y.len() / n {
                let ys = &y[s * n..(s + 1) * n];
                let gs = &g[s * n..(s + 1) * n];
                let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                for ((dst, &yv), &gv) in dst[s * n..(s + 1) * n].iter_mut().zip(ys).zip(gs) {
                    *dst += yv * (gv - dot);
                }
            }
        }
        Op::LogSoftmaxLastDim(a) => {
            let n = *node.shape.last().unwrap();
            let dst = grad_mut(parents, *a);
            for s in 0..y.len() / n {
                let ys = &y[s * n..(s + 1) * n];
                let gs = &g[s * n..(s + 1) * n];
                let gsum: f64 = gs.iter().sum();
                for ((dst, &yv), &gv) in dst[s * n..(s + 1) * n].iter_mut().zip(ys).zip(gs) {
                    *dst += gv - yv.exp() * gsum;
                }
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let n = *node.shape.last().unwrap();
            let vx = value(parents, *x);
            let vgain = value(parents, *gain);
            let eps = *eps;
            let slices = vx.len() / n;
            // recompute per-slice normalization
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            {
                let dst = grad_mut(parents, *x);
                for s in 0..slices {
                    let xs = &vx[s * n..(s + 1) * n];
                    let gs = &g[s * n..(s + 1) * n];
                    let mean = xs.iter().sum::<f64>() / n as f64;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        gs.iter().zip(vgain.iter()).map(|(&gv, &gn)| gv * gn).collect();
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dst[s * n + j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                        dgain[j] += gs[j] * xhat[j];
                        dbias[j] += gs[j];
                    }
                }
            }
            for (dst, &v) in grad_mut(parents, *gain).iter_mut().zip(&dgain) {
                *dst += v;
            }
            for (dst, &v) in grad_mut(parents, *bias).iter_mut().zip(&dbias) {
                *dst += v;
            }
        }
        Op::AddBias(a, b) => {
            let n = *node.shape.last().unwrap();
            for (dst, &gv) in grad_mut(parents, *a).iter_mut().zip(g) {
                *dst += gv;
            }
            let dst = grad_mut(parents, *b);
            for (i, &gv) in g.iter().enumerate() {
                dst[i % n] += gv;
            }
        }
        Op::LogAddExp(a, b) => {
            let va = value(parents, *a);
            let vb = value(parents, *b);
            for ((dst, &gv), (&av, &zv)) in grad_mut(parents, *a)
                .iter_mut()
                .zip(g)
                .zip(va.iter().zip(y.iter()))
            {
                *dst += gv * (av - zv).exp();
            }
            for ((dst, &gv), (&bv, &zv)) in grad_mut(parents, *b)
                .iter_mut()
                .zip(g)
                .zip(vb.iter().zip(y.iter()))
            {
                *dst += gv * (bv - zv).exp();
            }
        }
        Op::Sum(a) => {
            let gv = g[0];
            for dst in grad_mut(parents, *a) {
                *dst += gv;
            }
        }
        Op::Mean(a) => {
            let n = parents[*a].value.len();
            let gv = g[0] / n as f64;
            for dst in grad_mut(parents, *a) {
                *dst += gv;
            }
        }
    }
}
