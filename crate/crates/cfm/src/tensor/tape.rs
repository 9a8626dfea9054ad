//! Wengert tape: operations recorded forward, gradients replayed in reverse.
//!
//! One tape per computation, single-threaded. Calling [`Tape::backward`]
//! consumes the tape; a fresh tape is created per training step.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{check_finite, Tensor};
use crate::error::{Error, Result};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Parent slot: `None` means the input was untracked and receives no gradient.
pub(crate) type Slot = Option<usize>;
pub(crate) type Data = Rc<Vec<f64>>;

/// Backward rule for one recorded operation, with whatever forward values
/// the rule needs (shared, not copied).
pub(crate) enum Back {
    Leaf,
    Add { a: Slot, b: Slot },
    Sub { a: Slot, b: Slot },
    Mul { a: Slot, b: Slot, a_data: Data, b_data: Data },
    Matmul { a: Slot, b: Slot, a_data: Data, b_data: Data, m: usize, k: usize, n: usize },
    Affine { x: Slot, w: Slot, bias: Slot, x_data: Data, w_data: Data, m: usize, k: usize, n: usize },
    Tanh { x: Slot, y_data: Data },
    Gelu { x: Slot, x_data: Data },
    LeakyRelu { x: Slot, x_data: Data, slope: f64 },
    Square { x: Slot, x_data: Data },
    Sqrt { x: Slot, y_data: Data },
    Abs { x: Slot, x_data: Data },
    Sum { x: Slot, n: usize },
    Mean { x: Slot, n: usize },
    SumRows { x: Slot, rows: usize, cols: usize },
    ScaleRows { x: Slot, s: Slot, x_data: Data, s_data: Data, rows: usize, cols: usize },
    AddScalar { x: Slot },
    MulScalar { x: Slot, c: f64 },
    ConcatCols { parts: Vec<(Slot, usize)>, rows: usize },
    Embed { table: Slot, labels: Vec<usize>, cols: usize, table_numel: usize },
}

pub(crate) struct Node {
    pub back: Back,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Handle to a shared recording tape.
#[derive(Clone)]
pub struct Tape {
    uid: u64,
    inner: Rc<RefCell<TapeInner>>,
}

/// Ties a tensor to a node on a specific tape.
#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })),
        }
    }

    /// Number of recorded operations (including leaves).
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same_tape(&self, other: &Tape) -> bool {
        self.uid == other.uid
    }

    /// Register a tensor as a differentiable leaf and return the tracked view.
    pub fn watch(&self, t: &Tensor) -> Result<Tensor> {
        let id = self.record(Back::Leaf)?;
        Ok(Tensor {
            data: Rc::clone(&t.data),
            shape: t.shape.clone(),
            node: Some(NodeRef { tape: self.clone(), id }),
        })
    }

    pub(crate) fn record(&self, back: Back) -> Result<usize> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Contract("recording on a consumed tape".into()));
        }
        inner.nodes.push(Node { back });
        Ok(inner.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss. Consumes the tape: leaves hold
    /// `d loss / d leaf` in the returned map, and no further recording or
    /// backward is possible on this tape.
    pub fn backward(loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let Some(node) = &loss.node else {
            // Constant loss: gradient is zero everywhere.
            return Ok(Gradients { tape_uid: None, grads: Vec::new() });
        };
        let tape = &node.tape;
        let mut inner = tape.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Contract("backward on a consumed tape".into()));
        }
        inner.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        grads[node.id] = Some(vec![1.0]);

        for id in (0..=node.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            apply_back(&inner.nodes[id].back, &g, &mut grads);
            grads[id] = Some(g);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { tape_uid: Some(tape.uid), grads })
    }
}

/// Gradient map produced by one backward pass, keyed by tape node.
pub struct Gradients {
    tape_uid: Option<u64>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. Tensors that did not
    /// participate in the loss (untracked, other tape, or unreached) get
    /// zeros of their own shape.
    pub fn wrt(&self, t: &Tensor) -> Tensor {
        if let (Some(uid), Some(node)) = (self.tape_uid, &t.node) {
            if node.tape.uid == uid {
                if let Some(Some(g)) = self.grads.get(node.id) {
                    return Tensor {
                        data: Rc::new(g.clone()),
                        shape: t.shape.clone(),
                        node: None,
                    };
                }
            }
        }
        Tensor::zeros(t.shape())
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], slot: Slot, numel: usize, add: impl Fn(&mut [f64])) {
    let Some(idx) = slot else { return };
    let buf = grads[idx].get_or_insert_with(|| vec![0.0; numel]);
    add(buf);
}

fn apply_back(back: &Back, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match back {
        Back::Leaf => {}
        Back::Add { a, b } => {
            accum(grads, *a, g.len(), |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            });
            accum(grads, *b, g.len(), |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            });
        }
        Back::Sub { a, b } => {
            accum(grads, *a, g.len(), |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            });
            accum(grads, *b, g.len(), |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o -= gi;
                }
            });
        }
        Back::Mul { a, b, a_data, b_data } => {
            accum(grads, *a, g.len(), |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * b_data[i];
                }
            });
            accum(grads, *b, g.len(), |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * a_data[i];
                }
            });
        }
        Back::Matmul { a, b, a_data, b_data, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            // dA = g @ B^T
            accum(grads, *a, m * k, |buf| {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b_data[p * n + j];
                        }
                        buf[i * k + p] += acc;
                    }
                }
            });
            // dB = A^T @ g
            accum(grads, *b, k * n, |buf| {
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = a_data[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            buf[p * n + j] += a_ip * g[i * n + j];
                        }
                    }
                }
            });
        }
        Back::Affine { x, w, bias, x_data, w_data, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            accum(grads, *x, m * k, |buf| {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * w_data[p * n + j];
                        }
                        buf[i * k + p] += acc;
                    }
                }
            });
            accum(grads, *w, k * n, |buf| {
                for i in 0..m {
                    for p in 0..k {
                        let x_ip = x_data[i * k + p];
                        if x_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            buf[p * n + j] += x_ip * g[i * n + j];
                        }
                    }
                }
            });
            accum(grads, *bias, n, |buf| {
                for i in 0..m {
                    for j in 0..n {
                        buf[j] += g[i * n + j];
                    }
                }
            });
        }
        Back::Tanh { x, y_data } => {
            accum(grads, *x, g.len(), |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * (1.0 - y_data[i] * y_data[i]);
                }
            });
        }
        Back::Gelu { x, x_data } => {
            accum(grads, *x, g.len(), |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * super::ops::gelu_derivative(x_data[i]);
                }
            });
        }
        Back::LeakyRelu { x, x_data, slope } => {
            accum(grads, *x, g.len(), |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * if x_data[i] > 0.0 { 1.0 } else { *slope };
                }
            });
        }
        Back::Square { x, x_data } => {
            accum(grads, *x, g.len(), |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * 2.0 * x_data[i];
                }
            });
        }
        Back::Sqrt { x, y_data } => {
            accum(grads, *x, g.len(), |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * 0.5 / y_data[i];
                }
            });
        }
        Back::Abs { x, x_data } => {
            accum(grads, *x, g.len(), |buf| {
                for i in 0..g.len() {
                    buf[i] += g[i] * x_data[i].signum() * (x_data[i] != 0.0) as u8 as f64;
                }
            });
        }
        Back::Sum { x, n } => {
            accum(grads, *x, *n, |buf| {
                for o in buf.iter_mut() {
                    *o += g[0];
                }
            });
        }
        Back::Mean { x, n } => {
            let scale = 1.0 / *n as f64;
            accum(grads, *x, *n, |buf| {
                for o in buf.iter_mut() {
                    *o += g[0] * scale;
                }
            });
        }
        Back::SumRows { x, rows, cols } => {
            accum(grads, *x, rows * cols, |buf| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        buf[r * cols + c] += g[r];
                    }
                }
            });
        }
        Back::ScaleRows { x, s, x_data, s_data, rows, cols } => {
            accum(grads, *x, rows * cols, |buf| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        buf[r * cols + c] += g[r * cols + c] * s_data[r];
                    }
                }
            });
            accum(grads, *s, *rows, |buf| {
                for r in 0..*rows {
                    let mut acc = 0.0;
                    for c in 0..*cols {
                        acc += g[r * cols + c] * x_data[r * cols + c];
                    }
                    buf[r] += acc;
                }
            });
        }
        Back::AddScalar { x } => {
            accum(grads, *x, g.len(), |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi;
                }
            });
        }
        Back::MulScalar { x, c } => {
            accum(grads, *x, g.len(), |buf| {
                for (o, gi) in buf.iter_mut().zip(g) {
                    *o += gi * c;
                }
            });
        }
        Back::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|(_, c)| c).sum();
            let mut offset = 0;
            for (slot, cols) in parts {
                let off = offset;
                accum(grads, *slot, rows * cols, |buf| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            buf[r * cols + c] += g[r * total + off + c];
                        }
                    }
                });
                offset += cols;
            }
        }
        Back::Embed { table, labels, cols, table_numel } => {
            // Scatter-add row gradients back into the table.
            accum(grads, *table, *table_numel, |buf| {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..*cols {
                        buf[label * cols + c] += g[r * cols + c];
                    }
                }
            });
        }
    }
}
