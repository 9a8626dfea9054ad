//! Forward operations. Each op validates shapes, computes, checks the result
//! for NaN/Inf, and records itself on the tape when any input is tracked.

use std::rc::Rc;

use super::tape::{Back, NodeRef, Slot, Tape};
use super::{check_finite, Tensor};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

pub(crate) fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn slot(t: &Tensor) -> Slot {
    t.node.as_ref().map(|n| n.id)
}

/// The tape shared by the tracked inputs, if any. Mixing tapes is an error.
fn recording_tape(op: &'static str, inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(node) = &t.node {
            match tape {
                None => tape = Some(&node.tape),
                Some(existing) if existing.same_tape(&node.tape) => {}
                Some(_) => {
                    return Err(Error::Contract(format!(
                        "{op}: inputs tracked on different tapes"
                    )))
                }
            }
        }
    }
    Ok(tape.cloned())
}

fn finish(
    op: &'static str,
    tape: Option<Tape>,
    back: impl FnOnce() -> Back,
    data: Vec<f64>,
    shape: Vec<usize>,
) -> Result<Tensor> {
    check_finite(op, &data)?;
    let node = match tape {
        Some(tape) => {
            let id = tape.record(back())?;
            Some(NodeRef { tape, id })
        }
        None => None,
    };
    Ok(Tensor { data: Rc::new(data), shape, node })
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let tape = recording_tape("add", &[self, other])?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect();
        finish("add", tape, || Back::Add { a: slot(self), b: slot(other) }, data, self.shape.clone())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let tape = recording_tape("sub", &[self, other])?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect();
        finish("sub", tape, || Back::Sub { a: slot(self), b: slot(other) }, data, self.shape.clone())
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let tape = recording_tape("mul", &[self, other])?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).collect();
        finish(
            "mul",
            tape,
            || Back::Mul {
                a: slot(self),
                b: slot(other),
                a_data: Rc::clone(&self.data),
                b_data: Rc::clone(&other.data),
            },
            data,
            self.shape.clone(),
        )
    }

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let tape = recording_tape("matmul", &[self, other])?;
        let data = matmul_raw(&self.data, &other.data, m, k, n);
        finish(
            "matmul",
            tape,
            || Back::Matmul {
                a: slot(self),
                b: slot(other),
                a_data: Rc::clone(&self.data),
                b_data: Rc::clone(&other.data),
                m,
                k,
                n,
            },
            data,
            vec![m, n],
        )
    }

    /// Fused dense layer: `x @ w + bias`, bias broadcast over rows.
    pub fn affine(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("affine")?;
        let (k2, n) = weight.rows_cols("affine")?;
        if k != k2 {
            return Err(Error::shape("affine", format!("inner dims {k} vs {k2}")));
        }
        if bias.shape() != [n] {
            return Err(Error::shape("affine", format!("bias {:?}, expected [{n}]", bias.shape())));
        }
        let tape = recording_tape("affine", &[self, weight, bias])?;
        let mut data = matmul_raw(&self.data, &weight.data, m, k, n);
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += bias.data[c];
            }
        }
        finish(
            "affine",
            tape,
            || Back::Affine {
                x: slot(self),
                w: slot(weight),
                bias: slot(bias),
                x_data: Rc::clone(&self.data),
                w_data: Rc::clone(&weight.data),
                m,
                k,
                n,
            },
            data,
            vec![m, n],
        )
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let tape = recording_tape("tanh", &[self])?;
        let data: Vec<f64> = self.data.iter().map(|v| v.tanh()).collect();
        let y = Rc::new(data);
        let out = Tensor { data: Rc::clone(&y), shape: self.shape.clone(), node: None };
        match tape {
            Some(tape) => {
                let id = tape.record(Back::Tanh { x: slot(self), y_data: Rc::clone(&y) })?;
                Ok(Tensor { node: Some(NodeRef { tape, id }), ..out })
            }
            None => Ok(out),
        }
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let tape = recording_tape("gelu", &[self])?;
        let data = self.data.iter().map(|&v| gelu_value(v)).collect();
        finish(
            "gelu",
            tape,
            || Back::Gelu { x: slot(self), x_data: Rc::clone(&self.data) },
            data,
            self.shape.clone(),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        let tape = recording_tape("leaky_relu", &[self])?;
        let data = self.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        finish(
            "leaky_relu",
            tape,
            || Back::LeakyRelu { x: slot(self), x_data: Rc::clone(&self.data), slope },
            data,
            self.shape.clone(),
        )
    }

    pub fn square(&self) -> Result<Tensor> {
        let tape = recording_tape("square", &[self])?;
        let data = self.data.iter().map(|v| v * v).collect();
        finish(
            "square",
            tape,
            || Back::Square { x: slot(self), x_data: Rc::clone(&self.data) },
            data,
            self.shape.clone(),
        )
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt of negative value".into()));
        }
        let tape = recording_tape("sqrt", &[self])?;
        let data: Vec<f64> = self.data.iter().map(|v| v.sqrt()).collect();
        let y = Rc::new(data);
        let out = Tensor { data: Rc::clone(&y), shape: self.shape.clone(), node: None };
        match tape {
            Some(tape) => {
                let id = tape.record(Back::Sqrt { x: slot(self), y_data: Rc::clone(&y) })?;
                Ok(Tensor { node: Some(NodeRef { tape, id }), ..out })
            }
            None => Ok(out),
        }
    }

    pub fn abs(&self) -> Result<Tensor> {
        let tape = recording_tape("abs", &[self])?;
        let data = self.data.iter().map(|v| v.abs()).collect();
        finish(
            "abs",
            tape,
            || Back::Abs { x: slot(self), x_data: Rc::clone(&self.data) },
            data,
            self.shape.clone(),
        )
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let tape = recording_tape("sum", &[self])?;
        let data = vec![self.data.iter().sum()];
        finish("sum", tape, || Back::Sum { x: slot(self), n: self.numel() }, data, vec![1])
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&self) -> Result<Tensor> {
        let tape = recording_tape("mean", &[self])?;
        let data = vec![self.data.iter().sum::<f64>() / self.numel() as f64];
        finish("mean", tape, || Back::Mean { x: slot(self), n: self.numel() }, data, vec![1])
    }

    /// Row sums of a 2-D tensor: `[r,c] -> [r]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("sum_rows")?;
        let tape = recording_tape("sum_rows", &[self])?;
        let data = (0..rows).map(|r| self.row(r).iter().sum()).collect();
        finish("sum_rows", tape, || Back::SumRows { x: slot(self), rows, cols }, data, vec![rows])
    }

    /// Per-row scaling: `out[r,c] = self[r,c] * s[r]`.
    pub fn scale_rows(&self, s: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.rows_cols("scale_rows")?;
        if s.shape() != [rows] {
            return Err(Error::shape("scale_rows", format!("scale {:?}, expected [{rows}]", s.shape())));
        }
        let tape = recording_tape("scale_rows", &[self, s])?;
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let sv = s.data[r];
            data.extend(self.row(r).iter().map(|v| v * sv));
        }
        finish(
            "scale_rows",
            tape,
            || Back::ScaleRows {
                x: slot(self),
                s: slot(s),
                x_data: Rc::clone(&self.data),
                s_data: Rc::clone(&s.data),
                rows,
                cols,
            },
            data,
            vec![rows, cols],
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let tape = recording_tape("add_scalar", &[self])?;
        let data = self.data.iter().map(|v| v + c).collect();
        finish("add_scalar", tape, || Back::AddScalar { x: slot(self) }, data, self.shape.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        let tape = recording_tape("mul_scalar", &[self])?;
        let data = self.data.iter().map(|v| v * c).collect();
        finish("mul_scalar", tape, || Back::MulScalar { x: slot(self), c }, data, self.shape.clone())
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    /// Squared L2 norm per row: `[r,c] -> [r]`. Composite of square + sum_rows.
    pub fn sq_norm_rows(&self) -> Result<Tensor> {
        self.square()?.sum_rows()
    }

    /// Squared L2 norm of the whole tensor, as `[1]`.
    pub fn sq_norm(&self) -> Result<Tensor> {
        self.square()?.sum()
    }
}

/// Column-wise concatenation of 2-D tensors with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols", "no inputs".to_string()));
    }
    let (rows, _) = parts[0].rows_cols("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.rows_cols("concat_cols")?;
        if r != rows {
            return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let tape = recording_tape("concat_cols", parts)?;
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    finish(
        "concat_cols",
        tape,
        || Back::ConcatCols {
            parts: parts.iter().zip(&widths).map(|(p, &w)| (slot(p), w)).collect(),
            rows,
        },
        data,
        vec![rows, total],
    )
}

/// Row lookup: `out[b,:] = table[labels[b],:]`. Gradients scatter-add into the table.
pub fn embed_rows(table: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, cols) = table.rows_cols("embed_rows")?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::Domain(format!("embed label {bad} out of range 0..{n}")));
    }
    let tape = recording_tape("embed_rows", &[table])?;
    let mut data = Vec::with_capacity(labels.len() * cols);
    for &l in labels {
        data.extend_from_slice(table.row(l));
    }
    finish(
        "embed_rows",
        tape,
        || Back::Embed {
            table: slot(table),
            labels: labels.to_vec(),
            cols,
            table_numel: n * cols,
        },
        data,
        vec![labels.len(), cols],
    )
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
    c
}

/// Operation selector for the uniform dispatch entry point.
#[derive(Debug, Clone)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Matmul,
    Affine,
    Tanh,
    Gelu,
    LeakyRelu(f64),
    Square,
    Sqrt,
    Abs,
    Sum,
    Mean,
    SumRows,
    ScaleRows,
    AddScalar(f64),
    ScalarScale(f64),
    ConcatCols,
    Embed(Vec<usize>),
    SqNormRows,
}

impl OpKind {
    /// Apply the op to its inputs. Arity and shapes are validated by the
    /// underlying implementations.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Contract(format!(
                    "{self:?} expects {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match self {
            OpKind::Add => {
                need(2)?;
                inputs[0].add(inputs[1])
            }
            OpKind::Sub => {
                need(2)?;
                inputs[0].sub(inputs[1])
            }
            OpKind::Mul => {
                need(2)?;
                inputs[0].mul(inputs[1])
            }
            OpKind::Matmul => {
                need(2)?;
                inputs[0].matmul(inputs[1])
            }
            OpKind::Affine => {
                need(3)?;
                inputs[0].affine(inputs[1], inputs[2])
            }
            OpKind::Tanh => {
                need(1)?;
                inputs[0].tanh()
            }
            OpKind::Gelu => {
                need(1)?;
                inputs[0].gelu()
            }
            OpKind::LeakyRelu(slope) => {
                need(1)?;
                inputs[0].leaky_relu(*slope)
            }
            OpKind::Square => {
                need(1)?;
                inputs[0].square()
            }
            OpKind::Sqrt => {
                need(1)?;
                inputs[0].sqrt()
            }
            OpKind::Abs => {
                need(1)?;
                inputs[0].abs()
            }
            OpKind::Sum => {
                need(1)?;
                inputs[0].sum()
            }
            OpKind::Mean => {
                need(1)?;
                inputs[0].mean()
            }
            OpKind::SumRows => {
                need(1)?;
                inputs[0].sum_rows()
            }
            OpKind::ScaleRows => {
                need(2)?;
                inputs[0].scale_rows(inputs[1])
            }
            OpKind::AddScalar(c) => {
                need(1)?;
                inputs[0].add_scalar(*c)
            }
            OpKind::ScalarScale(c) => {
                need(1)?;
                inputs[0].mul_scalar(*c)
            }
            OpKind::ConcatCols => concat_cols(inputs),
            OpKind::Embed(labels) => {
                need(1)?;
                embed_rows(inputs[0], labels)
            }
            OpKind::SqNormRows => {
                need(1)?;
                inputs[0].sq_norm_rows()
            }
        }
    }
}
