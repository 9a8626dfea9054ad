//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Tensors are immutable after construction. Gradient tracking is explicit:
//! a tensor participates in differentiation only after being registered on a
//! [`Tape`] via [`Tape::watch`], and `detach` strips tracking again — that is
//! how the stop-gradient evaluation mode is realized. Every completed
//! operation checks its output for NaN/Inf and fails rather than propagate.

mod dropout;
mod ops;
mod rng;
mod tape;

pub use dropout::DropoutMask;
pub use ops::{concat_cols, embed_rows, OpKind};
pub use rng::RngStream;
pub use tape::{Gradients, Tape};

use std::rc::Rc;

use crate::error::{Error, Result};
pub(crate) use tape::NodeRef;

/// Dense row-major tensor. Cheap to clone (payload is shared).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field("data", &&self.data[..self.data.len().min(8)])
            .finish()
    }
}

impl Tensor {
    /// Build a tensor, validating payload length and finiteness.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("new", format!("zero dimension in {shape:?}")));
        }
        if data.len() != expect {
            return Err(Error::shape(
                "new",
                format!("payload length {} != product of {:?}", data.len(), shape),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { data: Rc::new(data), shape: shape.to_vec(), node: None })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![v], &[1])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { data: Rc::new(vec![0.0; n]), shape: shape.to_vec(), node: None }
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(vec![v; n], shape)
    }

    /// i.i.d. standard normal draws; advances the stream two positions per entry.
    pub fn standard_normal(stream: &mut RngStream, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| stream.next_normal()).collect();
        Tensor::new(data, shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Extract the value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape participation. This is the stop-gradient view.
    pub fn detach(&self) -> Tensor {
        Tensor { data: Rc::clone(&self.data), shape: self.shape.clone(), node: None }
    }

    /// Row view of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub(crate) fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    /// Bitwise equality of shape and payload.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).is_ok());
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![1.0, f64::NAN], &[2]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![f64::INFINITY], &[1]).is_err());
    }

    #[test]
    fn standard_normal_is_deterministic() {
        let mut a = RngStream::new(9).child(1);
        let mut b = RngStream::new(9).child(1);
        let ta = Tensor::standard_normal(&mut a, &[2, 3]).unwrap();
        let tb = Tensor::standard_normal(&mut b, &[2, 3]).unwrap();
        assert!(ta.bitwise_eq(&tb));
        assert_eq!(ta.numel(), 6);
    }

    #[test]
    fn detach_shares_data() {
        let t = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let d = t.detach();
        assert_eq!(t.data(), d.data());
        assert!(!d.requires_grad());
    }
}
