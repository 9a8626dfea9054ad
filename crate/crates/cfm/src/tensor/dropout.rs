//! Deterministic dropout masks, shared between the two forward passes of the
//! consistency objective.

use std::rc::Rc;

use super::{RngStream, Tensor};
use crate::error::{Error, Result};

/// A sampled keep/drop pattern with inverted-scale normalization.
#[derive(Debug, Clone)]
pub struct DropoutMask {
    shape: Vec<usize>,
    keep_probability: f64,
    bits: Vec<bool>,
    scale: f64,
    id: u64,
    factors: Rc<Vec<f64>>,
}

impl DropoutMask {
    /// Sample a mask. `rate` is the drop probability, in [0, 1).
    pub fn sample(stream: &mut RngStream, shape: &[usize], rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let id = stream.next_u64();
        let n: usize = shape.iter().product();
        let bits: Vec<bool> = (0..n).map(|_| stream.next_uniform() < keep).collect();
        let scale = 1.0 / keep;
        let factors = Rc::new(bits.iter().map(|&b| if b { scale } else { 0.0 }).collect());
        Ok(DropoutMask { shape: shape.to_vec(), keep_probability: keep, bits, scale, id, factors })
    }

    /// Multiply the mask into a tensor: kept entries scaled by 1/keep, the
    /// rest zeroed. Applying the same mask twice scales kept entries by
    /// 1/keep once per application and never revives dropped ones.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                "dropout",
                format!("mask {:?} vs input {:?}", self.shape, x.shape()),
            ));
        }
        let factor = Tensor {
            data: Rc::clone(&self.factors),
            shape: self.shape.clone(),
            node: None,
        };
        x.mul(&factor)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep_probability(&self) -> f64 {
        self.keep_probability
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn kept_fraction(&self) -> f64 {
        self.bits.iter().filter(|&&b| b).count() as f64 / self.bits.len() as f64
    }

    /// Identity of this sampled mask; used to assert mask sharing across passes.
    pub fn id(&self) -> u64 {
        self.id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_keeps_everything() {
        let mut s = RngStream::new(1);
        let m = DropoutMask::sample(&mut s, &[4, 8], 0.0).unwrap();
        assert_eq!(m.kept_fraction(), 1.0);
        assert_eq!(m.scale(), 1.0);
        let x = Tensor::full(&[4, 8], 3.0).unwrap();
        assert!(m.apply(&x).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn rate_one_is_rejected() {
        let mut s = RngStream::new(1);
        assert!(DropoutMask::sample(&mut s, &[2], 1.0).is_err());
    }

    #[test]
    fn same_stream_state_same_bits() {
        let mut a = RngStream::new(42).child(3);
        let mut b = RngStream::new(42).child(3);
        let ma = DropoutMask::sample(&mut a, &[100], 0.05).unwrap();
        let mb = DropoutMask::sample(&mut b, &[100], 0.05).unwrap();
        assert_eq!(ma.bits, mb.bits);
        assert_eq!(ma.id(), mb.id());
    }

    #[test]
    fn kept_fraction_near_keep_probability() {
        let mut s = RngStream::new(7);
        let m = DropoutMask::sample(&mut s, &[100, 100], 0.05).unwrap();
        let f = m.kept_fraction();
        assert!((0.94..=0.96).contains(&f), "kept fraction {f}");
    }

    #[test]
    fn double_application_is_idempotent_up_to_scale() {
        let mut s = RngStream::new(9);
        let m = DropoutMask::sample(&mut s, &[50], 0.2).unwrap();
        let x = Tensor::full(&[50], 1.0).unwrap();
        let once = m.apply(&x).unwrap();
        let twice = m.apply(&once).unwrap();
        // Dropped stay dropped; kept entries pick up one extra scale factor.
        for i in 0..50 {
            assert_eq!(twice.data()[i], once.data()[i] * m.scale() * (once.data()[i] != 0.0) as u8 as f64);
        }
    }
}
