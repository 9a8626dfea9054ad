//! Few-step Euler integration of a learned velocity field, with trajectory
//! recording for straightness diagnostics.

use crate::error::{Error, Result};
use crate::nets::VelocityModel;
use crate::tensor::Tensor;

/// The numerical flow: states visited on the uniform step grid over [0, 1].
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    pub nfe: usize,
}

/// Integrate `x' = v(t, x, cond)` from `x0` at t=0 to t=1 with `nfe` Euler
/// steps: `x_{k+1} = x_k + (1/nfe) * v(k/nfe, x_k, cond)`.
///
/// Inference mode: no dropout, no gradient tracking (inputs are detached and
/// the field is evaluated untracked).
pub fn euler_sample(
    net: &dyn VelocityModel,
    x0: &Tensor,
    cond: &Tensor,
    nfe: usize,
) -> Result<(Tensor, TrajectoryRecord)> {
    if nfe == 0 {
        return Err(Error::Config("euler_sample needs nfe >= 1".into()));
    }
    let (batch, _) = x0.rows_cols("euler_sample")?;
    let h = 1.0 / nfe as f64;
    let mut x = x0.detach();
    let cond = cond.detach();
    let mut times = Vec::with_capacity(nfe + 1);
    let mut states = Vec::with_capacity(nfe + 1);
    times.push(0.0);
    states.push(x.clone());
    for k in 0..nfe {
        let t = Tensor::full(&[batch], k as f64 * h)?;
        let v = net.velocity(&t, &x, &cond, None, false, None)?;
        x = x.add(&v.mul_scalar(h)?).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!("euler step {k}")),
            other => other,
        })?;
        times.push((k + 1) as f64 * h);
        states.push(x.clone());
    }
    Ok((x, TrajectoryRecord { times, states, nfe }))
}

/// Path curvature proxy: mean over steps of the deviation of per-step
/// displacements from their mean displacement, averaged over the batch.
/// Zero iff the discrete path is a straight line; scales linearly with the
/// states.
pub fn straightness(record: &TrajectoryRecord) -> Result<f64> {
    if record.nfe < 2 {
        return Err(Error::Contract(format!(
            "straightness needs nfe >= 2, got {}",
            record.nfe
        )));
    }
    if record.states.len() != record.nfe + 1 {
        return Err(Error::Contract(format!(
            "record holds {} states for nfe {}",
            record.states.len(),
            record.nfe
        )));
    }
    let (batch, dim) = record.states[0].rows_cols("straightness")?;
    let steps = record.nfe;
    // displacements[k][b*dim + j]
    let mut disp = vec![vec![0.0; batch * dim]; steps];
    for k in 0..steps {
        let a = &record.states[k];
        let b = &record.states[k + 1];
        for i in 0..batch * dim {
            disp[k][i] = b.data()[i] - a.data()[i];
        }
    }
    let mut total = 0.0;
    for b in 0..batch {
        let mut mean = vec![0.0; dim];
        for d in disp.iter() {
            for j in 0..dim {
                mean[j] += d[b * dim + j] / steps as f64;
            }
        }
        let mut acc = 0.0;
        for d in disp.iter() {
            let mut sq = 0.0;
            for j in 0..dim {
                let dev = d[b * dim + j] - mean[j];
                sq += dev * dev;
            }
            acc += sq.sqrt();
        }
        total += acc / steps as f64;
    }
    Ok(total / batch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{EvalTrace, MaskSet};
    use crate::tensor::RngStream;

    struct ConstantField(Vec<f64>);

    impl VelocityModel for ConstantField {
        fn velocity(
            &self,
            _t: &Tensor,
            x: &Tensor,
            _cond: &Tensor,
            _masks: Option<&MaskSet>,
            _track: bool,
            _trace: Option<&mut EvalTrace>,
        ) -> Result<Tensor> {
            let (b, d) = x.rows_cols("constant field")?;
            let mut data = Vec::with_capacity(b * d);
            for _ in 0..b {
                data.extend_from_slice(&self.0);
            }
            Tensor::new(data, &[b, d])
        }
    }

    /// v(t, x) = x, whose exact flow is x0 * e^t; Euler gives (1 + 1/n)^n.
    struct IdentityField;

    impl VelocityModel for IdentityField {
        fn velocity(
            &self,
            _t: &Tensor,
            x: &Tensor,
            _cond: &Tensor,
            _masks: Option<&MaskSet>,
            _track: bool,
            _trace: Option<&mut EvalTrace>,
        ) -> Result<Tensor> {
            Ok(x.detach())
        }
    }

    fn cond_for(x0: &Tensor) -> Tensor {
        Tensor::zeros(&[x0.shape()[0], 1])
    }

    #[test]
    fn constant_field_is_exact_for_any_nfe() {
        let mut s = RngStream::new(1);
        let x0 = Tensor::standard_normal(&mut s, &[5, 2]).unwrap();
        let field = ConstantField(vec![1.5, -2.0]);
        for nfe in [1usize, 2, 10] {
            let (x1, rec) = euler_sample(&field, &x0, &cond_for(&x0), nfe).unwrap();
            for r in 0..5 {
                assert!((x1.row(r)[0] - (x0.row(r)[0] + 1.5)).abs() < 1e-12);
                assert!((x1.row(r)[1] - (x0.row(r)[1] - 2.0)).abs() < 1e-12);
            }
            assert_eq!(rec.states.len(), nfe + 1);
            assert_eq!(rec.times.first(), Some(&0.0));
            assert_eq!(rec.times.last(), Some(&1.0));
        }
    }

    #[test]
    fn linear_field_matches_compound_growth() {
        let x0 = Tensor::new(vec![1.0, -0.5, 2.0, 0.25], &[2, 2]).unwrap();
        for nfe in [1usize, 2, 10, 100] {
            let (x1, _) = euler_sample(&IdentityField, &x0, &cond_for(&x0), nfe).unwrap();
            let growth = (1.0 + 1.0 / nfe as f64).powi(nfe as i32);
            for i in 0..4 {
                let expect = x0.data()[i] * growth;
                let rel = (x1.data()[i] - expect).abs() / expect.abs().max(1e-12);
                assert!(rel < 1e-6, "nfe {nfe} entry {i}: {} vs {expect}", x1.data()[i]);
            }
        }
    }

    #[test]
    fn single_step_equals_endpoint_map_at_zero() {
        let mut s = RngStream::new(2);
        let x0 = Tensor::standard_normal(&mut s, &[3, 2]).unwrap();
        let field = ConstantField(vec![0.7, 0.1]);
        let (x1, rec) = euler_sample(&field, &x0, &cond_for(&x0), 1).unwrap();
        assert_eq!(rec.nfe, 1);
        for r in 0..3 {
            assert_eq!(x1.row(r)[0], x0.row(r)[0] + 0.7);
            assert_eq!(x1.row(r)[1], x0.row(r)[1] + 0.1);
        }
    }

    #[test]
    fn euler_is_deterministic() {
        let mut s = RngStream::new(3);
        let x0 = Tensor::standard_normal(&mut s, &[4, 2]).unwrap();
        let (a, _) = euler_sample(&IdentityField, &x0, &cond_for(&x0), 7).unwrap();
        let (b, _) = euler_sample(&IdentityField, &x0, &cond_for(&x0), 7).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn straightness_zero_on_constant_field() {
        let mut s = RngStream::new(4);
        let x0 = Tensor::standard_normal(&mut s, &[6, 2]).unwrap();
        let (_, rec) = euler_sample(&ConstantField(vec![2.0, -1.0]), &x0, &cond_for(&x0), 4).unwrap();
        assert!(straightness(&rec).unwrap() < 1e-14);
    }

    #[test]
    fn straightness_hand_value_on_right_angle() {
        // Path (0,0) -> (1,0) -> (1,1): displacement deviation sqrt(2)/2.
        let states = vec![
            Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap(),
            Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap(),
            Tensor::new(vec![1.0, 1.0], &[1, 2]).unwrap(),
        ];
        let rec = TrajectoryRecord { times: vec![0.0, 0.5, 1.0], states, nfe: 2 };
        let v = straightness(&rec).unwrap();
        assert!((v - std::f64::consts::SQRT_2 / 2.0).abs() < 1e-12, "straightness {v}");

        // Scaling all states by 2 doubles the measure.
        let scaled: Vec<Tensor> = rec.states.iter().map(|t| t.mul_scalar(2.0).unwrap()).collect();
        let rec2 = TrajectoryRecord { times: rec.times.clone(), states: scaled, nfe: 2 };
        assert!((straightness(&rec2).unwrap() - 2.0 * v).abs() < 1e-12);
    }

    #[test]
    fn straightness_requires_two_steps() {
        let states = vec![Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])];
        let rec = TrajectoryRecord { times: vec![0.0, 1.0], states, nfe: 1 };
        assert!(straightness(&rec).is_err());
    }

    #[test]
    fn nfe_zero_rejected() {
        let x0 = Tensor::zeros(&[1, 2]);
        assert!(euler_sample(&IdentityField, &x0, &cond_for(&x0), 0).is_err());
    }
}
