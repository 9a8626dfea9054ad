//! Training objectives: the flow-matching regression baseline, the
//! stage-1 straight-flow loss against ground-truth segment endpoints, the
//! stage-2 consistency objective (straight-flow + velocity-consistency),
//! the pseudo-Huber metric, and the adversarial/feature-matching pair.
//!
//! Aggregation convention: metric losses are computed per sample over
//! feature dimensions, then averaged over the batch. The one exception is
//! the flow-matching baseline, which is a plain mean-squared error over all
//! elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Discriminator, EvalTrace, MaskSet, VelocityModel};
use crate::tensor::Tensor;

/// Distance used inside the stage losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    SquaredL2,
    PseudoHuber,
}

/// Knobs of the consistency objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfmLossConfig {
    /// Number of equal segments partitioning [0, 1].
    pub segments: usize,
    /// Weight of the velocity-consistency term.
    pub alpha: f64,
    pub metric: Metric,
    /// Pseudo-Huber offset; `huber_c_for_dim` gives the standard value.
    pub huber_c: f64,
    /// Current time interval between the two trajectory points.
    pub delta_t: f64,
}

/// The standard pseudo-Huber offset `0.00054 * sqrt(d)` for data dimension `d`.
pub fn huber_c_for_dim(dim: usize) -> f64 {
    0.00054 * (dim as f64).sqrt()
}

impl CfmLossConfig {
    pub fn new(segments: usize, alpha: f64, metric: Metric, data_dim: usize, delta_t: f64) -> Result<Self> {
        let cfg = CfmLossConfig { segments, alpha, metric, huber_c: huber_c_for_dim(data_dim), delta_t };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::Config("segment count must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be nonnegative", self.alpha)));
        }
        if matches!(self.metric, Metric::PseudoHuber) && self.huber_c <= 0.0 {
            return Err(Error::Config(format!("pseudo-Huber needs c > 0, got {}", self.huber_c)));
        }
        if self.delta_t < 0.0 {
            return Err(Error::Config(format!("delta_t {} must be nonnegative", self.delta_t)));
        }
        Ok(())
    }
}

/// One training step's input: paired noise/data, per-sample times and
/// segment indices, and the condition embedding.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    /// Per-sample time, shape `[batch]`.
    pub t: Tensor,
    /// Per-sample segment index, each in `0..segments`.
    pub seg: Vec<usize>,
    pub delta_t: f64,
    /// Condition embedding, shape `[batch, embed_dim]`.
    pub cond: Tensor,
}

impl TrajectoryBatch {
    /// Validate against a segment count: shapes line up and every sample's
    /// `t` and `t + delta_t` lie inside its segment.
    pub fn validate(&self, segments: usize) -> Result<()> {
        let (b, _) = self.x0.rows_cols("trajectory batch")?;
        if self.x1.shape() != self.x0.shape() {
            return Err(Error::shape(
                "trajectory batch",
                format!("x0 {:?} vs x1 {:?}", self.x0.shape(), self.x1.shape()),
            ));
        }
        if self.t.shape() != [b] || self.seg.len() != b {
            return Err(Error::shape(
                "trajectory batch",
                format!("t {:?} / {} segment indices for batch {b}", self.t.shape(), self.seg.len()),
            ));
        }
        let s = segments as f64;
        for (idx, (&t, &i)) in self.t.data().iter().zip(&self.seg).enumerate() {
            if i >= segments {
                return Err(Error::Domain(format!("sample {idx}: segment {i} out of range 0..{segments}")));
            }
            let lo = i as f64 / s;
            let hi = (i + 1) as f64 / s;
            if t < lo - 1e-12 || t + self.delta_t > hi + 1e-12 {
                return Err(Error::Domain(format!(
                    "sample {idx}: t {t} with delta {} escapes segment [{lo}, {hi}]",
                    self.delta_t
                )));
            }
        }
        Ok(())
    }
}

/// Linear interpolant `x_t = t*x1 + (1-t)*x0`, with per-sample `t` in [0, 1].
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = t.data().iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Domain(format!("interpolation time {bad} outside [0, 1]")));
    }
    let one_minus_t = t.neg()?.add_scalar(1.0)?;
    x1.scale_rows(t)?.add(&x0.scale_rows(&one_minus_t)?)
}

/// Ground-truth endpoint of each sample's segment:
/// `x^i = (i+1)/S * x1 + (1 - (i+1)/S) * x0`.
pub fn segment_endpoint(seg: &[usize], segments: usize, x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    if let Some(&bad) = seg.iter().find(|&&i| i >= segments) {
        return Err(Error::Domain(format!("segment index {bad} out of range 0..{segments}")));
    }
    let coef: Vec<f64> = seg.iter().map(|&i| (i + 1) as f64 / segments as f64).collect();
    let a = Tensor::new(coef, &[seg.len()])?;
    let one_minus_a = a.neg()?.add_scalar(1.0)?;
    x1.scale_rows(&a)?.add(&x0.scale_rows(&one_minus_a)?)
}

/// One-jump endpoint estimate `f = x_t + ((i+1)/S - t) * v`.
pub fn endpoint_map(t: &Tensor, x_t: &Tensor, v: &Tensor, seg: &[usize], segments: usize) -> Result<Tensor> {
    if let Some(&bad) = seg.iter().find(|&&i| i >= segments) {
        return Err(Error::Domain(format!("segment index {bad} out of range 0..{segments}")));
    }
    let mut coef = Vec::with_capacity(seg.len());
    for (&tv, &i) in t.data().iter().zip(seg) {
        let end = (i + 1) as f64 / segments as f64;
        if tv > end + 1e-12 {
            return Err(Error::Domain(format!("t {tv} beyond segment end {end}")));
        }
        coef.push(end - tv);
    }
    let c = Tensor::new(coef, &[seg.len()])?;
    x_t.add(&v.scale_rows(&c)?)
}

/// Per-sample metric, then batch mean.
fn metric_loss(metric: Metric, huber_c: f64, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sq = a.sub(b)?.sq_norm_rows()?;
    match metric {
        Metric::SquaredL2 => sq.mean(),
        Metric::PseudoHuber => {
            if huber_c <= 0.0 {
                return Err(Error::Config(format!("pseudo-Huber needs c > 0, got {huber_c}")));
            }
            sq.add_scalar(huber_c * huber_c)?.sqrt()?.add_scalar(-huber_c)?.mean()
        }
    }
}

/// Pseudo-Huber distance `sqrt(||x-y||^2 + c^2) - c`, per sample, batch mean.
pub fn pseudo_huber(x: &Tensor, y: &Tensor, c: f64) -> Result<Tensor> {
    if c <= 0.0 {
        return Err(Error::Config(format!("pseudo-Huber needs c > 0, got {c}")));
    }
    metric_loss(Metric::PseudoHuber, c, x, y)
}

/// Stage-1 objective: pull the endpoint estimate onto the ground-truth
/// segment endpoint, `metric(f^i(t, x_t), x^i)`.
pub fn loss_stage1(net: &dyn VelocityModel, batch: &TrajectoryBatch, cfg: &CfmLossConfig) -> Result<Tensor> {
    cfg.validate()?;
    batch.validate(cfg.segments)?;
    let x_t = interpolate(&batch.x0, &batch.x1, &batch.t)?;
    let v = net.velocity(&batch.t, &x_t, &batch.cond, None, true, None)?;
    let f = endpoint_map(&batch.t, &x_t, &v, &batch.seg, cfg.segments)?;
    let target = segment_endpoint(&batch.seg, cfg.segments, &batch.x0, &batch.x1)?;
    metric_loss(cfg.metric, cfg.huber_c, &f, &target)
}

/// Stage-2 loss components. Mask id traces from the two passes expose the
/// shared-dropout contract for inspection; `endpoint_estimate` is the
/// tracked f from the first pass (the adversarial stage's fake sample).
#[derive(Debug)]
pub struct Stage2Loss {
    pub total: Tensor,
    pub sf: Tensor,
    pub vc: Tensor,
    pub endpoint_estimate: Tensor,
    pub masks_theta: Vec<u64>,
    pub masks_theta_minus: Vec<u64>,
}

/// Stage-2 consistency objective:
/// `L_sf = metric(f(t, x_t), f⁻(t+dt, x_{t+dt}))`,
/// `L_vc = metric(v(t, x_t), v⁻(t+dt, x_{t+dt}))`,
/// `total = L_sf + alpha * L_vc`,
/// where the `⁻` passes run without gradient tracking and reuse the first
/// pass's dropout masks.
pub fn loss_stage2(
    net: &dyn VelocityModel,
    batch: &TrajectoryBatch,
    cfg: &CfmLossConfig,
    masks: Option<&MaskSet>,
) -> Result<Stage2Loss> {
    cfg.validate()?;
    batch.validate(cfg.segments)?;
    let x_t = interpolate(&batch.x0, &batch.x1, &batch.t)?;
    let t_next = batch.t.add_scalar(batch.delta_t)?;
    let x_next = interpolate(&batch.x0, &batch.x1, &t_next)?;

    let mut trace_theta = EvalTrace::default();
    let mut trace_minus = EvalTrace::default();
    let v = net.velocity(&batch.t, &x_t, &batch.cond, masks, true, Some(&mut trace_theta))?;
    let v_minus = net.velocity(&t_next, &x_next, &batch.cond, masks, false, Some(&mut trace_minus))?;

    let f = endpoint_map(&batch.t, &x_t, &v, &batch.seg, cfg.segments)?;
    let f_minus = endpoint_map(&t_next, &x_next, &v_minus, &batch.seg, cfg.segments)?;

    let sf = metric_loss(cfg.metric, cfg.huber_c, &f, &f_minus)?;
    let vc = metric_loss(cfg.metric, cfg.huber_c, &v, &v_minus)?;
    let total = sf.add(&vc.mul_scalar(cfg.alpha)?)?;
    Ok(Stage2Loss {
        total,
        sf,
        vc,
        endpoint_estimate: f,
        masks_theta: trace_theta.applied_mask_ids,
        masks_theta_minus: trace_minus.applied_mask_ids,
    })
}

/// Flow-matching regression baseline against the linear-path target
/// `u = x1 - x0`. Plain MSE over all elements (documented convention).
pub fn loss_fm_baseline(net: &dyn VelocityModel, batch: &TrajectoryBatch) -> Result<Tensor> {
    batch.validate(1)?;
    let x_t = interpolate(&batch.x0, &batch.x1, &batch.t)?;
    let v = net.velocity(&batch.t, &x_t, &batch.cond, None, true, None)?;
    let u = batch.x1.sub(&batch.x0)?;
    v.sub(&u)?.square()?.mean()
}

/// Adversarial losses for one (estimated, ground-truth) endpoint pair.
#[derive(Debug)]
pub struct AdversarialLosses {
    /// Least-squares discriminator objective `||D(x̂)||² + ||1 - D(x)||²`.
    /// Differentiates only through the discriminator (x̂ is detached).
    pub disc_loss: Tensor,
    /// Generator-side least-squares term `||1 - D(x̂)||²`, evaluated with a
    /// detached discriminator so gradients flow only through x̂.
    pub gen_loss: Tensor,
    /// Feature matching: summed per-layer L1 gaps between discriminator
    /// features of x̂ and x, also through x̂ only.
    pub fm_loss: Tensor,
}

pub fn loss_adversarial(disc: &Discriminator, x_hat: &Tensor, x_real: &Tensor) -> Result<AdversarialLosses> {
    if x_hat.shape() != x_real.shape() {
        return Err(Error::shape(
            "loss_adversarial",
            format!("x_hat {:?} vs x_real {:?}", x_hat.shape(), x_real.shape()),
        ));
    }
    // Discriminator side: fake endpoint detached.
    let (score_fake_d, _) = disc.eval(&x_hat.detach())?;
    let (score_real_d, _) = disc.eval(&x_real.detach())?;
    let fake_term = score_fake_d.sq_norm_rows()?.mean()?;
    let real_term = score_real_d.neg()?.add_scalar(1.0)?.sq_norm_rows()?.mean()?;
    let disc_loss = fake_term.add(&real_term)?;

    // Generator side: frozen discriminator, gradients through x_hat.
    let frozen = disc.detached();
    let (score_fake_g, feats_fake) = frozen.eval(x_hat)?;
    let (_, feats_real) = frozen.eval(&x_real.detach())?;
    let gen_loss = score_fake_g.neg()?.add_scalar(1.0)?.sq_norm_rows()?.mean()?;

    let mut fm_loss = Tensor::scalar(0.0)?;
    for (ff, fr) in feats_fake.iter().zip(&feats_real) {
        let gap = ff.sub(fr)?.abs()?.sum_rows()?.mean()?;
        fm_loss = fm_loss.add(&gap)?;
    }
    Ok(AdversarialLosses { disc_loss, gen_loss, fm_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{
        Activation, ConditionEmbedder, VectorFieldConfig, VectorFieldNet,
    };
    use crate::tensor::{RngStream, Tape};

    /// Closed-form field v(t, x) = value, ignoring inputs.
    pub(crate) struct ConstantField(pub Vec<f64>);

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
            if self.0.len() != d {
                return Err(Error::shape("constant field", format!("{} vs {d}", self.0.len())));
            }
            let mut data = Vec::with_capacity(b * d);
            for _ in 0..b {
                data.extend_from_slice(&self.0);
            }
            Tensor::new(data, &[b, d])
        }
    }

    fn tb(x0: &[f64], x1: &[f64], t: &[f64], seg: Vec<usize>, dim: usize, delta_t: f64) -> TrajectoryBatch {
        let b = t.len();
        TrajectoryBatch {
            x0: Tensor::new(x0.to_vec(), &[b, dim]).unwrap(),
            x1: Tensor::new(x1.to_vec(), &[b, dim]).unwrap(),
            t: Tensor::new(t.to_vec(), &[b]).unwrap(),
            seg,
            delta_t,
            cond: Tensor::zeros(&[b, 1]),
        }
    }

    fn l2_cfg(segments: usize, delta_t: f64) -> CfmLossConfig {
        CfmLossConfig::new(segments, 1e-5, Metric::SquaredL2, 2, delta_t).unwrap()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = Tensor::new(vec![0.0, 0.0], &[1, 2]).unwrap();
        let x1 = Tensor::new(vec![2.0, 4.0], &[1, 2]).unwrap();
        let at = |tv: f64| {
            interpolate(&x0, &x1, &Tensor::new(vec![tv], &[1]).unwrap()).unwrap()
        };
        assert_eq!(at(0.0).data(), x0.data());
        assert_eq!(at(1.0).data(), x1.data());
        assert_eq!(at(0.25).data(), &[0.5, 1.0]);
    }

    #[test]
    fn interpolate_rejects_out_of_range_time() {
        let x = Tensor::zeros(&[1, 2]);
        let t = Tensor::new(vec![1.5], &[1]).unwrap();
        assert!(matches!(interpolate(&x, &x, &t), Err(Error::Domain(_))));
    }

    #[test]
    fn segment_endpoint_cases() {
        let x0 = Tensor::new(vec![0.0], &[1, 1]).unwrap();
        let x1 = Tensor::new(vec![1.0], &[1, 1]).unwrap();
        assert_eq!(segment_endpoint(&[0], 2, &x0, &x1).unwrap().data(), &[0.5]);
        assert_eq!(segment_endpoint(&[1], 2, &x0, &x1).unwrap().data(), &[1.0]);
        assert_eq!(segment_endpoint(&[0], 1, &x0, &x1).unwrap().data(), &[1.0]);
        assert!(segment_endpoint(&[2], 2, &x0, &x1).is_err());
    }

    #[test]
    fn endpoint_map_cases() {
        let t = Tensor::new(vec![0.5], &[1]).unwrap();
        let x_t = Tensor::new(vec![1.0, 1.0], &[1, 2]).unwrap();
        let v0 = Tensor::zeros(&[1, 2]);
        assert_eq!(endpoint_map(&t, &x_t, &v0, &[0], 1).unwrap().data(), x_t.data());
        let v = Tensor::new(vec![2.0, -2.0], &[1, 2]).unwrap();
        assert_eq!(endpoint_map(&t, &x_t, &v, &[0], 1).unwrap().data(), &[2.0, 0.0]);
        // t at the segment end: zero coefficient.
        let t_end = Tensor::new(vec![0.5], &[1]).unwrap();
        assert_eq!(endpoint_map(&t_end, &x_t, &v, &[0], 2).unwrap().data(), x_t.data());
        // t beyond the segment end is a domain error.
        let t_late = Tensor::new(vec![0.6], &[1]).unwrap();
        assert!(endpoint_map(&t_late, &x_t, &v, &[0], 2).is_err());
    }

    #[test]
    fn endpoint_map_recovers_true_endpoint_algebraically() {
        // With v = (x^i - x_{i/S}) / width, f at t = i/S returns x^i.
        let mut s = RngStream::new(10);
        for segments in [1usize, 2, 3, 5] {
            for i in 0..segments {
                let x0 = Tensor::standard_normal(&mut s, &[4, 2]).unwrap();
                let x1 = Tensor::standard_normal(&mut s, &[4, 2]).unwrap();
                let seg = vec![i; 4];
                let t0 = i as f64 / segments as f64;
                let t = Tensor::full(&[4], t0).unwrap();
                let x_start = interpolate(&x0, &x1, &t).unwrap();
                let target = segment_endpoint(&seg, segments, &x0, &x1).unwrap();
                let width = (i + 1) as f64 / segments as f64 - t0;
                let v = target.sub(&x_start).unwrap().mul_scalar(1.0 / width).unwrap();
                let f = endpoint_map(&t, &x_start, &v, &seg, segments).unwrap();
                for (a, b) in f.data().iter().zip(target.data()) {
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn stage1_zero_net_hand_value() {
        // Zero velocity, S=1, x0=0, x1=2, t=0.5: x_t=1, f=1, x^0=2, loss 1.
        let batch = tb(&[0.0], &[2.0], &[0.5], vec![0], 1, 0.0);
        let cfg = CfmLossConfig::new(1, 1e-5, Metric::SquaredL2, 1, 0.0).unwrap();
        let loss = loss_stage1(&ConstantField(vec![0.0]), &batch, &cfg).unwrap();
        assert!((loss.item().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stage1_exact_field_gives_zero_loss() {
        // v = (x^i - x_t) / ((i+1)/S - t) reproduces the endpoint exactly.
        struct ExactField {
            segments: usize,
            x0: Tensor,
            x1: Tensor,
            seg: Vec<usize>,
        }
        impl VelocityModel for ExactField {
            fn velocity(
                &self,
                t: &Tensor,
                x: &Tensor,
                _cond: &Tensor,
                _masks: Option<&MaskSet>,
                _track: bool,
                _trace: Option<&mut EvalTrace>,
            ) -> Result<Tensor> {
                let target = segment_endpoint(&self.seg, self.segments, &self.x0, &self.x1)?;
                let inv: Vec<f64> = t
                    .data()
                    .iter()
                    .zip(&self.seg)
                    .map(|(&tv, &i)| 1.0 / ((i + 1) as f64 / self.segments as f64 - tv))
                    .collect();
                let inv = Tensor::new(inv, &[t.numel()])?;
                target.sub(x)?.scale_rows(&inv)
            }
        }
        let batch = tb(&[0.1, -0.2, 0.4, 0.9], &[1.0, 2.0, -1.0, 0.5], &[0.1, 0.6], vec![0, 1], 2, 0.0);
        let field = ExactField { segments: 2, x0: batch.x0.clone(), x1: batch.x1.clone(), seg: batch.seg.clone() };
        let loss = loss_stage1(&field, &batch, &l2_cfg(2, 0.0)).unwrap();
        assert!(loss.item().unwrap() < 1e-24, "loss {}", loss.item().unwrap());
    }

    #[test]
    fn stage1_batch_duplication_invariance() {
        let mut s = RngStream::new(11);
        let cfg = VectorFieldConfig {
            hidden_layers: 2,
            hidden_width: 8,
            time_embed_dim: 4,
            cond_embed_dim: 2,
            dropout_rate: 0.0,
            activation: Activation::Gelu,
            data_dim: 2,
        };
        let mut net = VectorFieldNet::init(cfg, &mut s).unwrap();
        // Random head so the loss is nontrivial.
        let mut params = net.named_parameters().into_iter().map(|(_, t)| t).collect::<Vec<_>>();
        let n = params.len();
        params[n - 2] = Tensor::standard_normal(&mut s, &[8, 2]).unwrap();
        net.set_parameters(&params).unwrap();

        let emb = ConditionEmbedder::init(1, 2, &mut s).unwrap();
        let x0 = Tensor::standard_normal(&mut s, &[3, 2]).unwrap();
        let x1 = Tensor::standard_normal(&mut s, &[3, 2]).unwrap();
        let t = Tensor::new(vec![0.2, 0.5, 0.9], &[3]).unwrap();
        let cond = emb.embed(&[0, 0, 0]).unwrap();
        let batch = TrajectoryBatch { x0, x1, t, seg: vec![0, 0, 0], delta_t: 0.0, cond };

        let double = |t: &Tensor| {
            let mut d = t.data().to_vec();
            d.extend_from_slice(t.data());
            let mut shape = t.shape().to_vec();
            shape[0] *= 2;
            Tensor::new(d, &shape).unwrap()
        };
        let batch2 = TrajectoryBatch {
            x0: double(&batch.x0),
            x1: double(&batch.x1),
            t: double(&batch.t),
            seg: vec![0; 6],
            delta_t: 0.0,
            cond: double(&batch.cond),
        };
        let cfg = l2_cfg(1, 0.0);
        let l1 = loss_stage1(&net, &batch, &cfg).unwrap().item().unwrap();
        let l2 = loss_stage1(&net, &batch2, &cfg).unwrap().item().unwrap();
        assert!((l1 - l2).abs() < 1e-12, "{l1} vs {l2}");
    }

    #[test]
    fn stage2_zero_delta_gives_zero_losses() {
        let mut s = RngStream::new(12);
        let cfg = VectorFieldConfig {
            hidden_layers: 2,
            hidden_width: 8,
            time_embed_dim: 4,
            cond_embed_dim: 2,
            dropout_rate: 0.2,
            activation: Activation::Gelu,
            data_dim: 2,
        };
        let net = VectorFieldNet::init(cfg, &mut s).unwrap();
        let x0 = Tensor::standard_normal(&mut s, &[4, 2]).unwrap();
        let x1 = Tensor::standard_normal(&mut s, &[4, 2]).unwrap();
        let t = Tensor::new(vec![0.1, 0.3, 0.6, 0.9], &[4]).unwrap();
        let cond = Tensor::standard_normal(&mut s, &[4, 2]).unwrap();
        let batch = TrajectoryBatch { x0, x1, t, seg: vec![0; 4], delta_t: 0.0, cond };
        let masks = net.sample_masks(&mut s, 4).unwrap();
        let out = loss_stage2(&net, &batch, &l2_cfg(1, 0.0), Some(&masks)).unwrap();
        assert_eq!(out.sf.item().unwrap(), 0.0);
        assert_eq!(out.vc.item().unwrap(), 0.0);
        assert_eq!(out.total.item().unwrap(), 0.0);
        assert_eq!(out.masks_theta, out.masks_theta_minus);
    }

    #[test]
    fn stage2_constant_field_matches_hand_arithmetic() {
        // Constant v: L_vc = 0 always; with x0=0, x1=1 and c=1 the
        // interpolant slope equals c, so L_sf = 0 too.
        let batch = tb(&[0.0, 0.0], &[1.0, 1.0], &[0.2, 0.5], vec![0, 0], 1, 0.25);
        let cfg = CfmLossConfig::new(1, 1e-5, Metric::SquaredL2, 1, 0.25).unwrap();
        let out = loss_stage2(&ConstantField(vec![1.0]), &batch, &cfg, None).unwrap();
        assert!(out.vc.item().unwrap().abs() < 1e-30);
        assert!(out.sf.item().unwrap().abs() < 1e-28, "sf {}", out.sf.item().unwrap());

        // With c = 2 the f-terms differ by delta*(c - slope) = 0.25 per dim.
        let out2 = loss_stage2(&ConstantField(vec![2.0]), &batch, &cfg, None).unwrap();
        assert!(out2.vc.item().unwrap().abs() < 1e-30);
        let expected = 0.25f64 * 0.25; // (delta*(c-1))^2, one feature dim
        assert!((out2.sf.item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn stage2_alpha_zero_equals_sf_alone() {
        let batch = tb(&[0.0, 1.0], &[2.0, -1.0], &[0.1, 0.4], vec![0, 0], 1, 0.1);
        let mut cfg = l2_cfg(1, 0.1);
        cfg.alpha = 0.0;
        let out = loss_stage2(&ConstantField(vec![0.5]), &batch, &cfg, None).unwrap();
        assert_eq!(out.total.item().unwrap(), out.sf.item().unwrap());
    }

    #[test]
    fn fm_baseline_hand_value_and_permutation_invariance() {
        // Zero net, x0 = 0, x1 = (3,4): per-element MSE = (9+16)/2 = 12.5.
        let batch = tb(&[0.0, 0.0], &[3.0, 4.0], &[0.5], vec![0], 2, 0.0);
        let loss = loss_fm_baseline(&ConstantField(vec![0.0, 0.0]), &batch).unwrap();
        assert!((loss.item().unwrap() - 12.5).abs() < 1e-15);

        let fwd = tb(&[0.0, 0.0, 1.0, 1.0], &[3.0, 4.0, 0.0, 2.0], &[0.2, 0.7], vec![0, 0], 2, 0.0);
        let rev = tb(&[1.0, 1.0, 0.0, 0.0], &[0.0, 2.0, 3.0, 4.0], &[0.7, 0.2], vec![0, 0], 2, 0.0);
        let a = loss_fm_baseline(&ConstantField(vec![0.1, -0.3]), &fwd).unwrap().item().unwrap();
        let b = loss_fm_baseline(&ConstantField(vec![0.1, -0.3]), &rev).unwrap().item().unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn pseudo_huber_values() {
        // c for d = 2.
        let c = huber_c_for_dim(2);
        assert!((c - 7.637e-4).abs() < 1e-6);
        // x = y -> 0.
        let x = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        assert_eq!(pseudo_huber(&x, &x, c).unwrap().item().unwrap(), 0.0);
        // ||x - y|| = 1 -> sqrt(1 + c^2) - c.
        let y = Tensor::new(vec![1.0, 3.0], &[1, 2]).unwrap();
        let d = pseudo_huber(&x, &y, c).unwrap().item().unwrap();
        assert!((d - 0.999237).abs() < 1e-6, "distance {d}");
        assert!(pseudo_huber(&x, &y, 0.0).is_err());
    }

    #[test]
    fn adversarial_hand_values() {
        use crate::nets::{Discriminator, DiscriminatorConfig};
        let mut s = RngStream::new(13);
        let disc = Discriminator::init(DiscriminatorConfig::default(), 2, &mut s).unwrap();
        // Zero head: D = 0 everywhere, so disc_loss = 0 + 1 = 1.
        let x_hat = Tensor::standard_normal(&mut s, &[8, 2]).unwrap();
        let x_real = Tensor::standard_normal(&mut s, &[8, 2]).unwrap();
        let out = loss_adversarial(&disc, &x_hat, &x_real).unwrap();
        assert!((out.disc_loss.item().unwrap() - 1.0).abs() < 1e-12);
        // Identical inputs: zero feature-matching loss.
        let same = loss_adversarial(&disc, &x_real, &x_real).unwrap();
        assert_eq!(same.fm_loss.item().unwrap(), 0.0);
    }

    #[test]
    fn adversarial_disc_half_scores_half_loss() {
        use crate::nets::{Discriminator, DiscriminatorConfig};
        let mut s = RngStream::new(14);
        let mut disc = Discriminator::init(DiscriminatorConfig { layers: 2, width: 4, leaky_slope: 0.2 }, 2, &mut s).unwrap();
        // Force head to output 0.5 regardless of input: zero weight, bias 0.5.
        let mut params: Vec<Tensor> = disc.named_parameters().into_iter().map(|(_, t)| t).collect();
        let n = params.len();
        params[n - 1] = Tensor::new(vec![0.5], &[1]).unwrap();
        disc.set_parameters(&params).unwrap();
        let x = Tensor::standard_normal(&mut s, &[8, 2]).unwrap();
        let out = loss_adversarial(&disc, &x, &x).unwrap();
        // ||0.5||^2 + ||1-0.5||^2 = 0.5 per element: the minimum of the
        // least-squares objective when real and fake coincide.
        assert!((out.disc_loss.item().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adversarial_gradients_separate() {
        use crate::nets::{Discriminator, DiscriminatorConfig};
        let mut s = RngStream::new(15);
        let mut disc = Discriminator::init(DiscriminatorConfig { layers: 2, width: 4, leaky_slope: 0.2 }, 2, &mut s).unwrap();
        let mut params: Vec<Tensor> = disc.named_parameters().into_iter().map(|(_, t)| t).collect();
        let n = params.len();
        params[n - 2] = Tensor::standard_normal(&mut s, &[4, 1]).unwrap();
        disc.set_parameters(&params).unwrap();

        // Generator update: x_hat tracked, disc raw.
        let tape = Tape::new();
        let x_hat = tape.watch(&Tensor::standard_normal(&mut s, &[4, 2]).unwrap()).unwrap();
        let x_real = Tensor::standard_normal(&mut s, &[4, 2]).unwrap();
        let out = loss_adversarial(&disc, &x_hat, &x_real).unwrap();
        let gen_total = out.gen_loss.add(&out.fm_loss).unwrap();
        let grads = Tape::backward(&gen_total).unwrap();
        let gx = grads.wrt(&x_hat);
        assert!(gx.data().iter().any(|&g| g != 0.0), "generator path should receive gradient");

        // Discriminator update: disc watched, x_hat plain.
        let tape2 = Tape::new();
        let disc_w = disc.watched(&tape2).unwrap();
        let x_hat2 = Tensor::standard_normal(&mut s, &[4, 2]).unwrap();
        let out2 = loss_adversarial(&disc_w, &x_hat2, &x_real).unwrap();
        let grads2 = Tape::backward(&out2.disc_loss).unwrap();
        let disc_params = disc_w.named_parameters();
        let got_grad = disc_params.iter().any(|(_, p)| grads2.wrt(p).data().iter().any(|&g| g != 0.0));
        assert!(got_grad, "discriminator should receive gradient from disc_loss");
    }
}
