//! Finite-difference verification of every differentiable operation and
//! composite loss. The oracle side uses forward evaluations only (central
//! differences), so it is independent of the reverse-mode path it checks.

use crate::error::{Error, Result};
use crate::nets::{
    Activation, Discriminator, DiscriminatorConfig, VectorFieldConfig, VectorFieldNet,
};
use crate::objectives::{
    huber_c_for_dim, loss_adversarial, loss_fm_baseline, loss_stage1, loss_stage2, CfmLossConfig,
    Metric, TrajectoryBatch,
};
use crate::tensor::{OpKind, RngStream, Tape, Tensor};

/// Central-difference step. 1e-5 balances truncation against roundoff for
/// O(1) values in f64.
pub const FD_STEP: f64 = 1e-5;
/// Required relative agreement between autodiff and finite differences.
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor: differences below FD noise count as agreement.
const REL_FLOOR: f64 = 1e-6;

/// Outcome of one named check over its random instances.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central finite differences of a scalar function at `x0`.
fn central_diff(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x0: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + FD_STEP;
        let hi = f(&x)?;
        x[i] = x0[i] - FD_STEP;
        let lo = f(&x)?;
        x[i] = x0[i];
        out.push((hi - lo) / (2.0 * FD_STEP));
    }
    Ok(out)
}

/// Check one op: scalarize its output against a fixed random cotangent and
/// compare autodiff input gradients with central differences.
fn check_op(
    kind: &OpKind,
    shapes: &[Vec<usize>],
    stream: &mut RngStream,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n).map(|_| stream.uniform_in(lo, hi)).collect()
        })
        .collect();

    // Output shape probe to build the cotangent.
    let probe = {
        let tensors: Vec<Tensor> = inputs
            .iter()
            .zip(shapes)
            .map(|(d, s)| Tensor::new(d.clone(), s))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        kind.forward(&refs)?
    };
    let cot = Tensor::new(
        (0..probe.numel()).map(|_| stream.uniform_in(-1.0, 1.0)).collect(),
        probe.shape(),
    )?;

    // Autodiff gradients through the scalarized output.
    let tape = Tape::new();
    let tensors: Vec<Tensor> = inputs
        .iter()
        .zip(shapes)
        .map(|(d, s)| tape.watch(&Tensor::new(d.clone(), s)?))
        .collect::<Result<_>>()?;
    let loss = {
        let refs: Vec<&Tensor> = tensors.iter().collect();
        kind.forward(&refs)?.mul(&cot)?.sum()?
    };
    let grads = Tape::backward(&loss)?;

    let mut worst = 0.0f64;
    for (arg, _shape) in shapes.iter().enumerate() {
        let ad = grads.wrt(&tensors[arg]);
        let mut f = |x: &[f64]| -> Result<f64> {
            let mut flat = inputs.clone();
            flat[arg] = x.to_vec();
            let tensors: Vec<Tensor> = flat
                .iter()
                .zip(shapes)
                .map(|(d, s)| Tensor::new(d.clone(), s))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = tensors.iter().collect();
            Ok(kind.forward(&refs)?.mul(&cot)?.sum()?.item()?)
        };
        let fd = central_diff(&mut f, &inputs[arg])?;
        for (a, b) in ad.data().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    Ok(worst)
}

fn small_net(stream: &mut RngStream) -> Result<VectorFieldNet> {
    let cfg = VectorFieldConfig {
        data_dim: 2,
        hidden_layers: 2,
        hidden_width: 8,
        time_embed_dim: 4,
        cond_embed_dim: 3,
        activation: Activation::Gelu,
        dropout_rate: 0.0,
        };
    let mut net = VectorFieldNet::init(cfg, stream)?;
    // Random head so every parameter carries signal.
    let mut params: Vec<Tensor> = net.named_parameters().into_iter().map(|(_, t)| t).collect();
    let n = params.len();
    params[n - 2] = Tensor::standard_normal(stream, params[n - 2].shape())?.mul_scalar(0.5)?;
    params[n - 1] = Tensor::standard_normal(stream, params[n - 1].shape())?.mul_scalar(0.1)?;
    net.set_parameters(&params)?;
    Ok(net)
}

fn random_batch(stream: &mut RngStream, segments: usize, delta_t: f64, cond_dim: usize) -> Result<TrajectoryBatch> {
    let b = 4;
    let x0 = Tensor::standard_normal(stream, &[b, 2])?;
    let x1 = Tensor::standard_normal(stream, &[b, 2])?;
    let mut t = Vec::with_capacity(b);
    let mut seg = Vec::with_capacity(b);
    for _ in 0..b {
        let i = stream.next_index(segments);
        let lo = i as f64 / segments as f64;
        let hi = (i + 1) as f64 / segments as f64 - delta_t;
        t.push(stream.uniform_in(lo, hi));
        seg.push(i);
    }
    Ok(TrajectoryBatch {
        x0,
        x1,
        t: Tensor::new(t, &[b])?,
        seg,
        delta_t,
        cond: Tensor::standard_normal(stream, &[b, cond_dim])?,
    })
}

/// Gradient check of a net-parameterized scalar loss.
///
/// `ad_loss` builds the loss under test from a watched net (autodiff path);
/// `fd_loss` evaluates the mathematical objective the gradient is *of* at
/// given parameters. They coincide for ordinary losses; for stop-gradient
/// objectives `fd_loss` must hold the θ⁻ branch at the base parameters,
/// since the stop-gradient derivative is the partial, not the total.
fn check_net_loss(
    net: &VectorFieldNet,
    ad_loss: &dyn Fn(&VectorFieldNet) -> Result<Tensor>,
    fd_loss: &dyn Fn(&VectorFieldNet) -> Result<f64>,
) -> Result<f64> {
    let tape = Tape::new();
    let net_w = net.watched(&tape)?;
    let loss = ad_loss(&net_w)?;
    let grads = Tape::backward(&loss)?;
    let watched: Vec<(String, Tensor)> = net_w.named_parameters();

    let base_params: Vec<Tensor> = net.named_parameters().into_iter().map(|(_, t)| t).collect();
    let mut worst = 0.0f64;
    for (idx, (_, wp)) in watched.iter().enumerate() {
        let ad = grads.wrt(wp);
        let base = base_params[idx].data().to_vec();
        let mut f = |x: &[f64]| -> Result<f64> {
            let mut params = base_params.clone();
            params[idx] = Tensor::new(x.to_vec(), base_params[idx].shape())?;
            let mut perturbed = net.clone();
            perturbed.set_parameters(&params)?;
            fd_loss(&perturbed)
        };
        let fd = central_diff(&mut f, &base)?;
        for (a, b) in ad.data().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    Ok(worst)
}

/// Per-sample metric then batch mean, restated for the oracle side.
fn metric_value(metric: Metric, c: f64, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let sq = a.sub(b)?.sq_norm_rows()?;
    match metric {
        Metric::SquaredL2 => sq.mean(),
        Metric::PseudoHuber => sq.add_scalar(c * c)?.sqrt()?.add_scalar(-c)?.mean(),
    }
}

/// The stop-gradient branch of the stage-2 objective, frozen at the net's
/// current parameters.
fn frozen_stage2_targets(
    net: &VectorFieldNet,
    batch: &TrajectoryBatch,
    cfg: &CfmLossConfig,
) -> Result<(Tensor, Tensor)> {
    let t2 = batch.t.add_scalar(batch.delta_t)?;
    let x2 = crate::objectives::interpolate(&batch.x0, &batch.x1, &t2)?;
    let v_minus = net.velocity(&t2, &x2, &batch.cond, None, false, None)?;
    let f_minus = crate::objectives::endpoint_map(&t2, &x2, &v_minus, &batch.seg, cfg.segments)?;
    Ok((f_minus, v_minus))
}

/// Stage-2 objective with an explicit frozen target pair: what the
/// stop-gradient loss is a partial derivative of.
fn stage2_partial(
    net: &VectorFieldNet,
    batch: &TrajectoryBatch,
    cfg: &CfmLossConfig,
    f_minus: &Tensor,
    v_minus: &Tensor,
) -> Result<Tensor> {
    let x_t = crate::objectives::interpolate(&batch.x0, &batch.x1, &batch.t)?;
    let v = net.velocity(&batch.t, &x_t, &batch.cond, None, true, None)?;
    let f = crate::objectives::endpoint_map(&batch.t, &x_t, &v, &batch.seg, cfg.segments)?;
    let sf = metric_value(cfg.metric, cfg.huber_c, &f, f_minus)?;
    let vc = metric_value(cfg.metric, cfg.huber_c, &v, v_minus)?;
    sf.add(&vc.mul_scalar(cfg.alpha)?)
}

fn op_checks() -> Vec<(&'static str, OpKind, Vec<Vec<usize>>, f64, f64)> {
    vec![
        ("op.add", OpKind::Add, vec![vec![2, 3], vec![2, 3]], -2.0, 2.0),
        ("op.subtract", OpKind::Sub, vec![vec![2, 3], vec![2, 3]], -2.0, 2.0),
        ("op.multiply", OpKind::Mul, vec![vec![2, 3], vec![2, 3]], -2.0, 2.0),
        ("op.matmul", OpKind::Matmul, vec![vec![3, 4], vec![4, 2]], -2.0, 2.0),
        ("op.affine", OpKind::Affine, vec![vec![3, 4], vec![4, 2], vec![2]], -2.0, 2.0),
        ("op.tanh", OpKind::Tanh, vec![vec![2, 4]], -2.0, 2.0),
        ("op.gelu", OpKind::Gelu, vec![vec![2, 4]], -2.0, 2.0),
        ("op.leaky_relu", OpKind::LeakyRelu(0.2), vec![vec![2, 4]], -2.0, 2.0),
        ("op.square", OpKind::Square, vec![vec![2, 4]], -2.0, 2.0),
        ("op.sqrt", OpKind::Sqrt, vec![vec![2, 4]], 0.5, 4.0),
        ("op.abs", OpKind::Abs, vec![vec![2, 4]], 0.3, 2.0),
        ("op.sum", OpKind::Sum, vec![vec![2, 4]], -2.0, 2.0),
        ("op.mean", OpKind::Mean, vec![vec![2, 4]], -2.0, 2.0),
        ("op.sum_rows", OpKind::SumRows, vec![vec![3, 4]], -2.0, 2.0),
        ("op.scale_rows", OpKind::ScaleRows, vec![vec![3, 4], vec![3]], -2.0, 2.0),
        ("op.add_scalar", OpKind::AddScalar(0.75), vec![vec![2, 4]], -2.0, 2.0),
        ("op.scalar_scale", OpKind::ScalarScale(-1.5), vec![vec![2, 4]], -2.0, 2.0),
        ("op.concatenate", OpKind::ConcatCols, vec![vec![2, 3], vec![2, 2]], -2.0, 2.0),
        ("op.embed", OpKind::Embed(vec![1, 0, 1, 2]), vec![vec![3, 4]], -2.0, 2.0),
        ("op.l2_norm_squared", OpKind::SqNormRows, vec![vec![3, 4]], -2.0, 2.0),
    ]
}

/// Run every finite-difference check, `instances` random instances each.
pub fn run_all(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let root = RngStream::new(seed);

    for (i, (name, kind, shapes, lo, hi)) in op_checks().into_iter().enumerate() {
        let mut stream = root.child(300 + i as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(check_op(&kind, &shapes, &mut stream, lo, hi)?);
        }
        reports.push(CheckReport {
            name: name.to_string(),
            instances,
            max_rel_err: worst,
            passed: worst < TOLERANCE,
        });
    }

    // Composite losses over network parameters.
    let composites: Vec<(&str, Box<dyn Fn(&mut RngStream) -> Result<f64>>)> = vec![
        (
            "loss.stage1.squared_l2",
            Box::new(|s: &mut RngStream| check_stage1(s, Metric::SquaredL2)),
        ),
        (
            "loss.stage1.pseudo_huber",
            Box::new(|s: &mut RngStream| check_stage1(s, Metric::PseudoHuber)),
        ),
        (
            "loss.stage2.squared_l2",
            Box::new(|s: &mut RngStream| check_stage2(s, Metric::SquaredL2)),
        ),
        (
            "loss.stage2.pseudo_huber",
            Box::new(|s: &mut RngStream| check_stage2(s, Metric::PseudoHuber)),
        ),
        (
            "loss.fm_baseline",
            Box::new(|s: &mut RngStream| {
                let net = small_net(s)?;
                let batch = random_batch(s, 1, 0.0, 3)?;
                let b2 = batch.clone();
                check_net_loss(
                    &net,
                    &move |n| loss_fm_baseline(n, &batch),
                    &move |n| loss_fm_baseline(n, &b2)?.item(),
                )
            }),
        ),
        (
            "loss.adversarial.generator",
            Box::new(|s: &mut RngStream| check_adversarial_generator(s)),
        ),
        (
            "loss.adversarial.discriminator",
            Box::new(|s: &mut RngStream| check_adversarial_discriminator(s)),
        ),
        (
            "velocity.grad_wrt_x",
            Box::new(|s: &mut RngStream| check_velocity_input_grad(s)),
        ),
    ];

    for (i, (name, check)) in composites.into_iter().enumerate() {
        let mut stream = root.child(400 + i as u64);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(check(&mut stream)?);
        }
        reports.push(CheckReport {
            name: name.to_string(),
            instances,
            max_rel_err: worst,
            passed: worst < TOLERANCE,
        });
    }
    Ok(reports)
}

fn small_disc(stream: &mut RngStream) -> Result<Discriminator> {
    let mut disc = Discriminator::init(
        DiscriminatorConfig { layers: 2, width: 6, leaky_slope: 0.2 },
        2,
        stream,
    )?;
    let mut params: Vec<Tensor> = disc.named_parameters().into_iter().map(|(_, t)| t).collect();
    let n = params.len();
    params[n - 2] = Tensor::standard_normal(stream, params[n - 2].shape())?.mul_scalar(0.5)?;
    disc.set_parameters(&params)?;
    Ok(disc)
}

fn check_stage1(stream: &mut RngStream, metric: Metric) -> Result<f64> {
    let net = small_net(stream)?;
    let batch = random_batch(stream, 2, 0.0, 3)?;
    let cfg = CfmLossConfig {
        segments: 2,
        alpha: 1e-5,
        metric,
        huber_c: huber_c_for_dim(2),
        delta_t: 0.0,
    };
    let (b2, c2) = (batch.clone(), cfg.clone());
    check_net_loss(
        &net,
        &move |n| loss_stage1(n, &batch, &cfg),
        &move |n| loss_stage1(n, &b2, &c2)?.item(),
    )
}

/// Stage-2 stop-gradient objective: the autodiff side is the implementation
/// under test; the FD side perturbs only the θ branch, holding the θ⁻
/// targets at the base parameters.
fn check_stage2(stream: &mut RngStream, metric: Metric) -> Result<f64> {
    let net = small_net(stream)?;
    let batch = random_batch(stream, 2, 0.05, 3)?;
    let cfg = CfmLossConfig {
        segments: 2,
        alpha: 1e-5,
        metric,
        huber_c: huber_c_for_dim(2),
        delta_t: 0.05,
    };
    let (f_minus, v_minus) = frozen_stage2_targets(&net, &batch, &cfg)?;

    // The partial objective and the implementation agree in value at base.
    let implemented = loss_stage2(&net, &batch, &cfg, None)?.total.item()?;
    let restated = stage2_partial(&net, &batch, &cfg, &f_minus, &v_minus)?.item()?;
    if rel_err(implemented, restated) > 1e-10 {
        return Err(Error::Contract(format!(
            "stage-2 oracle restatement drifted: {implemented} vs {restated}"
        )));
    }

    let (b2, c2) = (batch.clone(), cfg.clone());
    check_net_loss(
        &net,
        &move |n| Ok(loss_stage2(n, &batch, &cfg, None)?.total),
        &move |n| stage2_partial(n, &b2, &c2, &f_minus, &v_minus)?.item(),
    )
}

/// Generator objective 3*L_cfm + 1*gen + 2*fm, differentiated through the
/// vector-field parameters with the θ⁻ branch and discriminator frozen.
fn check_adversarial_generator(stream: &mut RngStream) -> Result<f64> {
    let net = small_net(stream)?;
    let disc = small_disc(stream)?;
    let batch = random_batch(stream, 2, 0.05, 3)?;
    let cfg = CfmLossConfig {
        segments: 2,
        alpha: 1e-5,
        metric: Metric::SquaredL2,
        huber_c: huber_c_for_dim(2),
        delta_t: 0.05,
    };
    let target =
        crate::objectives::segment_endpoint(&batch.seg, cfg.segments, &batch.x0, &batch.x1)?;
    let (f_minus, v_minus) = frozen_stage2_targets(&net, &batch, &cfg)?;

    let (b2, c2, d2, t2) = (batch.clone(), cfg.clone(), disc.clone(), target.clone());
    check_net_loss(
        &net,
        &move |n| {
            let cfm = loss_stage2(n, &batch, &cfg, None)?;
            let adv = loss_adversarial(&disc, &cfm.endpoint_estimate, &target)?;
            cfm.total
                .mul_scalar(3.0)?
                .add(&adv.gen_loss.mul_scalar(1.0)?)?
                .add(&adv.fm_loss.mul_scalar(2.0)?)
        },
        &move |n| {
            let cfm = stage2_partial(n, &b2, &c2, &f_minus, &v_minus)?;
            let x_t = crate::objectives::interpolate(&b2.x0, &b2.x1, &b2.t)?;
            let v = n.velocity(&b2.t, &x_t, &b2.cond, None, false, None)?;
            let x_hat = crate::objectives::endpoint_map(&b2.t, &x_t, &v, &b2.seg, c2.segments)?;
            let adv = loss_adversarial(&d2, &x_hat, &t2)?;
            cfm.mul_scalar(3.0)?
                .add(&adv.gen_loss.mul_scalar(1.0)?)?
                .add(&adv.fm_loss.mul_scalar(2.0)?)?
                .item()
        },
    )
}

/// Discriminator objective differentiated through discriminator weights.
fn check_adversarial_discriminator(stream: &mut RngStream) -> Result<f64> {
    let disc = small_disc(stream)?;
    let x_hat = Tensor::standard_normal(stream, &[4, 2])?;
    let x_real = Tensor::standard_normal(stream, &[4, 2])?;

    let tape = Tape::new();
    let disc_w = disc.watched(&tape)?;
    let loss = loss_adversarial(&disc_w, &x_hat, &x_real)?.disc_loss;
    let grads = Tape::backward(&loss)?;
    let watched = disc_w.named_parameters();

    let base_params: Vec<Tensor> = disc.named_parameters().into_iter().map(|(_, t)| t).collect();
    let mut worst = 0.0f64;
    for (idx, (_, wp)) in watched.iter().enumerate() {
        let ad = grads.wrt(wp);
        let base = base_params[idx].data().to_vec();
        let mut f = |x: &[f64]| -> Result<f64> {
            let mut params = base_params.clone();
            params[idx] = Tensor::new(x.to_vec(), base_params[idx].shape())?;
            let mut perturbed = disc.clone();
            perturbed.set_parameters(&params)?;
            loss_adversarial(&perturbed, &x_hat, &x_real)?.disc_loss.item()
        };
        let fd = central_diff(&mut f, &base)?;
        for (a, b) in ad.data().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    Ok(worst)
}

/// d||v||^2/dx at a random point, against finite differences in x.
fn check_velocity_input_grad(stream: &mut RngStream) -> Result<f64> {
    let net = small_net(stream)?;
    let b = 3;
    let x0: Vec<f64> = (0..b * 2).map(|_| stream.uniform_in(-2.0, 2.0)).collect();
    let t = Tensor::new((0..b).map(|_| stream.uniform_in(0.0, 1.0)).collect(), &[b])?;
    let cond = Tensor::standard_normal(stream, &[b, 3])?;

    let tape = Tape::new();
    let x = tape.watch(&Tensor::new(x0.clone(), &[b, 2])?)?;
    let loss = net.velocity(&t, &x, &cond, None, true, None)?.sq_norm()?;
    let grads = Tape::backward(&loss)?;
    let ad = grads.wrt(&x);

    let mut f = |xv: &[f64]| -> Result<f64> {
        let x = Tensor::new(xv.to_vec(), &[b, 2])?;
        net.velocity(&t, &x, &cond, None, false, None)?.sq_norm()?.item()
    };
    let fd = central_diff(&mut f, &x0)?;
    let mut worst = 0.0f64;
    for (a, b) in ad.data().iter().zip(&fd) {
        worst = worst.max(rel_err(*a, *b));
    }
    Ok(worst)
}

/// Render reports as an aligned text table with a PASS/FAIL verdict per row.
pub fn format_table(reports: &[CheckReport]) -> String {
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
    let mut out = format!("{:<width$}  {:>9}  {:>12}  result\n", "check", "instances", "max_rel_err");
    for r in reports {
        out.push_str(&format!(
            "{:<width$}  {:>9}  {:>12.3e}  {}\n",
            r.name,
            r.instances,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_at_tolerance() {
        let reports = run_all(7, 3).unwrap();
        assert!(reports.len() >= 20, "expected a full registry, got {}", reports.len());
        for r in &reports {
            assert!(r.passed, "{} failed with max rel err {:.3e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn broken_gradient_would_be_caught() {
        // The checker must not be vacuous: finite differences of square()
        // against a deliberately wrong analytic gradient disagree.
        let mut f = |x: &[f64]| -> Result<f64> {
            Ok(x.iter().map(|v| v * v).sum())
        };
        let x0 = vec![0.7, -1.3];
        let fd = central_diff(&mut f, &x0).unwrap();
        let wrong = [0.7, -1.3]; // x, not 2x
        assert!(rel_err(fd[0], wrong[0]) > TOLERANCE);
        assert!(rel_err(fd[1], wrong[1]) > TOLERANCE);
    }
}
