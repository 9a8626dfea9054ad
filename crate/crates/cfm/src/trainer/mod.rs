//! Staged training: straight flow toward ground-truth endpoints, then the
//! full consistency objective with freezing / shared dropout / metric and
//! interval scheduling, then adversarial fine-tuning. Owns optimization,
//! checkpoints, and metric logging. One sequential loop per run; everything
//! is derived from the seed, so a (seed, config) pair fixes the outcome
//! bitwise.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, NamedTensor, RunState, FORMAT_VERSION};

use std::collections::BTreeMap;
use std::time::Instant;

use crate::config::Config;
use crate::data::{sample_pairs, ProblemSpec};
use crate::error::{Error, Result};
use crate::nets::{ConditionEmbedder, Discriminator, VectorFieldNet};
use crate::objectives::{
    huber_c_for_dim, loss_adversarial, loss_fm_baseline, loss_stage1, loss_stage2,
    segment_endpoint, CfmLossConfig, TrajectoryBatch,
};
use crate::schedules::{ScheduleMode, TimeSampler};
use crate::tensor::{RngStream, Tape, Tensor};

// RNG lane tags. Each stage derives its own child streams from the master
// seed, so stages are reproducible independently of one another.
const TAG_INIT: u64 = 1;
const TAG_DATA: u64 = 2;
const TAG_TIMES: u64 = 3;
const TAG_DROPOUT: u64 = 4;
const TAG_STAGE1: u64 = 101;
const TAG_STAGE2: u64 = 102;
const TAG_ADV: u64 = 103;
const TAG_FM: u64 = 104;

/// Networks under training.
#[derive(Debug, Clone)]
pub struct Models {
    pub vf: VectorFieldNet,
    pub emb: ConditionEmbedder,
    pub disc: Option<Discriminator>,
}

impl Models {
    /// Fresh networks from the config's seed.
    pub fn init(config: &Config) -> Result<Self> {
        config.validate()?;
        let master = RngStream::new(config.run.seed);
        let init = master.child(TAG_INIT);
        let vf = VectorFieldNet::init(config.net.clone(), &mut init.child(1))?;
        let emb = ConditionEmbedder::init(
            config.data.n_conditions(),
            config.net.cond_embed_dim,
            &mut init.child(2),
        )?;
        Ok(Models { vf, emb, disc: None })
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (name, t) in self.vf.named_parameters() {
            out.push((format!("vf.{name}"), t.shape().to_vec(), t.data().to_vec()));
        }
        for (name, t) in self.emb.named_parameters() {
            out.push((format!("emb.{name}"), t.shape().to_vec(), t.data().to_vec()));
        }
        if let Some(disc) = &self.disc {
            for (name, t) in disc.named_parameters() {
                out.push((format!("disc.{name}"), t.shape().to_vec(), t.data().to_vec()));
            }
        }
        out
    }

    /// Rebuild networks from a checkpoint's config and tensor table.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = &ckpt.config;
        let mut models = Models::init(config)?;
        let lookup = |prefix: &str, name: &str| -> Result<Tensor> {
            let full = format!("{prefix}.{name}");
            let (_, shape, data) = ckpt
                .tensor(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
            Tensor::new(data.clone(), shape)
        };
        let vf_params = models
            .vf
            .named_parameters()
            .iter()
            .map(|(n, _)| lookup("vf", n))
            .collect::<Result<Vec<_>>>()?;
        models.vf.set_parameters(&vf_params)?;
        let emb_params = models
            .emb
            .named_parameters()
            .iter()
            .map(|(n, _)| lookup("emb", n))
            .collect::<Result<Vec<_>>>()?;
        models.emb.set_parameters(&emb_params)?;
        if ckpt.tensors.iter().any(|(n, _, _)| n.starts_with("disc.")) {
            let mut disc = Discriminator::init(
                config.discriminator.clone(),
                config.net.data_dim,
                &mut RngStream::new(config.run.seed).child(TAG_ADV).child(1),
            )?;
            let disc_params = disc
                .named_parameters()
                .iter()
                .map(|(n, _)| lookup("disc", n))
                .collect::<Result<Vec<_>>>()?;
            disc.set_parameters(&disc_params)?;
            models.disc = Some(disc);
        }
        Ok(models)
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub stage: String,
    pub loss_total: f64,
    pub loss_sf: f64,
    pub loss_vc: f64,
    pub delta_t: f64,
    pub wall_seconds: f64,
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,stage,loss_total,loss_sf,loss_vc,delta_t,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.stage, r.loss_total, r.loss_sf, r.loss_vc, r.delta_t, r.wall_seconds
        ));
    }
    out
}

/// Result of one training stage.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub warnings: Vec<String>,
}

struct StageRng {
    data: RngStream,
    times: RngStream,
    dropout: RngStream,
}

fn stage_rng(seed: u64, stage_tag: u64) -> StageRng {
    let stage = RngStream::new(seed).child(stage_tag);
    StageRng {
        data: stage.child(TAG_DATA),
        times: stage.child(TAG_TIMES),
        dropout: stage.child(TAG_DROPOUT),
    }
}

fn steps_per_epoch(spec: &ProblemSpec, batch: usize) -> usize {
    (spec.samples_per_epoch / batch).max(1)
}

/// Names and current values of the trainable parameters, in stable order.
fn trainable(models: &Models, include_emb: bool) -> (Vec<String>, Vec<Tensor>) {
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (n, t) in models.vf.named_parameters() {
        names.push(format!("vf.{n}"));
        values.push(t);
    }
    if include_emb {
        for (n, t) in models.emb.named_parameters() {
            names.push(format!("emb.{n}"));
            values.push(t);
        }
    }
    (names, values)
}

fn apply_update(models: &mut Models, include_emb: bool, new_params: Vec<Tensor>) -> Result<()> {
    let n_vf = models.vf.named_parameters().len();
    models.vf.set_parameters(&new_params[..n_vf])?;
    if include_emb {
        models.emb.set_parameters(&new_params[n_vf..])?;
    }
    Ok(())
}

fn finish_checkpoint(
    config: &Config,
    models: &Models,
    adam: &Adam,
    trainable_names: &[String],
    stage: &str,
    epochs_this_stage: usize,
    prior_state: Option<&RunState>,
    rng: &StageRng,
) -> Checkpoint {
    let mut tensors = models.to_tensors();
    tensors.extend(adam.state_tensors(trainable_names));
    tensors.push(("adam.step".into(), vec![1], vec![adam.step as f64]));
    let mut history = prior_state.map(|s| s.history.clone()).unwrap_or_default();
    history.push(format!("{stage}:{epochs_this_stage}"));
    let epochs_completed =
        prior_state.map(|s| s.epochs_completed).unwrap_or(0) + epochs_this_stage as u64;
    let mut streams = BTreeMap::new();
    streams.insert("data".to_string(), rng.data.clone());
    streams.insert("times".to_string(), rng.times.clone());
    streams.insert("dropout".to_string(), rng.dropout.clone());
    Checkpoint::new(
        config.clone(),
        RunState { stage: stage.into(), epochs_completed, history, streams },
        tensors,
    )
}

fn step_context(stage: &str, epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => {
            Error::NonFinite(format!("{what} ({stage} epoch {epoch} step {step})"))
        }
        other => other,
    }
}

/// Stage 1: regress the endpoint estimate onto ground-truth segment
/// endpoints. The embedder trains alongside the field.
pub fn train_stage1(config: &Config) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = &config.data;
    let mut models = Models::init(config)?;
    let mut rng = stage_rng(config.run.seed, TAG_STAGE1);
    let (names, _) = trainable(&models, true);
    let sizes: Vec<usize> = trainable(&models, true).1.iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(config.run.learning_rate, &sizes);
    // Stage 1 uses no consistency interval: t ranges over the whole segment.
    let sampler = TimeSampler::new(config.run.segments, 0.0)?;
    let loss_cfg = CfmLossConfig {
        segments: config.run.segments,
        alpha: config.run.alpha,
        metric: config.run.metric,
        huber_c: huber_c_for_dim(config.net.data_dim),
        delta_t: 0.0,
    };
    let steps = steps_per_epoch(spec, config.run.batch_size);
    let mut metrics = Vec::new();

    for epoch in 0..config.run.stage1_epochs {
        let started = Instant::now();
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let pair = sample_pairs(spec, &mut rng.data, config.run.batch_size)?;
            let (times, seg) = sampler.sample(&mut rng.times, config.run.batch_size);

            let tape = Tape::new();
            let vf_w = models.vf.watched(&tape)?;
            let emb_w = models.emb.watched(&tape)?;
            let cond = emb_w.embed(&pair.labels)?;
            let batch = TrajectoryBatch {
                x0: pair.x0,
                x1: pair.x1,
                t: Tensor::new(times, &[config.run.batch_size])?,
                seg,
                delta_t: 0.0,
                cond,
            };
            let loss = loss_stage1(&vf_w, &batch, &loss_cfg)
                .map_err(|e| step_context("stage1", epoch, step, e))?;
            epoch_loss += loss.item()?;

            let grads = Tape::backward(&loss)?;
            let watched: Vec<Tensor> = vf_w
                .named_parameters()
                .into_iter()
                .chain(emb_w.named_parameters())
                .map(|(_, t)| t)
                .collect();
            let grad_list: Vec<Tensor> = watched.iter().map(|p| grads.wrt(p)).collect();
            let (_, current) = trainable(&models, true);
            let new_params = adam.apply(&current, &grad_list, config.run.grad_clip)?;
            apply_update(&mut models, true, new_params)?;
        }
        metrics.push(MetricsRow {
            epoch: epoch as u64,
            stage: "stage1".into(),
            loss_total: epoch_loss / steps as f64,
            loss_sf: epoch_loss / steps as f64,
            loss_vc: 0.0,
            delta_t: 0.0,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let ckpt = finish_checkpoint(
        config,
        &models,
        &adam,
        &names,
        "stage1",
        config.run.stage1_epochs,
        None,
        &rng,
    );
    Ok(TrainOutcome { checkpoint: ckpt, metrics, warnings: Vec::new() })
}

/// Stage 2: the full consistency objective, initialized from stage 1.
/// Applies the configured techniques: embedder freeze, shared dropout,
/// metric choice, and the interval schedule.
pub fn train_stage2(config: &Config, init: &Checkpoint) -> Result<TrainOutcome> {
    config.validate()?;
    check_topology(config, init)?;
    let spec = &config.data;
    let mut models = Models::from_checkpoint(init)?;
    models.emb.frozen = config.run.freeze_embedder;
    let train_emb = !models.emb.frozen;

    let mut rng = stage_rng(config.run.seed, TAG_STAGE2);
    let (names, values) = trainable(&models, train_emb);
    let sizes: Vec<usize> = values.iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(config.run.learning_rate, &sizes);
    let schedule = config.schedule.build(config.run.stage2_epochs.max(1))?;
    let steps = steps_per_epoch(spec, config.run.batch_size);
    let use_dropout = config.net.dropout_rate > 0.0;
    let mut metrics = Vec::new();

    for epoch in 0..config.run.stage2_epochs {
        let started = Instant::now();
        let delta_t = schedule.delta_at(epoch)?;
        let sampler = TimeSampler::new(config.run.segments, delta_t)?;
        let loss_cfg = CfmLossConfig {
            segments: config.run.segments,
            alpha: config.run.alpha,
            metric: config.run.metric,
            huber_c: huber_c_for_dim(config.net.data_dim),
            delta_t,
        };
        let (mut e_total, mut e_sf, mut e_vc) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let pair = sample_pairs(spec, &mut rng.data, config.run.batch_size)?;
            let (times, seg) = sampler.sample(&mut rng.times, config.run.batch_size);

            let tape = Tape::new();
            let vf_w = models.vf.watched(&tape)?;
            let emb_w = if train_emb { Some(models.emb.watched(&tape)?) } else { None };
            let cond = match &emb_w {
                Some(e) => e.embed(&pair.labels)?,
                None => models.emb.embed(&pair.labels)?,
            };
            let masks = if use_dropout {
                Some(vf_w.sample_masks(&mut rng.dropout, config.run.batch_size)?)
            } else {
                None
            };
            let batch = TrajectoryBatch {
                x0: pair.x0,
                x1: pair.x1,
                t: Tensor::new(times, &[config.run.batch_size])?,
                seg,
                delta_t,
                cond,
            };
            let out = loss_stage2(&vf_w, &batch, &loss_cfg, masks.as_ref())
                .map_err(|e| step_context("stage2", epoch, step, e))?;
            debug_assert_eq!(out.masks_theta, out.masks_theta_minus);
            e_total += out.total.item()?;
            e_sf += out.sf.item()?;
            e_vc += out.vc.item()?;

            let grads = Tape::backward(&out.total)?;
            let mut watched: Vec<Tensor> =
                vf_w.named_parameters().into_iter().map(|(_, t)| t).collect();
            if let Some(e) = &emb_w {
                watched.extend(e.named_parameters().into_iter().map(|(_, t)| t));
            }
            let grad_list: Vec<Tensor> = watched.iter().map(|p| grads.wrt(p)).collect();
            let (_, current) = trainable(&models, train_emb);
            let new_params = adam.apply(&current, &grad_list, config.run.grad_clip)?;
            apply_update(&mut models, train_emb, new_params)?;
        }
        metrics.push(MetricsRow {
            epoch: epoch as u64,
            stage: "stage2".into(),
            loss_total: e_total / steps as f64,
            loss_sf: e_sf / steps as f64,
            loss_vc: e_vc / steps as f64,
            delta_t,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let ckpt = finish_checkpoint(
        config,
        &models,
        &adam,
        &names,
        "stage2",
        config.run.stage2_epochs,
        Some(&init.state),
        &rng,
    );
    Ok(TrainOutcome { checkpoint: ckpt, metrics, warnings: Vec::new() })
}

fn check_topology(config: &Config, init: &Checkpoint) -> Result<()> {
    if config.net != init.config.net {
        return Err(Error::Config("net topology differs from the checkpoint's".into()));
    }
    if config.data.problem != init.config.data.problem {
        return Err(Error::Config("problem differs from the checkpoint's".into()));
    }
    Ok(())
}

/// Adversarial fine-tuning after stage 2: alternating 1:1 updates. The
/// generator minimizes `w0*L_cfm + w1*||1-D(x̂)||² + w2*L_fm` on segment
/// endpoints; the discriminator minimizes the least-squares objective.
pub fn train_adversarial(config: &Config, init: &Checkpoint) -> Result<TrainOutcome> {
    config.validate()?;
    check_topology(config, init)?;
    let spec = &config.data;
    let mut models = Models::from_checkpoint(init)?;
    models.emb.frozen = config.run.freeze_embedder;
    let train_emb = !models.emb.frozen;
    if models.disc.is_none() {
        models.disc = Some(Discriminator::init(
            config.discriminator.clone(),
            config.net.data_dim,
            &mut RngStream::new(config.run.seed).child(TAG_ADV).child(1),
        )?);
    }

    let mut rng = stage_rng(config.run.seed, TAG_ADV);
    let (gen_names, gen_values) = trainable(&models, train_emb);
    let gen_sizes: Vec<usize> = gen_values.iter().map(|t| t.numel()).collect();
    let mut adam_gen = Adam::new(config.run.learning_rate, &gen_sizes);
    let disc_sizes: Vec<usize> = models
        .disc
        .as_ref()
        .unwrap()
        .named_parameters()
        .iter()
        .map(|(_, t)| t.numel())
        .collect();
    let mut adam_disc = Adam::new(config.run.learning_rate, &disc_sizes);

    // The consistency part keeps training at the schedule's terminal interval.
    let delta_t = match config.schedule.mode {
        ScheduleMode::Constant => config.schedule.start,
        _ => config.schedule.end,
    };
    let sampler = TimeSampler::new(config.run.segments, delta_t)?;
    let loss_cfg = CfmLossConfig {
        segments: config.run.segments,
        alpha: config.run.alpha,
        metric: config.run.metric,
        huber_c: huber_c_for_dim(config.net.data_dim),
        delta_t,
    };
    let steps = steps_per_epoch(spec, config.run.batch_size);
    let use_dropout = config.net.dropout_rate > 0.0;
    let [w_cfm, w_adv, w_fm] = config.run.loss_weights;
    let mut metrics = Vec::new();
    let mut warnings = Vec::new();
    let mut collapse_streak = 0usize;

    for epoch in 0..config.run.adversarial_epochs {
        let started = Instant::now();
        let (mut e_total, mut e_sf, mut e_vc) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let pair = sample_pairs(spec, &mut rng.data, config.run.batch_size)?;
            let (times, seg) = sampler.sample(&mut rng.times, config.run.batch_size);
            let t = Tensor::new(times, &[config.run.batch_size])?;
            let target = segment_endpoint(&seg, config.run.segments, &pair.x0, &pair.x1)?;

            // Generator update.
            let tape = Tape::new();
            let vf_w = models.vf.watched(&tape)?;
            let emb_w = if train_emb { Some(models.emb.watched(&tape)?) } else { None };
            let cond = match &emb_w {
                Some(e) => e.embed(&pair.labels)?,
                None => models.emb.embed(&pair.labels)?,
            };
            let masks = if use_dropout {
                Some(vf_w.sample_masks(&mut rng.dropout, config.run.batch_size)?)
            } else {
                None
            };
            let batch = TrajectoryBatch {
                x0: pair.x0.clone(),
                x1: pair.x1.clone(),
                t,
                seg,
                delta_t,
                cond,
            };
            let cfm = loss_stage2(&vf_w, &batch, &loss_cfg, masks.as_ref())
                .map_err(|e| step_context("adversarial", epoch, step, e))?;
            let disc = models.disc.as_ref().unwrap();
            let adv = loss_adversarial(disc, &cfm.endpoint_estimate, &target)?;
            let gen_total = cfm
                .total
                .mul_scalar(w_cfm)?
                .add(&adv.gen_loss.mul_scalar(w_adv)?)?
                .add(&adv.fm_loss.mul_scalar(w_fm)?)?;
            e_total += gen_total.item()?;
            e_sf += cfm.sf.item()?;
            e_vc += cfm.vc.item()?;
            let x_hat = cfm.endpoint_estimate.detach();

            let grads = Tape::backward(&gen_total)?;
            let mut watched: Vec<Tensor> =
                vf_w.named_parameters().into_iter().map(|(_, t)| t).collect();
            if let Some(e) = &emb_w {
                watched.extend(e.named_parameters().into_iter().map(|(_, t)| t));
            }
            let grad_list: Vec<Tensor> = watched.iter().map(|p| grads.wrt(p)).collect();
            let (_, current) = trainable(&models, train_emb);
            let new_params = adam_gen.apply(&current, &grad_list, config.run.grad_clip)?;
            apply_update(&mut models, train_emb, new_params)?;

            // Discriminator update on the same endpoints.
            let tape_d = Tape::new();
            let disc_w = models.disc.as_ref().unwrap().watched(&tape_d)?;
            let adv_d = loss_adversarial(&disc_w, &x_hat, &target)?;
            let d_value = adv_d.disc_loss.item()?;
            let grads_d = Tape::backward(&adv_d.disc_loss)?;
            let watched_d: Vec<Tensor> =
                disc_w.named_parameters().into_iter().map(|(_, t)| t).collect();
            let grad_d: Vec<Tensor> = watched_d.iter().map(|p| grads_d.wrt(p)).collect();
            let current_d: Vec<Tensor> = models
                .disc
                .as_ref()
                .unwrap()
                .named_parameters()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            let new_d = adam_disc.apply(&current_d, &grad_d, config.run.grad_clip)?;
            models.disc.as_mut().unwrap().set_parameters(&new_d)?;

            if d_value < 1e-6 {
                collapse_streak += 1;
                if collapse_streak == 100 {
                    warnings.push(format!(
                        "discriminator collapse: loss < 1e-6 for 100 consecutive steps (epoch {epoch} step {step})"
                    ));
                }
            } else {
                collapse_streak = 0;
            }
        }
        metrics.push(MetricsRow {
            epoch: epoch as u64,
            stage: "adversarial".into(),
            loss_total: e_total / steps as f64,
            loss_sf: e_sf / steps as f64,
            loss_vc: e_vc / steps as f64,
            delta_t,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let mut ckpt = finish_checkpoint(
        config,
        &models,
        &adam_gen,
        &gen_names,
        "adversarial",
        config.run.adversarial_epochs,
        Some(&init.state),
        &rng,
    );
    let disc_names: Vec<String> = models
        .disc
        .as_ref()
        .unwrap()
        .named_parameters()
        .iter()
        .map(|(n, _)| format!("disc.{n}"))
        .collect();
    ckpt.tensors.extend(adam_disc.state_tensors(&disc_names));
    Ok(TrainOutcome { checkpoint: ckpt, metrics, warnings })
}

/// Plain flow-matching baseline trained on the same architecture for the
/// combined stage-1 + stage-2 epoch budget.
pub fn train_fm_baseline(config: &Config) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = &config.data;
    let mut models = Models::init(config)?;
    let mut rng = stage_rng(config.run.seed, TAG_FM);
    let (names, values) = trainable(&models, true);
    let sizes: Vec<usize> = values.iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(config.run.learning_rate, &sizes);
    let sampler = TimeSampler::new(1, 0.0)?;
    let epochs = config.run.stage1_epochs + config.run.stage2_epochs;
    let steps = steps_per_epoch(spec, config.run.batch_size);
    let mut metrics = Vec::new();

    for epoch in 0..epochs {
        let started = Instant::now();
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let pair = sample_pairs(spec, &mut rng.data, config.run.batch_size)?;
            let (times, seg) = sampler.sample(&mut rng.times, config.run.batch_size);

            let tape = Tape::new();
            let vf_w = models.vf.watched(&tape)?;
            let emb_w = models.emb.watched(&tape)?;
            let cond = emb_w.embed(&pair.labels)?;
            let batch = TrajectoryBatch {
                x0: pair.x0,
                x1: pair.x1,
                t: Tensor::new(times, &[config.run.batch_size])?,
                seg,
                delta_t: 0.0,
                cond,
            };
            let loss = loss_fm_baseline(&vf_w, &batch)
                .map_err(|e| step_context("fm-baseline", epoch, step, e))?;
            epoch_loss += loss.item()?;

            let grads = Tape::backward(&loss)?;
            let watched: Vec<Tensor> = vf_w
                .named_parameters()
                .into_iter()
                .chain(emb_w.named_parameters())
                .map(|(_, t)| t)
                .collect();
            let grad_list: Vec<Tensor> = watched.iter().map(|p| grads.wrt(p)).collect();
            let (_, current) = trainable(&models, true);
            let new_params = adam.apply(&current, &grad_list, config.run.grad_clip)?;
            apply_update(&mut models, true, new_params)?;
        }
        metrics.push(MetricsRow {
            epoch: epoch as u64,
            stage: "fm-baseline".into(),
            loss_total: epoch_loss / steps as f64,
            loss_sf: 0.0,
            loss_vc: 0.0,
            delta_t: 0.0,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    let ckpt = finish_checkpoint(config, &models, &adam, &names, "fm-baseline", epochs, None, &rng);
    Ok(TrainOutcome { checkpoint: ckpt, metrics, warnings: Vec::new() })
}

/// Output of a chained run: per-stage checkpoints plus the combined log.
#[derive(Debug, Clone)]
pub struct FullRunOutcome {
    /// (stage name, checkpoint) for each executed stage, final stage last.
    pub checkpoints: Vec<(String, Checkpoint)>,
    pub metrics: Vec<MetricsRow>,
    pub warnings: Vec<String>,
}

impl FullRunOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints.last().expect("at least one stage ran").1
    }
}

/// Run the configured staged plan: stage 1, then stage 2 and adversarial
/// fine-tuning when their epoch counts are nonzero.
pub fn run_full(config: &Config) -> Result<FullRunOutcome> {
    let mut out = FullRunOutcome { checkpoints: Vec::new(), metrics: Vec::new(), warnings: Vec::new() };
    let stage1 = train_stage1(config)?;
    out.metrics.extend(stage1.metrics);
    out.warnings.extend(stage1.warnings);
    out.checkpoints.push(("stage1".into(), stage1.checkpoint));

    if config.run.stage2_epochs > 0 {
        let stage2 = train_stage2(config, &out.checkpoints.last().unwrap().1)?;
        out.metrics.extend(stage2.metrics);
        out.warnings.extend(stage2.warnings);
        out.checkpoints.push(("stage2".into(), stage2.checkpoint));
    }
    if config.run.adversarial_epochs > 0 {
        let adv = train_adversarial(config, &out.checkpoints.last().unwrap().1)?;
        out.metrics.extend(adv.metrics);
        out.warnings.extend(adv.warnings);
        out.checkpoints.push(("adversarial".into(), adv.checkpoint));
    }
    Ok(out)
}
