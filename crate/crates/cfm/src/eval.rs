//! Quantitative evaluation: sample-quality distances, NFE sweeps,
//! straightness reporting, and the ablation ladder of training presets.

use std::time::Instant;

use crate::config::{Config, ScheduleConfig};
use crate::data::sample_targets_per_condition;
use crate::error::{Error, Result};
use crate::objectives::Metric;
use crate::sampler::{euler_sample, straightness};
use crate::schedules::ScheduleMode;
use crate::tensor::{RngStream, Tensor};
use crate::trainer::{run_full, Checkpoint, Models};

const TAG_EVAL_REF: u64 = 201;
const TAG_EVAL_NOISE: u64 = 202;

fn row_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Energy distance between two sample sets via unbiased U-statistics:
/// `2 E||A-B|| - E||A-A'|| - E||B-B'||`.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (n, da) = a.rows_cols("energy_distance")?;
    let (m, db) = b.rows_cols("energy_distance")?;
    if da != db {
        return Err(Error::shape("energy_distance", format!("dims {da} vs {db}")));
    }
    if n < 2 || m < 2 {
        return Err(Error::Contract("energy_distance needs >= 2 samples per set".into()));
    }
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += row_norm(a.row(i), b.row(j));
        }
    }
    cross /= (n * m) as f64;

    let within = |t: &Tensor, k: usize| {
        let mut acc = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                acc += row_norm(t.row(i), t.row(j));
            }
        }
        // All-pairs normalization (diagonal is zero), matching the cross
        // term, so identical multisets give exactly zero.
        2.0 * acc / (k * k) as f64
    };
    Ok(2.0 * cross - within(a, n) - within(b, m))
}

/// Sliced 2-Wasserstein estimate over random unit projections drawn from the
/// given seed. Requires equally sized sets (matched sample budgets).
pub fn sliced_w2(a: &Tensor, b: &Tensor, projections: usize, seed: u64) -> Result<f64> {
    let (n, da) = a.rows_cols("sliced_w2")?;
    let (m, db) = b.rows_cols("sliced_w2")?;
    if da != db {
        return Err(Error::shape("sliced_w2", format!("dims {da} vs {db}")));
    }
    if n != m {
        return Err(Error::Contract(format!(
            "sliced_w2 needs equal sample counts, got {n} vs {m}"
        )));
    }
    if projections == 0 {
        return Err(Error::Config("sliced_w2 needs >= 1 projection".into()));
    }
    let mut stream = RngStream::new(seed);
    let mut total = 0.0;
    let mut pa = vec![0.0; n];
    let mut pb = vec![0.0; n];
    for _ in 0..projections {
        // Random unit direction.
        let mut dir: Vec<f64> = (0..da).map(|_| stream.next_normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dir.iter_mut().for_each(|v| *v /= norm);

        for i in 0..n {
            pa[i] = a.row(i).iter().zip(&dir).map(|(x, d)| x * d).sum();
            pb[i] = b.row(i).iter().zip(&dir).map(|(x, d)| x * d).sum();
        }
        pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
        pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let w2sq: f64 =
            pa.iter().zip(&pb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        total += w2sq;
    }
    Ok((total / projections as f64).sqrt())
}

/// One evaluated (model, nfe, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub nfe: usize,
    pub seed: u64,
    pub energy_distance: f64,
    pub sliced_w2: f64,
    /// NaN when nfe < 2 (undefined for a single step).
    pub straightness: f64,
    pub samples: usize,
    pub wall_seconds: f64,
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out =
        String::from("model,nfe,seed,energy_distance,sliced_w2,straightness,samples,wall_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.model, r.nfe, r.seed, r.energy_distance, r.sliced_w2, r.straightness, r.samples,
            r.wall_seconds
        ));
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty report".into()))?;
    if header != "model,nfe,seed,energy_distance,sliced_w2,straightness,samples,wall_seconds" {
        return Err(Error::Parse(format!("unexpected report header: {header}")));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Parse(format!("line {}: expected 8 fields, got {}", ln + 2, f.len())));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", ln + 2)));
        let parse_u = |s: &str| s.parse::<u64>().map_err(|e| Error::Parse(format!("line {}: {e}", ln + 2)));
        rows.push(EvalRow {
            model: f[0].to_string(),
            nfe: parse_u(f[1])? as usize,
            seed: parse_u(f[2])?,
            energy_distance: parse_f(f[3])?,
            sliced_w2: parse_f(f[4])?,
            straightness: parse_f(f[5])?,
            samples: parse_u(f[6])? as usize,
            wall_seconds: parse_f(f[7])?,
        });
    }
    Ok(rows)
}

/// Generated samples with their condition labels and the sampling trajectory.
pub struct GeneratedSet {
    pub points: Tensor,
    pub labels: Vec<usize>,
    pub straightness: f64,
}

/// Draw `per_condition` samples per condition label from a checkpointed
/// model at the given NFE.
pub fn generate_samples(
    ckpt: &Checkpoint,
    nfe: usize,
    seed: u64,
    per_condition: usize,
) -> Result<GeneratedSet> {
    let models = Models::from_checkpoint(ckpt)?;
    let spec = &ckpt.config.data;
    let n_cond = spec.n_conditions();
    let mut noise = RngStream::new(seed).child(TAG_EVAL_NOISE);

    let total = per_condition * n_cond;
    let mut labels = Vec::with_capacity(total);
    for label in 0..n_cond {
        labels.extend(std::iter::repeat(label).take(per_condition));
    }
    let x0 = Tensor::standard_normal(&mut noise, &[total, spec.dim])?;
    let cond = models.emb.embed(&labels)?.detach();
    let (points, record) = euler_sample(&models.vf, &x0, &cond, nfe)?;
    let bend = if nfe >= 2 { straightness(&record)? } else { f64::NAN };
    Ok(GeneratedSet { points, labels, straightness: bend })
}

/// Evaluate one checkpoint at one (nfe, seed) against fresh target samples.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    model_id: &str,
    nfe: usize,
    seed: u64,
    per_condition: usize,
) -> Result<EvalRow> {
    let started = Instant::now();
    let spec = &ckpt.config.data;
    let generated = generate_samples(ckpt, nfe, seed, per_condition)?;
    let mut ref_stream = RngStream::new(seed).child(TAG_EVAL_REF);
    let (target, _) = sample_targets_per_condition(spec, &mut ref_stream, per_condition)?;
    let energy = energy_distance(&generated.points, &target)?;
    let swd = sliced_w2(
        &generated.points,
        &target,
        ckpt.config.eval.swd_projections,
        ckpt.config.eval.swd_seed,
    )?;
    Ok(EvalRow {
        model: model_id.to_string(),
        nfe,
        seed,
        energy_distance: energy,
        sliced_w2: swd,
        straightness: generated.straightness,
        samples: generated.points.shape()[0],
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Evaluate a checkpoint over an NFE list and seed list; one row per cell,
/// in (nfe, seed) order.
pub fn nfe_sweep(
    ckpt: &Checkpoint,
    model_id: &str,
    nfe_list: &[usize],
    seeds: &[u64],
    per_condition: usize,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(nfe_list.len() * seeds.len());
    for &nfe in nfe_list {
        for &seed in seeds {
            rows.push(evaluate_checkpoint(ckpt, model_id, nfe, seed, per_condition)?);
        }
    }
    Ok(rows)
}

/// The ablation ladder presets. Each builds on the previous technique set;
/// F has the linear/exponential schedule variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Stage 1 only (straight flow).
    A,
    /// A + stage-2 consistency training.
    B,
    /// B + embedder freeze.
    C,
    /// C + shared dropout (the base model).
    D,
    /// D + pseudo-Huber metric.
    E,
    /// D + linear-step interval schedule.
    FLinear,
    /// D + exponential-step interval schedule (the schedule-shape variant).
    FExp,
    /// D + adversarial fine-tuning.
    G,
    /// Everything: D + Huber + linear schedule + adversarial.
    H,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::A => "A",
            Preset::B => "B",
            Preset::C => "C",
            Preset::D => "D",
            Preset::E => "E",
            Preset::FLinear => "F-linear",
            Preset::FExp => "F-exp",
            Preset::G => "G",
            Preset::H => "H",
        }
    }

    /// The full ladder, in report order.
    pub fn ladder() -> Vec<Preset> {
        vec![
            Preset::A,
            Preset::B,
            Preset::C,
            Preset::D,
            Preset::E,
            Preset::FLinear,
            Preset::FExp,
            Preset::G,
            Preset::H,
        ]
    }

    /// Build this preset's config from a base config. The base supplies
    /// sizing (epochs, batch, net, data); the preset decides which
    /// techniques are on.
    pub fn apply(&self, base: &Config) -> Config {
        let mut cfg = base.clone();
        let dropout = if base.net.dropout_rate > 0.0 { base.net.dropout_rate } else { 0.05 };
        // Baseline: consistency stage on, all techniques off.
        cfg.run.adversarial_epochs = 0;
        cfg.run.freeze_embedder = false;
        cfg.run.metric = Metric::SquaredL2;
        cfg.net.dropout_rate = 0.0;
        cfg.schedule = ScheduleConfig::default();
        match self {
            Preset::A => {
                cfg.run.stage2_epochs = 0;
            }
            Preset::B => {}
            Preset::C => {
                cfg.run.freeze_embedder = true;
            }
            Preset::D => {
                cfg.run.freeze_embedder = true;
                cfg.net.dropout_rate = dropout;
            }
            Preset::E => {
                cfg.run.freeze_embedder = true;
                cfg.net.dropout_rate = dropout;
                cfg.run.metric = Metric::PseudoHuber;
            }
            Preset::FLinear => {
                cfg.run.freeze_embedder = true;
                cfg.net.dropout_rate = dropout;
                cfg.schedule = ScheduleConfig::stepped(ScheduleMode::LinearStep);
            }
            Preset::FExp => {
                cfg.run.freeze_embedder = true;
                cfg.net.dropout_rate = dropout;
                cfg.schedule = ScheduleConfig::stepped(ScheduleMode::ExponentialStep);
            }
            Preset::G => {
                cfg.run.freeze_embedder = true;
                cfg.net.dropout_rate = dropout;
                cfg.run.adversarial_epochs = base.run.adversarial_epochs;
            }
            Preset::H => {
                cfg.run.freeze_embedder = true;
                cfg.net.dropout_rate = dropout;
                cfg.run.metric = Metric::PseudoHuber;
                cfg.schedule = ScheduleConfig::stepped(ScheduleMode::LinearStep);
                cfg.run.adversarial_epochs = base.run.adversarial_epochs;
            }
        }
        cfg
    }
}

/// Train one preset at one seed and evaluate it at NFE = 2.
pub fn run_preset(base: &Config, preset: Preset, seed: u64, per_condition: usize) -> Result<EvalRow> {
    let mut cfg = preset.apply(base);
    cfg.run.seed = seed;
    let outcome = run_full(&cfg)?;
    evaluate_checkpoint(outcome.final_checkpoint(), preset.name(), 2, seed, per_condition)
}

/// Train and evaluate the whole ladder over the given seeds. Runs are
/// independent, so they execute on a small thread pool; rows come back in
/// (preset, seed) order regardless of completion order.
pub fn ablation_ladder(base: &Config, seeds: &[u64], per_condition: usize) -> Result<Vec<EvalRow>> {
    let jobs: Vec<(Preset, u64)> = Preset::ladder()
        .into_iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    run_jobs_in_parallel(&jobs, |(preset, seed)| run_preset(base, *preset, *seed, per_condition))
}

/// Execute independent jobs on worker threads, preserving input order.
pub(crate) fn run_jobs_in_parallel<J: Sync, T: Send>(
    jobs: &[J],
    work: impl Fn(&J) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..jobs.len()).map(|_| None).collect();
    let slot_refs: Vec<std::sync::Mutex<&mut Option<Result<T>>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let out = work(&jobs[i]);
                **slot_refs[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every job ran")).collect()
}

/// Scatter overlay of target (gray) and generated (colored) points.
pub fn scatter_svg(target: &Tensor, generated: &Tensor) -> Result<String> {
    let (_, dt) = target.rows_cols("scatter_svg")?;
    let (_, dg) = generated.rows_cols("scatter_svg")?;
    if dt != 2 || dg != 2 {
        return Err(Error::shape("scatter_svg", "scatter plots need 2-D points".to_string()));
    }
    let all: Vec<&[f64]> = (0..target.shape()[0])
        .map(|r| target.row(r))
        .chain((0..generated.shape()[0]).map(|r| generated.row(r)))
        .collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &all {
        lo = lo.min(p[0]).min(p[1]);
        hi = hi.max(p[0]).max(p[1]);
    }
    let span = (hi - lo).max(1e-9);
    let size = 560.0;
    let pad = 20.0;
    let map = |v: f64| pad + (v - lo) / span * (size - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for r in 0..target.shape()[0] {
        let p = target.row(r);
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"#b0b0b0\" fill-opacity=\"0.6\"/>\n",
            map(p[0]),
            size - map(p[1])
        ));
    }
    for r in 0..generated.shape()[0] {
        let p = generated.row(r);
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"#c0392b\" fill-opacity=\"0.6\"/>\n",
            map(p[0]),
            size - map(p[1])
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_distance_identical_sets_is_zero() {
        let mut s = RngStream::new(1);
        let a = Tensor::standard_normal(&mut s, &[200, 2]).unwrap();
        let d = energy_distance(&a, &a).unwrap();
        assert!(d.abs() <= 1e-12, "distance {d}");
    }

    #[test]
    fn energy_distance_is_symmetric() {
        let mut s = RngStream::new(2);
        let a = Tensor::standard_normal(&mut s, &[128, 2]).unwrap();
        let b = Tensor::standard_normal(&mut s, &[96, 2]).unwrap().add_scalar(1.0).unwrap();
        let ab = energy_distance(&a, &b).unwrap();
        let ba = energy_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn energy_distance_matches_offset_gaussian_oracle() {
        // Two unit Gaussians offset by (10, 0): ED ~ 2*10 - 2*E||Z - Z'||,
        // with E||Z-Z'|| estimated by Monte Carlo.
        let mut s = RngStream::new(3);
        let n = 10_000;
        let a = Tensor::standard_normal(&mut s, &[n, 2]).unwrap();
        let shift = {
            let b = Tensor::standard_normal(&mut s, &[n, 2]).unwrap();
            let mut data = b.data().to_vec();
            for r in 0..n {
                data[r * 2] += 10.0;
            }
            Tensor::new(data, &[n, 2]).unwrap()
        };
        // Monte-Carlo oracle for E||Z - Z'|| from an independent stream.
        let mut mc = RngStream::new(99);
        let m = 200_000;
        let mut acc = 0.0;
        for _ in 0..m {
            let dx = mc.next_normal() - mc.next_normal();
            let dy = mc.next_normal() - mc.next_normal();
            acc += (dx * dx + dy * dy).sqrt();
        }
        let e_zz = acc / m as f64;
        let oracle = 2.0 * 10.0 - 2.0 * e_zz;
        let measured = energy_distance(&a, &shift).unwrap();
        let rel = (measured - oracle).abs() / oracle;
        assert!(rel < 0.05, "measured {measured}, oracle {oracle}");
    }

    #[test]
    fn sliced_w2_zero_for_identical_and_positive_for_shifted() {
        let mut s = RngStream::new(4);
        let a = Tensor::standard_normal(&mut s, &[256, 2]).unwrap();
        assert!(sliced_w2(&a, &a, 64, 7).unwrap() < 1e-12);
        let b = a.add_scalar(3.0).unwrap();
        let d = sliced_w2(&a, &b, 64, 7).unwrap();
        // Shifting by (3,3) moves every projection mean by dir·(3,3);
        // averaged over directions the W2 stays within the shift norm.
        assert!(d > 1.0 && d < 3.0 * (2.0f64).sqrt() + 1e-9, "swd {d}");
        // Deterministic given the seed.
        assert_eq!(d.to_bits(), sliced_w2(&a, &b, 64, 7).unwrap().to_bits());
    }

    #[test]
    fn report_csv_round_trips() {
        let rows = vec![
            EvalRow {
                model: "D".into(),
                nfe: 2,
                seed: 7,
                energy_distance: 0.123456789,
                sliced_w2: 0.04,
                straightness: f64::NAN,
                samples: 4096,
                wall_seconds: 1.25,
            },
            EvalRow {
                model: "H".into(),
                nfe: 10,
                seed: 8,
                energy_distance: 0.0625,
                sliced_w2: 0.01,
                straightness: 0.5,
                samples: 4096,
                wall_seconds: 2.5,
            },
        ];
        let text = rows_to_csv(&rows);
        let back = rows_from_csv(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].model, "D");
        assert_eq!(back[0].energy_distance, rows[0].energy_distance);
        assert!(back[0].straightness.is_nan());
        assert_eq!(back[1], rows[1]);
    }

    #[test]
    fn preset_ladder_has_nine_rows_with_expected_flags() {
        let base = Config::default();
        let ladder = Preset::ladder();
        assert_eq!(ladder.len(), 9);
        let a = Preset::A.apply(&base);
        assert_eq!(a.run.stage2_epochs, 0);
        assert_eq!(a.run.adversarial_epochs, 0);
        let b = Preset::B.apply(&base);
        assert!(!b.run.freeze_embedder);
        assert_eq!(b.net.dropout_rate, 0.0);
        let d = Preset::D.apply(&base);
        assert!(d.run.freeze_embedder);
        assert!(d.net.dropout_rate > 0.0);
        assert_eq!(d.run.metric, Metric::SquaredL2);
        let h = Preset::H.apply(&base);
        assert_eq!(h.run.metric, Metric::PseudoHuber);
        assert_eq!(h.schedule.mode, ScheduleMode::LinearStep);
        assert_eq!(h.schedule.start, 0.1);
        assert!(h.run.adversarial_epochs > 0);
        let f = Preset::FExp.apply(&base);
        assert_eq!(f.schedule.mode, ScheduleMode::ExponentialStep);
    }

    #[test]
    fn parallel_jobs_preserve_order() {
        let jobs: Vec<u64> = (0..17).collect();
        let out = run_jobs_in_parallel(&jobs, |&j| Ok(j * 2)).unwrap();
        assert_eq!(out, (0..17).map(|j| j * 2).collect::<Vec<_>>());
    }

    #[test]
    fn svg_contains_both_point_sets() {
        let a = Tensor::new(vec![0.0, 0.0, 1.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::new(vec![0.5, 0.5], &[1, 2]).unwrap();
        let svg = scatter_svg(&a, &b).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }
}
