//! Synthetic conditional 2-D target distributions and the paired noise source.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor};

/// Which target density to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    /// Degenerate target: every sample is the configured point. One condition.
    SinglePoint,
    /// Mixture of 8 Gaussians on a circle; condition = component index.
    EightGaussians,
    /// Two interleaved half-moons; condition = moon index.
    TwoMoons,
    /// Uniform over the dark cells of a 4x4 board on [-2,2]^2. One condition.
    Checkerboard,
}

/// A target distribution plus its sampling parameters.
///
/// Parameter defaults are fixed here so runs are reproducible:
/// single point at (1.5, -0.5); eight Gaussians of sigma 0.1 on a circle of
/// radius 2; moons of unit radius with noise sigma 0.05; checkerboard cells
/// of side 1 on [-2,2]^2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub problem: Problem,
    /// Data dimension; 2 for every built-in problem.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_samples_per_epoch")]
    pub samples_per_epoch: usize,
    #[serde(default = "default_point")]
    pub point: [f64; 2],
    #[serde(default = "default_radius")]
    pub gaussian_radius: f64,
    #[serde(default = "default_gaussian_sigma")]
    pub gaussian_sigma: f64,
    #[serde(default = "default_moon_noise")]
    pub moon_noise: f64,
}

fn default_dim() -> usize {
    2
}
fn default_samples_per_epoch() -> usize {
    640
}
fn default_point() -> [f64; 2] {
    [1.5, -0.5]
}
fn default_radius() -> f64 {
    2.0
}
fn default_gaussian_sigma() -> f64 {
    0.1
}
fn default_moon_noise() -> f64 {
    0.05
}

impl ProblemSpec {
    pub fn new(problem: Problem) -> Self {
        ProblemSpec {
            problem,
            dim: default_dim(),
            samples_per_epoch: default_samples_per_epoch(),
            point: default_point(),
            gaussian_radius: default_radius(),
            gaussian_sigma: default_gaussian_sigma(),
            moon_noise: default_moon_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 {
            return Err(Error::Config(format!("built-in problems are 2-D, got dim {}", self.dim)));
        }
        if self.samples_per_epoch == 0 {
            return Err(Error::Config("samples_per_epoch must be positive".into()));
        }
        Ok(())
    }

    /// Size of the finite condition label set.
    pub fn n_conditions(&self) -> usize {
        match self.problem {
            Problem::SinglePoint | Problem::Checkerboard => 1,
            Problem::EightGaussians => 8,
            Problem::TwoMoons => 2,
        }
    }

    /// One draw from the conditional target given a label.
    fn draw_target(&self, stream: &mut RngStream, label: usize) -> [f64; 2] {
        match self.problem {
            Problem::SinglePoint => self.point,
            Problem::EightGaussians => {
                let angle = std::f64::consts::TAU * label as f64 / 8.0;
                let (cx, cy) = (self.gaussian_radius * angle.cos(), self.gaussian_radius * angle.sin());
                [cx + self.gaussian_sigma * stream.next_normal(), cy + self.gaussian_sigma * stream.next_normal()]
            }
            Problem::TwoMoons => {
                let theta = stream.uniform_in(0.0, std::f64::consts::PI);
                let (mut x, mut y) = if label == 0 {
                    (theta.cos(), theta.sin())
                } else {
                    (1.0 - theta.cos(), 0.5 - theta.sin())
                };
                x += self.moon_noise * stream.next_normal();
                y += self.moon_noise * stream.next_normal();
                [x, y]
            }
            Problem::Checkerboard => {
                // Dark cells: unit cells of [-2,2]^2 where floor(x)+floor(y) is even.
                loop {
                    let x = stream.uniform_in(-2.0, 2.0);
                    let y = stream.uniform_in(-2.0, 2.0);
                    if (x.floor() as i64 + y.floor() as i64).rem_euclid(2) == 0 {
                        return [x, y];
                    }
                }
            }
        }
    }

    /// Mixture centers for the eight-Gaussians problem.
    pub fn gaussian_center(&self, label: usize) -> [f64; 2] {
        let angle = std::f64::consts::TAU * label as f64 / 8.0;
        [self.gaussian_radius * angle.cos(), self.gaussian_radius * angle.sin()]
    }

    /// Whether a point lies in the problem's documented support (within `tol`
    /// of it, to absorb the Gaussian/noise tails the generators use).
    pub fn in_support(&self, p: &[f64], tol: f64) -> bool {
        match self.problem {
            Problem::SinglePoint => {
                (p[0] - self.point[0]).abs() <= tol && (p[1] - self.point[1]).abs() <= tol
            }
            Problem::EightGaussians => (0..8).any(|l| {
                let c = self.gaussian_center(l);
                let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                d2.sqrt() <= tol
            }),
            Problem::TwoMoons => {
                let on_moon = |cx: f64, cy: f64, upper: bool| {
                    let (dx, dy) = (p[0] - cx, p[1] - cy);
                    let r = (dx * dx + dy * dy).sqrt();
                    (r - 1.0).abs() <= tol && if upper { dy >= -tol } else { dy <= tol }
                };
                on_moon(0.0, 0.0, true) || on_moon(1.0, 0.5, false)
            }
            Problem::Checkerboard => {
                if !(-2.0..2.0).contains(&p[0]) || !(-2.0..2.0).contains(&p[1]) {
                    return false;
                }
                (p[0].floor() as i64 + p[1].floor() as i64).rem_euclid(2) == 0
            }
        }
    }
}

/// One batch of independently coupled noise/data pairs with condition labels.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub labels: Vec<usize>,
}

/// Draw `batch` pairs: `x0` standard normal, `x1` from the conditional target
/// of a uniformly sampled label. Independent coupling.
pub fn sample_pairs(spec: &ProblemSpec, stream: &mut RngStream, batch: usize) -> Result<PairBatch> {
    spec.validate()?;
    let n_cond = spec.n_conditions();
    let mut labels = Vec::with_capacity(batch);
    let mut x1 = Vec::with_capacity(batch * 2);
    for _ in 0..batch {
        let label = if n_cond == 1 { 0 } else { stream.next_index(n_cond) };
        labels.push(label);
        let p = spec.draw_target(stream, label);
        x1.extend_from_slice(&p);
    }
    let x0 = Tensor::standard_normal(stream, &[batch, 2])?;
    Ok(PairBatch { x0, x1: Tensor::new(x1, &[batch, 2])?, labels })
}

/// Draw `per_condition` target samples for every label, in label order.
/// Used as the ground-truth reference set in evaluation.
pub fn sample_targets_per_condition(
    spec: &ProblemSpec,
    stream: &mut RngStream,
    per_condition: usize,
) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    let n_cond = spec.n_conditions();
    let mut data = Vec::with_capacity(per_condition * n_cond * 2);
    let mut labels = Vec::with_capacity(per_condition * n_cond);
    for label in 0..n_cond {
        for _ in 0..per_condition {
            let p = spec.draw_target(stream, label);
            data.extend_from_slice(&p);
            labels.push(label);
        }
    }
    Ok((Tensor::new(data, &[per_condition * n_cond, 2])?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_collapses_to_m() {
        let spec = ProblemSpec::new(Problem::SinglePoint);
        let mut s = RngStream::new(1);
        let batch = sample_pairs(&spec, &mut s, 64).unwrap();
        for r in 0..64 {
            assert_eq!(batch.x1.row(r), &[1.5, -0.5]);
            assert_eq!(batch.labels[r], 0);
        }
    }

    #[test]
    fn eight_gaussians_component_means() {
        let spec = ProblemSpec::new(Problem::EightGaussians);
        let mut s = RngStream::new(2);
        let batch = sample_pairs(&spec, &mut s, 10_000).unwrap();
        let mut sums = [[0.0f64; 2]; 8];
        let mut counts = [0usize; 8];
        for r in 0..10_000 {
            let l = batch.labels[r];
            sums[l][0] += batch.x1.row(r)[0];
            sums[l][1] += batch.x1.row(r)[1];
            counts[l] += 1;
        }
        for l in 0..8 {
            let c = spec.gaussian_center(l);
            let mx = sums[l][0] / counts[l] as f64;
            let my = sums[l][1] / counts[l] as f64;
            assert!((mx - c[0]).abs() < 0.05 && (my - c[1]).abs() < 0.05, "component {l}");
        }
    }

    #[test]
    fn two_moons_labels_balanced() {
        let spec = ProblemSpec::new(Problem::TwoMoons);
        let mut s = RngStream::new(3);
        let batch = sample_pairs(&spec, &mut s, 100_000).unwrap();
        let f0 = batch.labels.iter().filter(|&&l| l == 0).count() as f64 / 1e5;
        assert!((0.49..=0.51).contains(&f0), "moon-0 fraction {f0}");
    }

    #[test]
    fn checkerboard_support() {
        let spec = ProblemSpec::new(Problem::Checkerboard);
        let mut s = RngStream::new(4);
        let batch = sample_pairs(&spec, &mut s, 5000).unwrap();
        for r in 0..5000 {
            assert!(spec.in_support(batch.x1.row(r), 0.0), "row {r}: {:?}", batch.x1.row(r));
        }
    }

    #[test]
    fn moons_in_support_band() {
        let spec = ProblemSpec::new(Problem::TwoMoons);
        let mut s = RngStream::new(5);
        let batch = sample_pairs(&spec, &mut s, 2000).unwrap();
        for r in 0..2000 {
            assert!(spec.in_support(batch.x1.row(r), 0.3), "row {r}: {:?}", batch.x1.row(r));
        }
    }

    #[test]
    fn pairs_are_deterministic_given_stream_state() {
        let spec = ProblemSpec::new(Problem::TwoMoons);
        let a = sample_pairs(&spec, &mut RngStream::new(6), 32).unwrap();
        let b = sample_pairs(&spec, &mut RngStream::new(6), 32).unwrap();
        assert!(a.x0.bitwise_eq(&b.x0));
        assert!(a.x1.bitwise_eq(&b.x1));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn per_condition_targets_cover_all_labels() {
        let spec = ProblemSpec::new(Problem::EightGaussians);
        let (t, labels) = sample_targets_per_condition(&spec, &mut RngStream::new(7), 10).unwrap();
        assert_eq!(t.shape(), &[80, 2]);
        assert_eq!(labels.len(), 80);
        for l in 0..8 {
            assert_eq!(labels.iter().filter(|&&x| x == l).count(), 10);
        }
    }
}
