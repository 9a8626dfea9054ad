//! Time/segment sampling and the consistency interval schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// How the consistency interval moves across training bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// Endpoint-inclusive linear spacing: bin 0 is `start`, bin K-1 is `end`.
    LinearStep,
    /// Geometric spacing between the same endpoints.
    ExponentialStep,
    /// Fixed interval (`start` for every epoch); used when scheduling is off.
    Constant,
}

/// Step schedule for the time interval between the two trajectory points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSchedule {
    pub start: f64,
    pub end: f64,
    pub bins: usize,
    pub total_epochs: usize,
    pub mode: ScheduleMode,
}

impl DeltaSchedule {
    pub fn new(start: f64, end: f64, bins: usize, total_epochs: usize, mode: ScheduleMode) -> Result<Self> {
        let s = DeltaSchedule { start, end, bins, total_epochs, mode };
        s.validate()?;
        Ok(s)
    }

    /// Fixed interval for runs without scheduling.
    pub fn constant(value: f64, total_epochs: usize) -> Result<Self> {
        DeltaSchedule::new(value, value, 1, total_epochs, ScheduleMode::Constant)
    }

    pub fn validate(&self) -> Result<()> {
        if self.start <= 0.0 || !self.start.is_finite() {
            return Err(Error::Config(format!("schedule start {} must be positive", self.start)));
        }
        match self.mode {
            ScheduleMode::Constant => Ok(()),
            _ => {
                if self.bins < 2 {
                    return Err(Error::Config(format!("step schedule needs >= 2 bins, got {}", self.bins)));
                }
                if self.end <= 0.0 || self.end >= self.start {
                    return Err(Error::Config(format!(
                        "step schedule needs 0 < end < start, got start {} end {}",
                        self.start, self.end
                    )));
                }
                Ok(())
            }
        }
    }

    fn epochs_per_bin(&self) -> usize {
        (self.total_epochs / self.bins).max(1)
    }

    /// Interval for a given epoch. Epochs beyond an exact bin split stay in
    /// the last bin; the image over a full run has exactly `bins` values.
    pub fn delta_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Domain(format!(
                "epoch {epoch} outside schedule range 0..{}",
                self.total_epochs
            )));
        }
        if matches!(self.mode, ScheduleMode::Constant) {
            return Ok(self.start);
        }
        let k = (epoch / self.epochs_per_bin()).min(self.bins - 1);
        // Endpoint bins return start/end exactly, per the schedule invariant.
        if k == 0 {
            return Ok(self.start);
        }
        if k == self.bins - 1 {
            return Ok(self.end);
        }
        let frac = k as f64 / (self.bins - 1) as f64;
        Ok(match self.mode {
            ScheduleMode::LinearStep => self.start - frac * (self.start - self.end),
            ScheduleMode::ExponentialStep => self.start * (self.end / self.start).powf(frac),
            ScheduleMode::Constant => unreachable!(),
        })
    }

    /// The distinct interval values in epoch order.
    pub fn values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for e in 0..self.total_epochs {
            let v = self.delta_at(e)?;
            if out.last() != Some(&v) {
                out.push(v);
            }
        }
        Ok(out)
    }
}

/// Draws per-sample (time, segment) pairs such that both `t` and `t + delta`
/// stay inside the sampled segment.
#[derive(Debug, Clone)]
pub struct TimeSampler {
    segments: usize,
    delta_t: f64,
}

impl TimeSampler {
    pub fn new(segments: usize, delta_t: f64) -> Result<Self> {
        if segments == 0 {
            return Err(Error::Config("segment count must be >= 1".into()));
        }
        if delta_t < 0.0 {
            return Err(Error::Config(format!("delta_t {delta_t} must be nonnegative")));
        }
        if delta_t >= 1.0 / segments as f64 {
            return Err(Error::Config(format!(
                "delta_t {delta_t} >= segment width {}; segment cannot contain both points",
                1.0 / segments as f64
            )));
        }
        Ok(TimeSampler { segments, delta_t })
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    /// Per-sample segment index uniform over `0..S` and time uniform over
    /// `[i/S, (i+1)/S - delta_t]`.
    pub fn sample(&self, stream: &mut RngStream, batch: usize) -> (Vec<f64>, Vec<usize>) {
        let s = self.segments as f64;
        let mut times = Vec::with_capacity(batch);
        let mut segs = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = stream.next_index(self.segments);
            let lo = i as f64 / s;
            let hi = (i + 1) as f64 / s - self.delta_t;
            times.push(stream.uniform_in(lo, hi));
            segs.push(i);
        }
        (times, segs)
    }
}
