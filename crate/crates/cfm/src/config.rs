//! Run configuration: flat, typed key-value sections mirroring the module
//! layout. Unknown keys are rejected, overrides are type-checked against the
//! schema, and the canonical serialization is what checkpoints and run
//! snapshots embed.

use serde::{Deserialize, Serialize};

use crate::data::{Problem, ProblemSpec};
use crate::error::{Error, Result};
use crate::nets::{DiscriminatorConfig, VectorFieldConfig};
use crate::objectives::Metric;
use crate::schedules::{DeltaSchedule, ScheduleMode};

/// Staged training plan plus optimization knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_stage1")]
    pub stage1_epochs: usize,
    #[serde(default = "d_stage2")]
    pub stage2_epochs: usize,
    #[serde(default = "d_adv")]
    pub adversarial_epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_segments")]
    pub segments: usize,
    #[serde(default = "d_metric")]
    pub metric: Metric,
    /// Generator mix for the adversarial stage: consistency, adversarial,
    /// feature-matching.
    #[serde(default = "d_weights")]
    pub loss_weights: [f64; 3],
    #[serde(default = "d_freeze")]
    pub freeze_embedder: bool,
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
}

fn d_stage1() -> usize {
    50
}
fn d_stage2() -> usize {
    50
}
fn d_adv() -> usize {
    10
}
fn d_lr() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    16
}
fn d_alpha() -> f64 {
    1e-5
}
fn d_segments() -> usize {
    2
}
fn d_metric() -> Metric {
    Metric::SquaredL2
}
fn d_weights() -> [f64; 3] {
    [3.0, 1.0, 2.0]
}
fn d_freeze() -> bool {
    true
}
fn d_clip() -> f64 {
    1.0
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            stage1_epochs: d_stage1(),
            stage2_epochs: d_stage2(),
            adversarial_epochs: d_adv(),
            learning_rate: d_lr(),
            batch_size: d_batch(),
            alpha: d_alpha(),
            segments: d_segments(),
            metric: d_metric(),
            loss_weights: d_weights(),
            freeze_embedder: d_freeze(),
            grad_clip: d_clip(),
        }
    }
}

/// Consistency-interval schedule parameters for stage 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "d_mode")]
    pub mode: ScheduleMode,
    #[serde(default = "d_start")]
    pub start: f64,
    #[serde(default = "d_end")]
    pub end: f64,
    #[serde(default = "d_bins")]
    pub bins: usize,
}

fn d_mode() -> ScheduleMode {
    ScheduleMode::Constant
}
fn d_start() -> f64 {
    0.001
}
fn d_end() -> f64 {
    0.001
}
fn d_bins() -> usize {
    8
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { mode: d_mode(), start: d_start(), end: d_end(), bins: d_bins() }
    }
}

impl ScheduleConfig {
    /// The paper-shaped step schedule: 0.1 to 0.001 over 8 bins.
    pub fn stepped(mode: ScheduleMode) -> Self {
        ScheduleConfig { mode, start: 0.1, end: 0.001, bins: 8 }
    }

    pub fn build(&self, total_epochs: usize) -> Result<DeltaSchedule> {
        DeltaSchedule::new(self.start, self.end, self.bins, total_epochs, self.mode)
    }
}

/// Evaluation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "d_budget")]
    pub budget_per_condition: usize,
    #[serde(default = "d_proj")]
    pub swd_projections: usize,
    #[serde(default = "d_swd_seed")]
    pub swd_seed: u64,
    #[serde(default = "d_nfe")]
    pub nfe: Vec<usize>,
}

fn d_budget() -> usize {
    2048
}
fn d_proj() -> usize {
    64
}
fn d_swd_seed() -> u64 {
    1234
}
fn d_nfe() -> Vec<usize> {
    vec![2]
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            budget_per_condition: d_budget(),
            swd_projections: d_proj(),
            swd_seed: d_swd_seed(),
            nfe: d_nfe(),
        }
    }
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec::new(Problem::TwoMoons)
    }
}

/// The whole run configuration, one section per subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub net: VectorFieldConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub data: ProblemSpec,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Config {
    /// TOML syntax check only; schema violations surface later.
    pub fn check_syntax(text: &str) -> Result<()> {
        toml::from_str::<toml::Table>(text)
            .map(|_| ())
            .map_err(|e| Error::Parse(format!("config syntax: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config with dotted-path overrides (`run.seed=7`) applied on
    /// top. Overrides go through the same schema checking as file keys.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: Config =
            Config::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization; embedded in checkpoints and run snapshots.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning_rate {} must be positive", r.learning_rate)));
        }
        if r.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if r.segments == 0 {
            return Err(Error::Config("segments must be >= 1".into()));
        }
        if r.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be nonnegative", r.alpha)));
        }
        if r.loss_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("loss_weights must be nonnegative".into()));
        }
        if r.grad_clip <= 0.0 {
            return Err(Error::Config(format!("grad_clip {} must be positive", r.grad_clip)));
        }
        if !(0.0..1.0).contains(&self.net.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.net.dropout_rate
            )));
        }
        if self.net.data_dim != self.data.dim {
            return Err(Error::Config(format!(
                "net data_dim {} != data dim {}",
                self.net.data_dim, self.data.dim
            )));
        }
        self.data.validate()?;
        self.schedule.build(self.run.stage2_epochs.max(1))?;
        // The schedule's largest interval must fit inside one segment.
        let widest = self.schedule.start.max(self.schedule.end);
        if self.run.stage2_epochs > 0 && widest >= 1.0 / self.run.segments as f64 {
            return Err(Error::Config(format!(
                "delta_t {widest} does not fit in a segment of width {}",
                1.0 / self.run.segments as f64
            )));
        }
        if self.eval.nfe.iter().any(|&n| n == 0) {
            return Err(Error::Config("eval nfe values must be >= 1".into()));
        }
        Ok(())
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Try the TOML grammar first so numbers, booleans and arrays work;
    // anything unparseable is a bare string.
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(t) => t["v"].clone(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override path '{path}' is malformed")));
    }
    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path '{path}' crosses a non-table key")))?;
    }
    current.insert(segments.last().unwrap().to_string(), parse_override_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        let text = cfg.to_canonical_toml().unwrap();
        let back = Config::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn default_values_match_documented_ones() {
        let cfg = Config::default();
        assert_eq!(cfg.run.learning_rate, 1e-4);
        assert_eq!(cfg.run.batch_size, 16);
        assert_eq!(cfg.run.alpha, 1e-5);
        assert_eq!(cfg.run.segments, 2);
        assert_eq!(cfg.run.loss_weights, [3.0, 1.0, 2.0]);
        assert_eq!(cfg.net.dropout_rate, 0.05);
        assert_eq!(cfg.net.hidden_width, 128);
        assert_eq!(cfg.schedule.bins, 8);
        assert!(cfg.run.freeze_embedder);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml("[run]\nbogus_key = 3\n").is_err());
        assert!(Config::from_toml("[nonexistent_section]\nx = 1\n").is_err());
    }

    #[test]
    fn overrides_apply_and_typecheck() {
        let cfg = Config::from_toml_with_overrides(
            "",
            &["run.seed=9".into(), "run.learning_rate=0.001".into(), "data.problem=\"single-point\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.run.learning_rate, 1e-3);
        assert_eq!(cfg.data.problem, Problem::SinglePoint);

        // Wrong type and unknown key both rejected.
        assert!(Config::from_toml_with_overrides("", &["run.seed=notanumber".into()]).is_err());
        assert!(Config::from_toml_with_overrides("", &["run.nope=1".into()]).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(Config::from_toml("[run]\nbatch_size = 0\n").is_err());
        assert!(Config::from_toml("[run]\nlearning_rate = -1.0\n").is_err());
        assert!(Config::from_toml("[net]\ndropout_rate = 1.0\n").is_err());
        // delta too wide for the segment count
        assert!(Config::from_toml("[run]\nsegments = 2\n\n[schedule]\nmode = \"constant\"\nstart = 0.6\nend = 0.6\n").is_err());
    }
}
