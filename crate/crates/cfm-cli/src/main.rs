//! Command-line front door: train, sample, evaluate, sweep, ablate, and run
//! the gradient verification suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfm::config::Config;
use cfm::error::Error as CfmError;
use cfm::eval::{ablation_ladder, nfe_sweep, rows_to_csv, scatter_svg, EvalRow};
use cfm::trainer::{metrics_to_csv, run_full, Checkpoint};

const EXIT_CONFIG: u8 = 2;
const EXIT_SCHEMA: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_NUMERIC: u8 = 5;
const EXIT_CHECKPOINT: u8 = 6;

fn help_footer() -> String {
    format!(
        "EXIT CODES:\n  0  success\n  {EXIT_CONFIG}  config not found or unparseable\n  \
         {EXIT_SCHEMA}  schema violation (unknown key, bad type, invalid value)\n  \
         {EXIT_IO}  output I/O failure\n  {EXIT_NUMERIC}  numeric error (non-finite values, domain violation)\n  \
         {EXIT_CHECKPOINT}  checkpoint error (magic/version/checksum/truncation)\n\n\
         ENVIRONMENT:\n  CFM_OUTPUT_ROOT  default output root (default ./runs)\n\n\
         CONFIG KEYS AND DEFAULTS:\n{}",
        Config::default()
            .to_canonical_toml()
            .unwrap_or_default()
            .lines()
            .map(|l| format!("  {l}"))
            .collect::<Vec<_>>()
            .join("\n")
    )
}

#[derive(Parser)]
#[command(
    name = "cfm",
    version,
    about = "Consistency flow matching on synthetic 2-D densities",
    after_long_help = help_footer()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured staged training plan and write checkpoints.
    Train {
        /// TOML config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default $CFM_OUTPUT_ROOT/train).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dotted-path override, e.g. --set run.learning_rate=1e-3. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Shorthand for --set run.seed=N.
        #[arg(long)]
        seed: Option<u64>,
        /// Also train the plain flow-matching baseline for comparison.
        #[arg(long)]
        with_fm_baseline: bool,
    },
    /// Draw samples from a checkpointed model and write them as CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Euler steps at inference.
        #[arg(long, default_value_t = 2)]
        nfe: usize,
        /// Sampling seed (noise draws).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per condition label.
        #[arg(long, default_value_t = 256)]
        per_condition: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a target-vs-generated scatter overlay.
        #[arg(long)]
        svg: bool,
    },
    /// Evaluate a checkpoint at the configured NFE list.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated evaluation seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over explicit NFE and seed grids.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated NFE values, e.g. 1,2,10.
        #[arg(long)]
        nfe: String,
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the ablation ladder of technique presets.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "0")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run every finite-difference gradient check and print the table.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Random instances per check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

struct CliError {
    code: u8,
    kind: &'static str,
    msg: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, msg: impl Into<String>) -> Self {
        CliError { code, kind, msg: msg.into() }
    }
}

impl From<CfmError> for CliError {
    fn from(e: CfmError) -> Self {
        let (code, kind) = match &e {
            CfmError::Config(_) => (EXIT_SCHEMA, "schema"),
            CfmError::Parse(_) => (EXIT_CONFIG, "config"),
            CfmError::Io(_) => (EXIT_IO, "io"),
            CfmError::Checkpoint(_) => (EXIT_CHECKPOINT, "checkpoint"),
            CfmError::NonFinite(_) | CfmError::Domain(_) => (EXIT_NUMERIC, "numeric"),
            CfmError::Shape { .. } | CfmError::Contract(_) => (EXIT_NUMERIC, "numeric"),
        };
        CliError::new(code, kind, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind, e.msg.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}

fn output_dir(explicit: Option<PathBuf>, sub: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var("CFM_OUTPUT_ROOT").unwrap_or_else(|_| "runs".into());
        Path::new(&root).join(sub)
    })
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::new(EXIT_IO, "io", format!("creating {}: {e}", dir.display())))
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes)
        .map_err(|e| CliError::new(EXIT_IO, "io", format!("writing {}: {e}", path.display())))
}

fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Config, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::new(EXIT_CONFIG, "config", format!("{}: {e}", path.display())))?;
    Config::check_syntax(&text)?;
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("run.seed={s}"));
    }
    Ok(Config::from_toml_with_overrides(&text, &all)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::load(path)?)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse::<T>().map_err(|_| {
            CliError::new(EXIT_SCHEMA, "schema", format!("bad {what} value '{part}'"))
        })?);
    }
    if out.is_empty() {
        return Err(CliError::new(EXIT_SCHEMA, "schema", format!("empty {what} list")));
    }
    Ok(out)
}

fn write_report(dir: &Path, rows: &[EvalRow]) -> Result<(), CliError> {
    write_out(&dir.join("report.csv"), rows_to_csv(rows).as_bytes())?;
    for r in rows {
        println!(
            "model={} nfe={} seed={} energy_distance={:.6} sliced_w2={:.6} straightness={:.6}",
            r.model, r.nfe, r.seed, r.energy_distance, r.sliced_w2, r.straightness
        );
    }
    println!("report: {}", dir.join("report.csv").display());
    Ok(())
}

fn snapshot_config(dir: &Path, config: &Config) -> Result<(), CliError> {
    write_out(&dir.join("resolved_config.toml"), config.to_canonical_toml()?.as_bytes())
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Train { config, out, overrides, seed, with_fm_baseline } => {
            let cfg = load_config(&config, &overrides, seed)?;
            let dir = output_dir(out, "train");
            ensure_dir(&dir)?;
            snapshot_config(&dir, &cfg)?;

            let outcome = run_full(&cfg)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            let mut metrics = outcome.metrics.clone();
            for (stage, ckpt) in &outcome.checkpoints {
                let path = dir.join(format!("{stage}.ckpt"));
                ckpt.save(&path)?;
                println!("checkpoint: {}", path.display());
            }
            outcome.final_checkpoint().save(&dir.join("final.ckpt"))?;
            if with_fm_baseline {
                let fm = cfm::trainer::train_fm_baseline(&cfg)?;
                fm.checkpoint.save(&dir.join("fm-baseline.ckpt"))?;
                metrics.extend(fm.metrics);
                println!("checkpoint: {}", dir.join("fm-baseline.ckpt").display());
            }
            write_out(&dir.join("metrics.csv"), metrics_to_csv(&metrics).as_bytes())?;
            println!("metrics: {}", dir.join("metrics.csv").display());
            Ok(())
        }
        Cmd::Sample { checkpoint, nfe, seed, per_condition, out, svg } => {
            if nfe == 0 {
                return Err(CliError::new(EXIT_SCHEMA, "schema", "nfe must be >= 1"));
            }
            let ckpt = load_checkpoint(&checkpoint)?;
            let dir = output_dir(out, "sample");
            ensure_dir(&dir)?;
            snapshot_config(&dir, &ckpt.config)?;

            let set = cfm::eval::generate_samples(&ckpt, nfe, seed, per_condition)?;
            let mut csv = String::from("condition,x,y\n");
            for (r, label) in set.labels.iter().enumerate() {
                let p = set.points.row(r);
                csv.push_str(&format!("{label},{},{}\n", p[0], p[1]));
            }
            write_out(&dir.join("samples.csv"), csv.as_bytes())?;
            println!("samples: {}", dir.join("samples.csv").display());

            if svg {
                let mut stream = cfm::tensor::RngStream::new(seed).child(90);
                let (target, _) = cfm::data::sample_targets_per_condition(
                    &ckpt.config.data,
                    &mut stream,
                    per_condition,
                )?;
                let image = scatter_svg(&target, &set.points)?;
                write_out(&dir.join("samples.svg"), image.as_bytes())?;
                println!("overlay: {}", dir.join("samples.svg").display());
            }
            Ok(())
        }
        Cmd::Eval { checkpoint, seeds, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let dir = output_dir(out, "eval");
            ensure_dir(&dir)?;
            snapshot_config(&dir, &ckpt.config)?;
            let nfe_list = ckpt.config.eval.nfe.clone();
            let budget = ckpt.config.eval.budget_per_condition;
            let model_id = ckpt.state.stage.clone();
            let rows = nfe_sweep(&ckpt, &model_id, &nfe_list, &seeds, budget)?;
            write_report(&dir, &rows)
        }
        Cmd::Sweep { checkpoint, nfe, seeds, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let nfe_list: Vec<usize> = parse_list(&nfe, "nfe")?;
            if nfe_list.iter().any(|&n| n == 0) {
                return Err(CliError::new(EXIT_SCHEMA, "schema", "nfe must be >= 1"));
            }
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let dir = output_dir(out, "sweep");
            ensure_dir(&dir)?;
            snapshot_config(&dir, &ckpt.config)?;
            let budget = ckpt.config.eval.budget_per_condition;
            let model_id = ckpt.state.stage.clone();
            let rows = nfe_sweep(&ckpt, &model_id, &nfe_list, &seeds, budget)?;
            write_report(&dir, &rows)
        }
        Cmd::Ablate { config, seeds, out, overrides } => {
            let cfg = load_config(&config, &overrides, None)?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let dir = output_dir(out, "ablate");
            ensure_dir(&dir)?;
            snapshot_config(&dir, &cfg)?;
            let rows = ablation_ladder(&cfg, &seeds, cfg.eval.budget_per_condition)?;
            write_report(&dir, &rows)
        }
        Cmd::Gradcheck { seed, instances } => {
            let reports = cfm::gradcheck::run_all(seed, instances)?;
            print!("{}", cfm::gradcheck::format_table(&reports));
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(CliError::new(
                    EXIT_NUMERIC,
                    "numeric",
                    format!("{failed} gradient check(s) failed"),
                ));
            }
            println!("all {} checks passed", reports.len());
            Ok(())
        }
    }
}
