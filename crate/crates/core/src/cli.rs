//! The `mcl` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a run aborts, 2 when the configuration
//! or the command line is invalid.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::clearing::ClearingMode;
use crate::config::{ConfigError, EconomyConfig, RunConfig, ValidationError};
use crate::homotopy::{run_homotopy, HomotopyError, HomotopyRun};
use crate::model::Economy;
use crate::nn::{init_mlp, load_checkpoint, AdamConfig, AdamState, Checkpoint, MlpParams};
use crate::trainer::{
    evaluate, profile_rows, simulate, train, write_evaluation, write_profiles, TrainError, TrainOutputs, TrainState,
};

#[derive(Debug, Parser)]
#[command(name = "mcl", version, about = "Train market-clearing equilibrium networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `simple` or `solver`.
    #[arg(long)]
    pub mode: Option<ClearingMode>,
    /// Single-threaded, with wall-clock columns written as zero.
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from the checkpoint or manifest in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the single-asset model.
    TrainSingle {
        #[command(flatten)]
        common: Common,
        /// Override the number of episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run the multi-asset homotopy schedule.
    Homotopy {
        #[command(flatten)]
        common: Common,
        /// Override the episode budget of every stage.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Residual statistics of a checkpoint on freshly simulated states.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        states: Option<usize>,
        #[arg(long)]
        periods: Option<usize>,
    },
    /// Policy and consumption profiles by age.
    Profiles {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        states: Option<usize>,
        #[arg(long)]
        periods: Option<usize>,
    },
}

/// Failure classes, mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ValidationError> for CliError {
    fn from(e: ValidationError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<HomotopyError> for CliError {
    fn from(e: HomotopyError) -> Self {
        match e {
            HomotopyError::Validation(v) => v.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::TrainSingle { common, episodes } => cmd_train_single(&common, episodes),
        Command::Homotopy { common, episodes } => cmd_homotopy(&common, episodes),
        Command::Evaluate {
            common,
            checkpoint,
            states,
            periods,
        } => cmd_evaluate(&common, checkpoint, states, periods),
        Command::Profiles {
            common,
            checkpoint,
            states,
            periods,
        } => cmd_profiles(&common, checkpoint, states, periods),
    }
}

/// Loads the configuration and applies command-line overrides.
fn resolve(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.mode {
        cfg.mode = m;
    }
    cfg.deterministic |= common.deterministic;
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| ValidationError::new("out", "no output directory given (use --out or set `out`)"))?;
    fs::create_dir_all(&out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn write_resolved_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn fresh_params(cfg: &RunConfig, econ: &dyn Economy) -> Result<MlpParams<f64>, CliError> {
    init_mlp::<f64>(&cfg.network_dims(), econ.heads(), cfg.seed).map_err(|e| CliError::Invalid(e.to_string()))
}

fn load_matching(path: &Path, cfg: &RunConfig) -> Result<Checkpoint<f64>, CliError> {
    let ck = load_checkpoint::<f64>(path).map_err(runtime)?;
    ck.expect_dims(&cfg.network_dims())
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Ok(ck)
}

pub fn cmd_train_single(common: &Common, episodes: Option<usize>) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let econ = cfg
        .single_economy()
        .ok_or_else(|| ValidationError::new("economy.model", "train-single needs model = \"single\""))??;
    let mut run = cfg.train_run();
    if let Some(e) = episodes {
        run.episodes = e;
    }
    let ck_path = out.join("checkpoint.bin");
    let (params, adam_cfg) = if common.resume && ck_path.exists() {
        let ck = load_matching(&ck_path, &cfg)?;
        log::info!("resuming from {}", ck_path.display());
        (ck.params, ck.adam.config)
    } else {
        (fresh_params(&cfg, &econ)?, AdamConfig::with_learning_rate(run.learning_rate))
    };
    let adam = AdamState::new(&params, adam_cfg);
    let states = econ.initial_states(run.trajectories);
    let mut st = TrainState::new(params, adam, states, run.history);
    write_resolved_config(&cfg, &out)?;
    let outputs = TrainOutputs {
        dir: &out,
        deterministic: cfg.deterministic,
        stage: None,
    };
    train(&econ, &mut st, &run, &outputs)?;
    log::info!("wrote {}", outputs.checkpoint_path().display());
    Ok(())
}

pub fn cmd_homotopy(common: &Common, episodes: Option<usize>) -> Result<(), CliError> {
    let (cfg, out) = resolve(common)?;
    let EconomyConfig::Multi(mcfg) = &cfg.economy else {
        return Err(ValidationError::new("economy.model", "homotopy needs model = \"multi\"").into());
    };
    let mut schedule = cfg.schedule();
    if let Some(e) = episodes {
        for s in &mut schedule {
            s.episodes = e;
        }
    }
    let run = cfg.train_run();
    let rule = cfg.rule();
    let settings = cfg.homotopy_settings();
    let hrun = HomotopyRun {
        economy: mcfg,
        schedule: &schedule,
        train: &run,
        mode: cfg.mode,
        solver: cfg.solver,
        rule: &rule,
        policy_activation: cfg.network.policy_head,
        eval_periods: settings.eval_periods,
        percentiles: &cfg.evaluation.percentiles,
        out: &out,
        deterministic: cfg.deterministic,
    };
    let first = hrun.economy_at(&schedule[0])?;
    let params = fresh_params(&cfg, &first)?;
    let adam = AdamState::new(&params, AdamConfig::with_learning_rate(run.learning_rate));
    let fresh = TrainState::new(params, adam, first.initial_states(run.trajectories), run.history);
    write_resolved_config(&cfg, &out)?;
    let (manifest, st) = run_homotopy(&hrun, fresh, common.resume)?;

    let last = manifest.completed.last().expect("schedule is nonempty");
    fs::copy(out.join(&last.checkpoint), out.join("checkpoint.bin")).map_err(runtime)?;
    let econ = hrun.economy_at(&last.stage)?;
    let states = econ.initial_states(cfg.evaluation.states);
    let stats = evaluate(
        &econ,
        &st.params,
        states,
        cfg.evaluation.periods,
        cfg.seed,
        &cfg.evaluation.percentiles,
    )
    .map_err(runtime)?;
    write_evaluation(&out.join("evaluation.csv"), &stats, &cfg.evaluation.percentiles)?;
    log::info!("completed {} stages", manifest.completed.len());
    Ok(())
}

/// Checkpoint, matching economy and simulated states for the read-only
/// commands.
fn simulated(
    common: &Common,
    checkpoint: Option<PathBuf>,
    states: Option<usize>,
    periods: Option<usize>,
) -> Result<(RunConfig, PathBuf, Box<dyn Economy>, MlpParams<f64>, ndarray::Array2<f64>), CliError> {
    let (cfg, out) = resolve(common)?;
    let path = checkpoint.unwrap_or_else(|| out.join("checkpoint.bin"));
    let ck = load_matching(&path, &cfg)?;
    let econ = cfg.economy(ck.stage.as_ref())?;
    let n = states.unwrap_or(cfg.evaluation.states);
    if n == 0 {
        return Err(ValidationError::new("states", "must be at least 1").into());
    }
    let periods = periods.unwrap_or(cfg.evaluation.periods);
    let batch = simulate(econ.as_ref(), &ck.params, econ.initial_states(n), periods, cfg.seed).map_err(runtime)?;
    Ok((cfg, out, econ, ck.params, batch))
}

pub fn cmd_evaluate(
    common: &Common,
    checkpoint: Option<PathBuf>,
    states: Option<usize>,
    periods: Option<usize>,
) -> Result<(), CliError> {
    let (cfg, out, econ, params, batch) = simulated(common, checkpoint, states, periods)?;
    let stats = evaluate(econ.as_ref(), &params, batch, 0, cfg.seed, &cfg.evaluation.percentiles).map_err(runtime)?;
    write_evaluation(&out.join("evaluation.csv"), &stats, &cfg.evaluation.percentiles)?;
    Ok(())
}

pub fn cmd_profiles(
    common: &Common,
    checkpoint: Option<PathBuf>,
    states: Option<usize>,
    periods: Option<usize>,
) -> Result<(), CliError> {
    let (_, out, econ, params, batch) = simulated(common, checkpoint, states, periods)?;
    let rows = profile_rows(econ.as_ref(), &params, &batch).map_err(runtime)?;
    write_profiles(&out.join("profiles.csv"), &rows)?;
    Ok(())
}
