//! Simulate-then-fit training loop, held-out evaluation and policy profiles.
//!
//! An episode moves every trajectory one period forward under the current
//! network, resets Adam, then runs `epochs` shuffled minibatch passes over
//! the fresh states. All randomness comes from ChaCha8 streams keyed by
//! `(seed, purpose, period, trajectory)`, so runs are reproducible bit for
//! bit regardless of batch layout.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor};
use crate::clearing::ClearingMode;
use crate::config::ValidationError;
use crate::homotopy::HomotopyStage;
use crate::household::percentile_sorted;
use crate::model::{Economy, EconomyError};
use crate::nn::{save_checkpoint, zero_nans, AdamState, CheckpointError, MlpParams, NnError};

pub const METRICS_HEADER: [&str; 4] = ["episode", "mean_loss", "max_loss", "wall_ms"];
pub const PROFILE_HEADER: [&str; 6] = ["variable", "type", "age", "mean", "p10", "p90"];
pub const DEFAULT_PERCENTILES: [f64; 3] = [10.0, 90.0, 99.0];

/// Rows per forward pass when evaluating large batches.
const EVAL_CHUNK: usize = 512;

const STREAM_TRAIN: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_EVAL: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Economy(#[from] EconomyError),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss in episode {episode} (minibatch of {} states, dumped to {dump:?})", rows.len())]
    NonFiniteLoss {
        episode: usize,
        rows: Vec<usize>,
        dump: Option<PathBuf>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> TrainError + '_ {
    move |source| TrainError::Csv {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub episodes: usize,
    pub trajectories: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    /// Filled from the run configuration.
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub mode: ClearingMode,
    /// Episode losses kept for progress logging.
    #[serde(default = "default_history")]
    pub history: usize,
}

fn default_history() -> usize {
    64
}

impl TrainRun {
    /// Single-asset settings: 3584 episodes of 8192 trajectories, 10 epochs
    /// of minibatch 128, learning rate 1e-5.
    pub fn single_asset() -> Self {
        Self {
            episodes: 3584,
            trajectories: 8192,
            epochs: 10,
            minibatch: 128,
            learning_rate: 1e-5,
            seed: 0,
            mode: ClearingMode::Simple,
            history: default_history(),
        }
    }

    /// Per-stage settings inside the homotopy.
    pub fn homotopy_stage() -> Self {
        Self {
            episodes: 256,
            learning_rate: 1e-6,
            ..Self::single_asset()
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.trajectories / self.minibatch
    }

    pub fn gradient_steps_per_episode(&self) -> usize {
        self.batches_per_epoch() * self.epochs
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        for (name, v) in [
            ("training.trajectories", self.trajectories),
            ("training.epochs", self.epochs),
            ("training.minibatch", self.minibatch),
        ] {
            if v == 0 {
                return Err(ValidationError::new(name, "must be at least 1"));
            }
        }
        if self.minibatch > self.trajectories {
            return Err(ValidationError::new("training.minibatch", "exceeds the number of trajectories"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ValidationError::new("training.learning_rate", "must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Fixed-capacity record of recent episode losses.
#[derive(Debug, Clone, Default)]
pub struct LossHistory {
    cap: usize,
    buf: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            buf: VecDeque::with_capacity(cap.max(1)),
        }
    }

    pub fn push(&mut self, x: f64) {
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(x);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.buf.iter()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.buf.is_empty()).then(|| self.buf.iter().sum::<f64>() / self.buf.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeMetrics {
    /// 1-based; counted across runs by `run_episode`, within the run by `train`.
    pub episode: usize,
    pub mean_loss: f64,
    pub max_loss: f64,
    pub wall_ms: u64,
    pub steps: usize,
}

/// Everything that carries over between episodes and homotopy stages.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: MlpParams<f64>,
    pub adam: AdamState<f64>,
    pub states: Tensor<f64>,
    /// Episodes run so far; keys the shock streams.
    pub episode: usize,
    pub history: LossHistory,
}

impl TrainState {
    pub fn new(params: MlpParams<f64>, adam: AdamState<f64>, states: Tensor<f64>, history: usize) -> Self {
        Self {
            params,
            adam,
            states,
            episode: 0,
            history: LossHistory::new(history),
        }
    }
}

fn stream(seed: u64, purpose: u64, period: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_exact_mut(8).zip([seed, purpose, period, index]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// `z' = exp(ρ ln z + σ ε)` with one independent draw per trajectory.
pub fn draw_next_shocks(states: &Tensor<f64>, rho: f64, sigma: f64, seed: u64, purpose: u64, period: u64) -> Vec<f64> {
    (0..states.nrows())
        .map(|r| {
            let eps: f64 = stream(seed, purpose, period, r as u64).sample(StandardNormal);
            (rho * states[[r, 0]].ln() + sigma * eps).exp()
        })
        .collect()
}

fn advance_chunked(
    econ: &dyn Economy,
    params: &MlpParams<f64>,
    states: &Tensor<f64>,
    z_next: &[f64],
) -> Result<Tensor<f64>, EconomyError> {
    let n = states.nrows();
    if n <= EVAL_CHUNK {
        return econ.advance(params, states, z_next);
    }
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let block = states.slice(ndarray::s![start..end, ..]).to_owned();
        parts.push(econ.advance(params, &block, &z_next[start..end])?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("chunks share a width"))
}

/// One simulation step followed by `epochs` passes of minibatch Adam.
pub fn run_episode(econ: &dyn Economy, st: &mut TrainState, run: &TrainRun) -> Result<EpisodeMetrics, TrainError> {
    let started = Instant::now();
    let episode = st.episode;
    let (rho, sigma) = econ.shock_process();
    let z_next = draw_next_shocks(&st.states, rho, sigma, run.seed, STREAM_TRAIN, episode as u64);
    st.states = advance_chunked(econ, &st.params, &st.states, &z_next)?;
    st.episode += 1;
    st.adam.config.learning_rate = run.learning_rate;
    st.adam.reset();

    let n = st.states.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(run.seed, STREAM_SHUFFLE, episode as u64, 0);
    let (mut sum, mut max, mut steps) = (0.0, 0.0f64, 0usize);
    for _ in 0..run.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks_exact(run.minibatch) {
            let batch = st.states.select(ndarray::Axis(0), rows);
            let mut tape = Tape::new();
            let vars = st.params.bind(&mut tape);
            let lv = econ.loss(&mut tape, &st.params, &vars, &batch)?;
            let loss = tape.scalar(lv.loss);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    episode,
                    rows: rows.to_vec(),
                    dump: None,
                });
            }
            let mut grads = tape.backward(lv.loss, 1.0);
            let mut g: Vec<_> = vars.iter().map(|&v| grads.take(v)).collect();
            zero_nans(&mut g);
            st.adam.step(&mut st.params, &g)?;
            sum += loss;
            max = max.max(loss);
            steps += 1;
        }
    }
    let mean_loss = if steps > 0 { sum / steps as f64 } else { 0.0 };
    st.history.push(mean_loss);
    Ok(EpisodeMetrics {
        episode: episode + 1,
        mean_loss,
        max_loss: max,
        wall_ms: started.elapsed().as_millis() as u64,
        steps,
    })
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutputs<'a> {
    pub dir: &'a Path,
    /// Writes `wall_ms = 0` so that artifacts compare bitwise.
    pub deterministic: bool,
    pub stage: Option<&'a HomotopyStage>,
}

impl TrainOutputs<'_> {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

/// Runs `run.episodes` episodes, writing `metrics.csv` as it goes and
/// `checkpoint.bin` at the end. On a non-finite loss the last good
/// parameters and the offending states are written before returning.
pub fn train(
    econ: &dyn Economy,
    st: &mut TrainState,
    run: &TrainRun,
    out: &TrainOutputs,
) -> Result<Vec<EpisodeMetrics>, TrainError> {
    fs::create_dir_all(out.dir).map_err(io_err(out.dir))?;
    let metrics_path = out.metrics_path();
    let mut w = csv::Writer::from_path(&metrics_path).map_err(csv_err(&metrics_path))?;
    w.write_record(METRICS_HEADER).map_err(csv_err(&metrics_path))?;
    w.flush().map_err(io_err(&metrics_path))?;
    let mut all = Vec::with_capacity(run.episodes);
    for local in 1..=run.episodes {
        let m = match run_episode(econ, st, run) {
            Ok(m) => EpisodeMetrics { episode: local, ..m },
            Err(TrainError::NonFiniteLoss { episode, rows, .. }) => {
                save_checkpoint(&st.params, &st.adam, out.stage, &out.checkpoint_path())?;
                let dump = out.dir.join("nan_states.csv");
                write_state_dump(&dump, &st.states, &rows)?;
                log::error!("non-finite loss in episode {}; states dumped to {}", episode + 1, dump.display());
                return Err(TrainError::NonFiniteLoss {
                    episode,
                    rows,
                    dump: Some(dump),
                });
            }
            Err(e) => {
                save_checkpoint(&st.params, &st.adam, out.stage, &out.checkpoint_path())?;
                return Err(e);
            }
        };
        let wall = if out.deterministic { 0 } else { m.wall_ms };
        w.write_record([
            m.episode.to_string(),
            m.mean_loss.to_string(),
            m.max_loss.to_string(),
            wall.to_string(),
        ])
        .map_err(csv_err(&metrics_path))?;
        w.flush().map_err(io_err(&metrics_path))?;
        if m.episode % 50 == 0 || m.episode == run.episodes {
            log::info!(
                "episode {}/{}: mean loss {:.3e}, recent mean {:.3e}",
                m.episode,
                run.episodes,
                m.mean_loss,
                st.history.mean().unwrap_or(f64::NAN)
            );
        }
        all.push(m);
    }
    save_checkpoint(&st.params, &st.adam, out.stage, &out.checkpoint_path())?;
    Ok(all)
}

fn write_state_dump(path: &Path, states: &Tensor<f64>, rows: &[usize]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["row".to_string(), "z".to_string()];
    header.extend((1..states.ncols()).map(|c| format!("x{c}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for &r in rows {
        let mut rec = vec![r.to_string()];
        rec.extend(states.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Forward simulation without updates, from `states` for `periods` steps.
pub fn simulate(
    econ: &dyn Economy,
    params: &MlpParams<f64>,
    mut states: Tensor<f64>,
    periods: usize,
    seed: u64,
) -> Result<Tensor<f64>, EconomyError> {
    let (rho, sigma) = econ.shock_process();
    for p in 0..periods {
        let z = draw_next_shocks(&states, rho, sigma, seed, STREAM_EVAL, p as u64);
        states = advance_chunked(econ, params, &states, &z)?;
    }
    Ok(states)
}

/// Summary of the absolute residual of one condition, type and age.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorStats {
    pub family: String,
    /// 1-based.
    pub type_index: usize,
    pub age: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Values at the requested percentiles, in order.
    pub percentiles: Vec<f64>,
}

/// Residual statistics over a batch of states, in chunks.
pub fn residual_stats(
    econ: &dyn Economy,
    params: &MlpParams<f64>,
    states: &Tensor<f64>,
    percentiles: &[f64],
) -> Result<Vec<ErrorStats>, EconomyError> {
    let n = states.nrows();
    // (family, type, age) -> column of absolute residuals
    let mut cols: Vec<((String, usize, usize), Vec<f64>)> = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let block = states.slice(ndarray::s![start..end, ..]).to_owned();
        let blocks = econ.residuals(params, &block)?;
        let mut k = 0;
        for b in blocks {
            for (j, &age) in b.ages.iter().enumerate() {
                if start == 0 {
                    cols.push(((b.family.to_string(), b.type_index + 1, age), Vec::with_capacity(n)));
                }
                cols[k].1.extend(b.values.column(j).iter().map(|v| v.abs()));
                k += 1;
            }
        }
    }
    Ok(cols
        .into_iter()
        .map(|((family, type_index, age), mut v)| {
            v.sort_by(f64::total_cmp);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            ErrorStats {
                family,
                type_index,
                age,
                min: v.first().copied().unwrap_or(f64::NAN),
                mean,
                max: v.last().copied().unwrap_or(f64::NAN),
                percentiles: percentiles.iter().map(|&q| percentile_sorted(&v, q)).collect(),
            }
        })
        .collect())
}

/// Simulates `periods` steps from `states` and summarizes the residuals
/// on the final batch.
pub fn evaluate(
    econ: &dyn Economy,
    params: &MlpParams<f64>,
    states: Tensor<f64>,
    periods: usize,
    seed: u64,
    percentiles: &[f64],
) -> Result<Vec<ErrorStats>, EconomyError> {
    let states = simulate(econ, params, states, periods, seed)?;
    residual_stats(econ, params, &states, percentiles)
}

fn pct_label(q: f64) -> String {
    format!("p{q}")
}

pub fn evaluation_header(percentiles: &[f64]) -> Vec<String> {
    // min and mean come before the lower percentiles, mean before the upper
    let mut h = vec!["residual_family".into(), "type".into(), "age".into(), "min".into()];
    let (lo, hi): (Vec<_>, Vec<_>) = percentiles.iter().partition(|&&q| q < 50.0);
    h.extend(lo.iter().map(|&&q| pct_label(q)));
    h.push("mean".into());
    h.extend(hi.iter().map(|&&q| pct_label(q)));
    h.push("max".into());
    h
}

pub fn write_evaluation(path: &Path, stats: &[ErrorStats], percentiles: &[f64]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(evaluation_header(percentiles)).map_err(csv_err(path))?;
    for s in stats {
        let mut rec = vec![s.family.clone(), s.type_index.to_string(), s.age.to_string(), s.min.to_string()];
        let split = percentiles.iter().filter(|&&q| q < 50.0).count();
        rec.extend(s.percentiles[..split].iter().map(|v| v.to_string()));
        rec.push(s.mean.to_string());
        rec.extend(s.percentiles[split..].iter().map(|v| v.to_string()));
        rec.push(s.max.to_string());
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub variable: String,
    /// 1-based.
    pub type_index: usize,
    pub age: usize,
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Mean and 10/90 percentiles of each policy and of consumption by age.
pub fn profile_rows(
    econ: &dyn Economy,
    params: &MlpParams<f64>,
    states: &Tensor<f64>,
) -> Result<Vec<ProfileRow>, EconomyError> {
    let n = states.nrows();
    let mut cols: Vec<((String, usize, usize), Vec<f64>)> = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let block = states.slice(ndarray::s![start..end, ..]).to_owned();
        let mut k = 0;
        for b in econ.profiles(params, &block)? {
            for (a, col) in b.values.columns().into_iter().enumerate() {
                if start == 0 {
                    cols.push(((b.variable.to_string(), b.type_index + 1, a + 1), Vec::with_capacity(n)));
                }
                cols[k].1.extend(col.iter());
                k += 1;
            }
        }
    }
    Ok(cols
        .into_iter()
        .map(|((variable, type_index, age), mut v)| {
            v.sort_by(f64::total_cmp);
            ProfileRow {
                variable,
                type_index,
                age,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                p10: percentile_sorted(&v, 10.0),
                p90: percentile_sorted(&v, 90.0),
            }
        })
        .collect())
}

pub fn write_profiles(path: &Path, rows: &[ProfileRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(PROFILE_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.variable.clone(),
            r.type_index.to_string(),
            r.age.to_string(),
            r.mean.to_string(),
            r.p10.to_string(),
            r.p90.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
