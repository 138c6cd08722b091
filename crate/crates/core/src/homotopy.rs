//! Staged introduction of the stock and owned housing.
//!
//! Starting from a bond-only economy, each further asset is first priced at
//! zero allocations, then switched on with a tiny mask, then phased in by
//! equal supply steps. Every stage warm-starts from the previous weights
//! and simulated states; a JSON manifest records finished stages so a run
//! can resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::clearing::{ClearingMode, Solver};
use crate::config::ValidationError;
use crate::economy_multi::{MultiAssetConfig, MultiAssetEconomy};
use crate::model::{Economy, EconomyError};
use crate::nn::{load_checkpoint, CheckpointError};
use crate::quadrature::QuadratureRule;
use crate::trainer::{
    residual_stats, simulate, train, write_evaluation, TrainError, TrainOutputs, TrainRun, TrainState,
};

pub use crate::economy_multi::{LossWeights, Masks, Supplies};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomotopyStage {
    pub label: String,
    pub weights: LossWeights,
    pub masks: Masks,
    pub supplies: Supplies,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomotopySettings {
    pub stock_steps: usize,
    pub housing_steps: usize,
    pub initial_episodes: usize,
    pub stage_episodes: usize,
    /// Mask used for the first stage an asset is switched on.
    pub initial_mask: f64,
    /// Bond, stock and owned-housing supply at the end of the schedule;
    /// `housing_external` here is the final external supply.
    pub final_supplies: Supplies,
    /// Extra simulated periods before each stage's evaluation.
    #[serde(default)]
    pub eval_periods: usize,
}

impl Default for HomotopySettings {
    fn default() -> Self {
        Self {
            stock_steps: 10,
            housing_steps: 20,
            initial_episodes: 512,
            stage_episodes: 256,
            initial_mask: 0.01,
            final_supplies: Supplies {
                bond: 0.56,
                stock: 1.0,
                housing_owned: 1.0,
                housing_external: 0.0,
            },
            eval_periods: 0,
        }
    }
}

impl HomotopySettings {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.stock_steps == 0 {
            return Err(ValidationError::new("homotopy.stock_steps", "must be at least 1"));
        }
        if self.housing_steps == 0 {
            return Err(ValidationError::new("homotopy.housing_steps", "must be at least 1"));
        }
        if !(self.initial_mask > 0.0 && self.initial_mask <= 1.0) {
            return Err(ValidationError::new("homotopy.initial_mask", "must lie in (0, 1]"));
        }
        let s = &self.final_supplies;
        for (name, v) in [
            ("homotopy.final_supplies.bond", s.bond),
            ("homotopy.final_supplies.stock", s.stock),
            ("homotopy.final_supplies.housing_owned", s.housing_owned),
            ("homotopy.final_supplies.housing_external", s.housing_external),
        ] {
            if !(v >= 0.0) {
                return Err(ValidationError::new(name, "must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// The full stage list: bond only, stock priced, stock masked in, stock
/// supply steps, then the same three phases for owned housing, whose
/// supply is taken out of external housing so the total stays fixed.
pub fn build_schedule(s: &HomotopySettings) -> Vec<HomotopyStage> {
    let fin = s.final_supplies;
    let total_housing = fin.housing_owned + fin.housing_external;
    let w = |bond, stock, housing| LossWeights {
        bond,
        stock,
        housing,
        rent: 1.0,
    };
    let m = |stock, housing| Masks {
        bond: 1.0,
        stock,
        housing,
    };
    let sup = |stock, owned: f64| Supplies {
        bond: fin.bond,
        stock,
        housing_owned: owned,
        housing_external: total_housing - owned,
    };
    let stage = |label: String, weights, masks, supplies, episodes| HomotopyStage {
        label,
        weights,
        masks,
        supplies,
        episodes,
    };
    let e = s.stage_episodes;
    let mut out = vec![
        stage("bond_only".into(), w(1.0, 0.0, 0.0), m(0.0, 0.0), sup(0.0, 0.0), s.initial_episodes),
        stage("stock_price".into(), w(1.0, 1.0, 0.0), m(0.0, 0.0), sup(0.0, 0.0), e),
        stage("stock_mask".into(), w(1.0, 1.0, 0.0), m(s.initial_mask, 0.0), sup(0.0, 0.0), e),
    ];
    for k in 1..=s.stock_steps {
        let supply = fin.stock * k as f64 / s.stock_steps as f64;
        out.push(stage(format!("stock_{k}"), w(1.0, 1.0, 0.0), m(1.0, 0.0), sup(supply, 0.0), e));
    }
    out.push(stage("housing_price".into(), w(1.0, 1.0, 1.0), m(1.0, 0.0), sup(fin.stock, 0.0), e));
    out.push(stage(
        "housing_mask".into(),
        w(1.0, 1.0, 1.0),
        m(1.0, s.initial_mask),
        sup(fin.stock, 0.0),
        e,
    ));
    for j in 1..=s.housing_steps {
        let owned = fin.housing_owned * j as f64 / s.housing_steps as f64;
        out.push(stage(format!("housing_{j}"), w(1.0, 1.0, 1.0), m(1.0, 1.0), sup(fin.stock, owned), e));
    }
    out
}

impl MultiAssetConfig {
    /// This configuration with a stage's weights, masks and supplies.
    pub fn at_stage(&self, stage: &HomotopyStage) -> Self {
        Self {
            weights: stage.weights,
            masks: stage.masks,
            supplies: stage.supplies,
            ..self.clone()
        }
    }
}

#[derive(Debug, Error)]
pub enum HomotopyError {
    #[error("stage {index} ({label}) aborted: {source}")]
    Stage {
        index: usize,
        label: String,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Economy(#[from] EconomyError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {message}")]
    Manifest { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HomotopyError + '_ {
    move |source| HomotopyError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub label: String,
    pub stage: HomotopyStage,
    /// Paths relative to the output directory.
    pub checkpoint: PathBuf,
    pub evaluation: PathBuf,
    pub metrics: PathBuf,
    pub states: PathBuf,
    /// Episodes run before and including this stage.
    pub episodes_total: usize,
    pub final_mean_loss: Option<f64>,
    /// Largest relative clearing violation on the final states.
    pub clearing_gap: f64,
    /// Largest absolute holding of bond, stock and owned housing.
    pub max_abs_holdings: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schedule: Vec<HomotopyStage>,
    pub completed: Vec<StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, HomotopyError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| HomotopyError::Manifest {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Writes to a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), HomotopyError> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }
}

const STATES_MAGIC: &[u8; 8] = b"MCLSTAT\x01";

/// Binary state batch: magic, rows and columns as little-endian `u64`,
/// then the values as little-endian `f64`, row-major.
pub fn save_states(states: &Tensor<f64>, path: &Path) -> Result<(), HomotopyError> {
    let mut bytes = Vec::with_capacity(24 + 8 * states.len());
    bytes.extend_from_slice(STATES_MAGIC);
    bytes.extend_from_slice(&(states.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(states.ncols() as u64).to_le_bytes());
    for v in states.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_states(path: &Path) -> Result<Tensor<f64>, HomotopyError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |message: &str| HomotopyError::Manifest {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    if bytes.len() < 24 || &bytes[..8] != STATES_MAGIC {
        return Err(bad("not a state file"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
    let (rows, cols) = (word(8), word(16));
    if bytes.len() != 24 + 8 * rows * cols {
        return Err(bad("state file size does not match its header"));
    }
    let vals = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_shape_vec((rows, cols), vals).map_err(|e| bad(&e.to_string()))
}

/// Fixed ingredients of a homotopy run.
#[derive(Debug, Clone)]
pub struct HomotopyRun<'a> {
    pub economy: &'a MultiAssetConfig,
    pub schedule: &'a [HomotopyStage],
    pub train: &'a TrainRun,
    pub mode: ClearingMode,
    pub solver: Solver,
    pub rule: &'a QuadratureRule<f64>,
    pub policy_activation: crate::nn::Activation,
    pub eval_periods: usize,
    pub percentiles: &'a [f64],
    pub out: &'a Path,
    pub deterministic: bool,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    out.join("manifest.json")
}

pub fn stage_dir_name(index: usize, label: &str) -> String {
    format!("stage_{:02}_{label}", index + 1)
}

impl HomotopyRun<'_> {
    pub fn economy_at(&self, stage: &HomotopyStage) -> Result<MultiAssetEconomy, ValidationError> {
        Ok(
            MultiAssetEconomy::new(self.economy.at_stage(stage), self.mode, self.solver, self.rule.clone())?
                .with_policy_activation(self.policy_activation),
        )
    }
}

/// Runs the schedule from `fresh` (or from the manifest when `resume` is
/// set and one exists). Returns the manifest and the final training state.
pub fn run_homotopy(
    run: &HomotopyRun,
    fresh: TrainState,
    resume: bool,
) -> Result<(Manifest, TrainState), HomotopyError> {
    if run.schedule.is_empty() {
        return Err(ValidationError::new("homotopy", "schedule is empty").into());
    }
    fs::create_dir_all(run.out).map_err(io_err(run.out))?;
    let mpath = manifest_path(run.out);
    let (mut manifest, mut st) = if resume && mpath.exists() {
        let m = Manifest::load(&mpath)?;
        if m.schedule != run.schedule {
            return Err(HomotopyError::Manifest {
                path: mpath.display().to_string(),
                message: "schedule differs from the configured one; refusing to resume".into(),
            });
        }
        let st = match m.completed.last() {
            Some(rec) => {
                let ck = load_checkpoint::<f64>(&run.out.join(&rec.checkpoint))?;
                ck.expect_dims(&fresh.params.dims())?;
                let mut st = fresh;
                st.params = ck.params;
                st.adam.config = ck.adam.config;
                st.adam.step = ck.adam.step;
                st.states = load_states(&run.out.join(&rec.states))?;
                st.episode = rec.episodes_total;
                st
            }
            None => fresh,
        };
        log::info!("resuming after {} completed stages", m.completed.len());
        (m, st)
    } else {
        let m = Manifest {
            schedule: run.schedule.to_vec(),
            completed: Vec::new(),
        };
        m.save(&mpath)?;
        (m, fresh)
    };

    let start = manifest.completed.len();
    for (index, stage) in run.schedule.iter().enumerate().skip(start) {
        let econ = run.economy_at(stage)?;
        if index > 0 {
            let prev = &run.schedule[index - 1].supplies;
            st.states = econ.rescale_states(&st.states, prev, &stage.supplies);
        } else if start == 0 {
            st.states = econ.initial_states(st.states.nrows());
        }
        let name = stage_dir_name(index, &stage.label);
        let dir = run.out.join(&name);
        let outputs = TrainOutputs {
            dir: &dir,
            deterministic: run.deterministic,
            stage: Some(stage),
        };
        let stage_run = TrainRun {
            episodes: stage.episodes,
            ..run.train.clone()
        };
        log::info!("stage {}/{}: {}", index + 1, run.schedule.len(), stage.label);
        let metrics = train(&econ, &mut st, &stage_run, &outputs).map_err(|source| HomotopyError::Stage {
            index,
            label: stage.label.clone(),
            source,
        })?;
        let eval_states = simulate(&econ, &st.params, st.states.clone(), run.eval_periods, run.train.seed)?;
        let stats = residual_stats(&econ, &st.params, &eval_states, run.percentiles)?;
        let eval_path = dir.join("evaluation.csv");
        write_evaluation(&eval_path, &stats, run.percentiles)?;
        let states_path = dir.join("states.bin");
        save_states(&st.states, &states_path)?;
        let f = econ.agent_index().n_full();
        let max_abs = |k: usize| {
            st.states
                .slice(ndarray::s![.., 1 + k * f..1 + (k + 1) * f])
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
        };
        manifest.completed.push(StageRecord {
            index,
            label: stage.label.clone(),
            stage: stage.clone(),
            checkpoint: PathBuf::from(&name).join("checkpoint.bin"),
            evaluation: PathBuf::from(&name).join("evaluation.csv"),
            metrics: PathBuf::from(&name).join("metrics.csv"),
            states: PathBuf::from(&name).join("states.bin"),
            episodes_total: st.episode,
            final_mean_loss: metrics.last().map(|m| m.mean_loss),
            clearing_gap: econ.clearing_gap(&st.params, &st.states)?,
            max_abs_holdings: [max_abs(0), max_abs(1), max_abs(2)],
        });
        manifest.save(&mpath)?;
    }
    Ok((manifest, st))
}
