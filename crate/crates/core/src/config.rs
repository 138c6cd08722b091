//! Run configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clearing::{ClearingMode, Solver};
use crate::economy_multi::{MultiAssetConfig, MultiAssetEconomy};
use crate::economy_single::{SingleAssetConfig, SingleAssetEconomy};
use crate::homotopy::{build_schedule, HomotopySettings, HomotopyStage};
use crate::model::Economy;
use crate::nn::Activation;
use crate::quadrature::{gauss_hermite, QuadratureRule, MAX_ORDER};
use crate::trainer::{TrainRun, DEFAULT_PERCENTILES};

/// A configuration value that fails validation, named by its dotted path.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid `{field}`: {reason}")]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum EconomyConfig {
    Single(SingleAssetConfig),
    Multi(MultiAssetConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "default_policy_head")]
    pub policy_head: Activation,
}

fn default_policy_head() -> Activation {
    Activation::Identity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub states: usize,
    pub periods: usize,
    pub percentiles: Vec<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            states: 8192,
            periods: 256,
            percentiles: DEFAULT_PERCENTILES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: ClearingMode,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default)]
    pub deterministic: bool,
    pub quadrature_order: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub economy: EconomyConfig,
    pub network: NetworkConfig,
    pub training: TrainRun,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub homotopy: Option<HomotopySettings>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if !(1..=MAX_ORDER).contains(&self.quadrature_order) {
            return Err(ValidationError::new(
                "quadrature_order",
                format!("must lie in 1..={MAX_ORDER}"),
            ));
        }
        if self.network.hidden.is_empty() {
            return Err(ValidationError::new("network.hidden", "need at least one hidden layer"));
        }
        if let Some(i) = self.network.hidden.iter().position(|&w| w == 0) {
            return Err(ValidationError::new(format!("network.hidden[{i}]"), "must be positive"));
        }
        self.training.validate()?;
        if self.evaluation.states == 0 {
            return Err(ValidationError::new("evaluation.states", "must be at least 1"));
        }
        if let Some(i) = self.evaluation.percentiles.iter().position(|q| !(0.0..=100.0).contains(q)) {
            return Err(ValidationError::new(
                format!("evaluation.percentiles[{i}]"),
                "must lie in [0, 100]",
            ));
        }
        match &self.economy {
            EconomyConfig::Single(c) => {
                c.validate()?;
                if self.homotopy.is_some() {
                    return Err(ValidationError::new("homotopy", "only applies to the multi-asset model"));
                }
            }
            EconomyConfig::Multi(c) => {
                c.validate()?;
                let settings = self.homotopy_settings();
                settings.validate()?;
                for stage in build_schedule(&settings) {
                    c.at_stage(&stage).validate().map_err(|e| {
                        ValidationError::new(e.field, format!("{} (homotopy stage `{}`)", e.reason, stage.label))
                    })?;
                }
            }
        }
        Ok(())
    }

    pub fn homotopy_settings(&self) -> HomotopySettings {
        self.homotopy.clone().unwrap_or_default()
    }

    pub fn schedule(&self) -> Vec<HomotopyStage> {
        build_schedule(&self.homotopy_settings())
    }

    /// Training settings with the run-level seed and mode filled in.
    pub fn train_run(&self) -> TrainRun {
        TrainRun {
            seed: self.seed,
            mode: self.mode,
            ..self.training.clone()
        }
    }

    pub fn rule(&self) -> QuadratureRule<f64> {
        gauss_hermite(self.quadrature_order).expect("order checked by validate")
    }

    pub fn input_dim(&self) -> usize {
        match &self.economy {
            EconomyConfig::Single(c) => c.input_dim(),
            EconomyConfig::Multi(c) => c.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.economy {
            EconomyConfig::Single(c) => c.output_dim(),
            EconomyConfig::Multi(c) => c.output_dim(),
        }
    }

    /// Layer widths from input to output.
    pub fn network_dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(&self.network.hidden);
        d.push(self.output_dim());
        d
    }

    pub fn single_economy(&self) -> Option<Result<SingleAssetEconomy, ValidationError>> {
        match &self.economy {
            EconomyConfig::Single(c) => Some(
                SingleAssetEconomy::new(c.clone(), self.mode, self.solver, self.rule())
                    .map(|e| e.with_policy_activation(self.network.policy_head)),
            ),
            EconomyConfig::Multi(_) => None,
        }
    }

    /// The multi-asset economy, at `stage` when given.
    pub fn multi_economy(&self, stage: Option<&HomotopyStage>) -> Option<Result<MultiAssetEconomy, ValidationError>> {
        match &self.economy {
            EconomyConfig::Multi(c) => {
                let c = match stage {
                    Some(s) => c.at_stage(s),
                    None => c.clone(),
                };
                Some(
                    MultiAssetEconomy::new(c, self.mode, self.solver, self.rule())
                        .map(|e| e.with_policy_activation(self.network.policy_head)),
                )
            }
            EconomyConfig::Single(_) => None,
        }
    }

    pub fn economy(&self, stage: Option<&HomotopyStage>) -> Result<Box<dyn Economy>, ValidationError> {
        Ok(match &self.economy {
            EconomyConfig::Single(_) => Box::new(self.single_economy().expect("single model")?),
            EconomyConfig::Multi(_) => Box::new(self.multi_economy(stage).expect("multi model")?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3
quadrature_order = 4

[economy]
model = "single"
ages = 5
beta = 0.867
gamma = 3.0
housing_floor = 5e-5
borrowing_limit = 0.0
bond_supply = 0.56
rental_supply = 1.0
bond_adjustment = 0.5
rho = 0.458
sigma = 0.043

[network]
hidden = [16, 16]

[training]
episodes = 2
trajectories = 64
epochs = 1
minibatch = 32
learning_rate = 1e-4
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_toml_str(SMALL, "small").unwrap();
        assert_eq!(cfg.network_dims(), vec![6, 16, 16, 11]);
        assert_eq!(cfg.train_run().seed, 3);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string(), "again").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_vector_length_names_the_field() {
        let text = SMALL.replace("ages = 5", "ages = 5\nincome = [0.5, 0.5]");
        match RunConfig::from_toml_str(&text, "t") {
            Err(ConfigError::Validation(e)) => assert_eq!(e.field, "economy.income"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SMALL.replace("ages = 5", "ages = 5\nagse = 4");
        let err = RunConfig::from_toml_str(&text, "t").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
        assert!(err.to_string().contains("agse"));
    }

    #[test]
    fn infeasible_stage_is_rejected_before_compute() {
        let mut cfg = MultiAssetConfig {
            ages: 3,
            ..MultiAssetConfig::default()
        };
        cfg.lower_bounds.stock = 0.1;
        let run = RunConfig {
            seed: 0,
            mode: ClearingMode::Solver,
            solver: Solver::Sorted,
            deterministic: false,
            quadrature_order: 2,
            out: None,
            economy: EconomyConfig::Multi(cfg),
            network: NetworkConfig {
                hidden: vec![4],
                policy_head: Activation::Identity,
            },
            training: TrainRun::homotopy_stage(),
            evaluation: EvaluationConfig::default(),
            homotopy: None,
        };
        let e = run.validate().unwrap_err();
        assert_eq!(e.field, "economy.lower_bounds.stock");
        assert!(e.reason.contains("bond_only"));
    }
}
