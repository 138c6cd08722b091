//! The interface the trainer drives, shared by both economies.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::clearing::ClearingError;
use crate::nn::{HeadSpec, MlpParams, NnError};

#[derive(Debug, Error)]
pub enum EconomyError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Clearing(#[from] ClearingError),
    #[error("state batch has {got} columns, expected {expected}")]
    StateWidth { expected: usize, got: usize },
    #[error("{what}: got {got} entries, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
}

/// Residuals of one equilibrium condition for one household type,
/// one column per age.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub family: &'static str,
    pub type_index: usize,
    /// 1-based ages.
    pub ages: Vec<usize>,
    /// `n_states × ages.len()`.
    pub values: Tensor<f64>,
}

/// One policy or allocation by age for one type.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileBlock {
    pub variable: &'static str,
    pub type_index: usize,
    /// `n_states × H`.
    pub values: Tensor<f64>,
}

/// Scalar loss and its ingredients, all recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub loss: Var,
    /// Euler-family residuals of the first asset (`n × savers`).
    pub bond_residual: Var,
    pub rent_residual: Var,
}

pub trait Economy {
    fn input_dim(&self) -> usize;
    fn heads(&self) -> Vec<HeadSpec>;
    fn output_dim(&self) -> usize {
        self.heads().iter().map(|h| h.width).sum()
    }
    /// `(ρ, σ)` of the log-productivity process.
    fn shock_process(&self) -> (f64, f64);
    /// Copies of one feasible, clearing state.
    fn initial_states(&self, n: usize) -> Tensor<f64>;
    fn loss(
        &self,
        tape: &mut Tape<f64>,
        net: &MlpParams<f64>,
        params: &[Var],
        states: &Tensor<f64>,
    ) -> Result<LossVars, EconomyError>;
    /// One simulation step under the current network.
    fn advance(
        &self,
        net: &MlpParams<f64>,
        states: &Tensor<f64>,
        z_next: &[f64],
    ) -> Result<Tensor<f64>, EconomyError>;
    fn residuals(
        &self,
        net: &MlpParams<f64>,
        states: &Tensor<f64>,
    ) -> Result<Vec<ResidualBlock>, EconomyError>;
    fn profiles(
        &self,
        net: &MlpParams<f64>,
        states: &Tensor<f64>,
    ) -> Result<Vec<ProfileBlock>, EconomyError>;
    /// Largest relative violation of any clearing identity, over the
    /// holdings in `states` and the policies the network picks there.
    fn clearing_gap(&self, net: &MlpParams<f64>, states: &Tensor<f64>) -> Result<f64, EconomyError>;
}

pub(crate) fn check_width(states: &Tensor<f64>, expected: usize) -> Result<(), EconomyError> {
    if states.ncols() != expected {
        return Err(EconomyError::StateWidth {
            expected,
            got: states.ncols(),
        });
    }
    Ok(())
}

/// `|x - target| / max(1, |target|)`.
pub(crate) fn rel_gap(x: f64, target: f64) -> f64 {
    (x - target).abs() / target.abs().max(1.0)
}
