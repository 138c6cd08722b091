//! Market-clearing network layers and simulation-based training of
//! overlapping-generations equilibrium models.
//!
//! The numeric core is generic over the scalar ([`scalar::Real`]); the
//! aliases below pin it to `f64`, which is what the models and the CLI use.

pub mod autodiff;
pub mod clearing;
pub mod cli;
pub mod config;
pub mod economy_multi;
pub mod economy_single;
pub mod homotopy;
pub mod household;
pub mod model;
pub mod nn;
pub mod oracles;
pub mod quadrature;
pub mod scalar;
pub mod trainer;

pub type Tape64 = autodiff::Tape<f64>;
pub type Mlp = nn::MlpParams<f64>;
pub type Adam = nn::AdamState<f64>;
pub type Rule = quadrature::QuadratureRule<f64>;
