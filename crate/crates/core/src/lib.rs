//! Dyadic shell models with transport noise: state space, noise driver,
//! deterministic and stochastic solvers, moment equations, change of measure
//! and the Monte Carlo experiments built on them.

pub mod deterministic;
pub mod error;
pub mod experiments;
pub mod girsanov;
pub mod io;
pub mod moments;
pub mod noise;
pub mod scalar;
pub mod sequence_space;
pub mod stats;
pub mod stochastic;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ShellVectorF64 = sequence_space::ShellVector<f64>;
pub type ShellVectorF32 = sequence_space::ShellVector<f32>;
pub type ThetaFamilyF64 = noise::ThetaFamily<f64>;
pub type ThetaFamilyF32 = noise::ThetaFamily<f32>;
pub type SdeConfigF64 = stochastic::SdeConfig<f64>;
pub type SdeConfigF32 = stochastic::SdeConfig<f32>;
pub type DetConfigF64 = deterministic::DetConfig<f64>;
pub type DetConfigF32 = deterministic::DetConfig<f32>;
