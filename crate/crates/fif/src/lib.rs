//! Injective-flow training with stochastic log-determinant gradient
//! estimators and the analytic oracles used to verify them.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod hutchinson;
pub mod linalg;
pub mod linear_oracle;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod trainer;
pub mod surrogate;
