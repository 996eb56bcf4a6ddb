//! Approximate joint laws of the two ruin times of a ruin-dependent
//! bivariate stochastic fluid process, computed by a recursive
//! first-return matrix algorithm and validated against an exact Monte
//! Carlo simulator of the underlying piecewise-deterministic process.

pub mod bridge;
pub mod joint;
pub mod model;
pub mod sim;
pub mod test_models;
pub mod uniformization;
