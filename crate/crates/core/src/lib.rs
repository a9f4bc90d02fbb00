//! Dynamic loss weighting for multi-objective training of small neural
//! networks on Sobolev and physics-informed losses.

pub mod autodiff;
pub mod balancing;
pub mod diagnostics;
pub mod experiment;
pub mod network;
pub mod problems;
pub mod rng;
pub mod training;
