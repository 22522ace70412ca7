//! Benchmark forging for hardware model checkers.
//!
//! This crate evolves algorithm-level computation graphs under a two-agent
//! Thompson-sampling loop, compiles each graph into two functionally
//! equivalent but structurally divergent transition systems, miters them
//! into model checking problems (AIGER / BTOR2), and scores candidates with
//! a learned solving-time predictor to discover small-but-hard instances.

pub mod graph;
pub mod value;
pub mod compile;
