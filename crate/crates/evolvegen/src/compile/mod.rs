//! Lowering computation graphs into word-level transition systems under the
//! Basic and Optimized strategies, plus the reference interpreter and the
//! HLS-dialect source export.

pub mod elab;
pub mod expr;
pub mod hls;
pub mod interp;
pub mod machine;
pub mod ts;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ComputationGraph;
pub use interp::{interpret, InterpError};
pub use ts::{simulate, simulate_seq, StateVar, Trace, TransitionSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleStrategy {
    /// Sequential one-op-per-cycle schedule; every loop pragma is ignored.
    Basic,
    /// Unrolls, flattens and pipelines per loop attributes; combinational
    /// chains deeper than the threshold get pipeline registers.
    Optimized { register_depth_threshold: u32 },
}

impl ScheduleStrategy {
    pub fn optimized() -> Self {
        ScheduleStrategy::Optimized {
            register_depth_threshold: 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ScheduleStrategy::Basic => "basic",
            ScheduleStrategy::Optimized { .. } => "optimized",
        }
    }
}

/// Default cap on word-level expression count per schedule.
pub const DEFAULT_NODE_BUDGET: usize = 20_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CompileError {
    #[error("design exceeds the node budget ({nodes} word-level nodes)")]
    ResourceBound { nodes: usize },
}

pub fn schedule(
    g: &ComputationGraph,
    strategy: &ScheduleStrategy,
) -> Result<TransitionSystem, CompileError> {
    schedule_with(g, strategy, DEFAULT_NODE_BUDGET)
}

pub fn schedule_with(
    g: &ComputationGraph,
    strategy: &ScheduleStrategy,
    node_budget: usize,
) -> Result<TransitionSystem, CompileError> {
    let base = elab::from_graph(g);
    let params = match *strategy {
        ScheduleStrategy::Basic => machine::MachineParams {
            name: "basic".into(),
            one_op_per_stage: true,
            threshold: 1,
            honor_pipeline: false,
            honor_flatten: false,
            node_budget,
        },
        ScheduleStrategy::Optimized {
            register_depth_threshold,
        } => machine::MachineParams {
            name: "optimized".into(),
            one_op_per_stage: false,
            threshold: register_depth_threshold.max(1),
            honor_pipeline: true,
            honor_flatten: true,
            node_budget,
        },
    };
    let honor_unroll = matches!(strategy, ScheduleStrategy::Optimized { .. });
    let eg = elab::unroll(&base, honor_unroll, node_budget)?;
    machine::build_machine(&eg, &params)
}

#[cfg(test)]
mod tests;
