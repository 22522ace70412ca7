//! Word-level transition systems and cycle-accurate simulation.

use std::collections::BTreeMap;

use super::expr::{Evaluator, ExprPool, ExprRef};

#[derive(Debug, Clone)]
pub struct StateVar {
    pub name: String,
    pub width: u32,
    pub init: u128,
    pub next: ExprRef,
}

#[derive(Debug, Clone)]
pub struct TransitionSystem {
    pub name: String,
    pub inputs: Vec<(String, u32)>,
    pub state_vars: Vec<StateVar>,
    /// Named outputs; schedulers always provide `valid` and `result`.
    pub outputs: Vec<(String, ExprRef)>,
    pub bad: Option<ExprRef>,
    pub pool: ExprPool,
    /// Static cycle count to `valid` when known.
    pub latency: Option<u64>,
}

impl TransitionSystem {
    pub fn output(&self, name: &str) -> Option<ExprRef> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| *e)
    }

    pub fn output_width(&self, name: &str) -> Option<u32> {
        self.output(name).map(|e| self.pool.width(e))
    }

    /// Total state bits (the latch count after bit blasting).
    pub fn state_bits(&self) -> u64 {
        self.state_vars.iter().map(|s| s.width as u64).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub output_names: Vec<String>,
    /// Outputs per simulated cycle (cycle 0 = initial state).
    pub outputs: Vec<Vec<u128>>,
    /// States per cycle when tracing was requested.
    pub states: Option<Vec<Vec<u128>>>,
    pub first_valid_cycle: Option<u64>,
}

impl Trace {
    fn at_valid(&self, idx: usize) -> Option<u128> {
        let c = self.first_valid_cycle? as usize;
        Some(self.outputs[c][idx])
    }

    pub fn named_at_valid(&self, name: &str) -> Option<u128> {
        let idx = self.output_names.iter().position(|n| n == name)?;
        self.at_valid(idx)
    }

    pub fn result_at_valid(&self) -> Option<u128> {
        self.named_at_valid("result")
    }

    /// All `out{i}` design outputs at the valid cycle, as u64 raws.
    pub fn design_outputs_at_valid(&self) -> Option<BTreeMap<String, u64>> {
        let c = self.first_valid_cycle? as usize;
        let mut map = BTreeMap::new();
        for (i, n) in self.output_names.iter().enumerate() {
            if n.starts_with("out") {
                map.insert(n.clone(), self.outputs[c][i] as u64);
            }
        }
        Some(map)
    }
}

/// Simulate with constant inputs until `valid` has been high once (plus a
/// few cycles to observe stickiness) or `max_cycles` is reached.
pub fn simulate(
    ts: &TransitionSystem,
    inputs: &BTreeMap<String, u64>,
    max_cycles: u64,
) -> Trace {
    let vals: Vec<u128> = ts
        .inputs
        .iter()
        .map(|(n, _)| *inputs.get(n).unwrap_or(&0) as u128)
        .collect();
    simulate_fn(ts, |_| vals.clone(), max_cycles, false, 8)
}

/// Simulate with explicit per-cycle input vectors; runs exactly
/// `input_seq.len()` cycles and records states.
pub fn simulate_seq(ts: &TransitionSystem, input_seq: &[Vec<u128>]) -> Trace {
    let seq: Vec<Vec<u128>> = input_seq.to_vec();
    simulate_fn(
        ts,
        move |c| seq[c as usize].clone(),
        seq_len(input_seq),
        true,
        u64::MAX,
    )
}

fn seq_len(s: &[Vec<u128>]) -> u64 {
    s.len() as u64
}

fn simulate_fn(
    ts: &TransitionSystem,
    mut input_at: impl FnMut(u64) -> Vec<u128>,
    max_cycles: u64,
    trace_states: bool,
    extra_after_valid: u64,
) -> Trace {
    let mut ev = Evaluator::new(&ts.pool);
    let mut state: Vec<u128> = ts.state_vars.iter().map(|s| s.init).collect();
    let mut outputs = Vec::new();
    let mut states = if trace_states { Some(Vec::new()) } else { None };
    let mut first_valid = None;
    let valid_idx = ts.outputs.iter().position(|(n, _)| n == "valid");
    let mut cycle = 0u64;
    while cycle < max_cycles {
        let inp = input_at(cycle);
        ev.next_cycle();
        let outs: Vec<u128> = ts
            .outputs
            .iter()
            .map(|(_, e)| ev.eval(*e, &inp, &state))
            .collect();
        if let Some(vi) = valid_idx {
            if first_valid.is_none() && outs[vi] != 0 {
                first_valid = Some(cycle);
            }
        }
        outputs.push(outs);
        if let Some(st) = states.as_mut() {
            st.push(state.clone());
        }
        if let Some(v) = first_valid {
            if cycle >= v + extra_after_valid {
                break;
            }
        }
        let next: Vec<u128> = ts
            .state_vars
            .iter()
            .map(|s| ev.eval(s.next, &inp, &state))
            .collect();
        state = next;
        cycle += 1;
    }
    Trace {
        output_names: ts.outputs.iter().map(|(n, _)| n.clone()).collect(),
        outputs,
        states,
        first_valid_cycle: first_valid,
    }
}
