//! Reference interpreter: executes a computation graph directly, loops as
//! iteration and dep nodes as delayed reads. Independent of any schedule.

use std::collections::BTreeMap;

use crate::graph::{ComputationGraph, LoopAttrs, NodeId, NodeKind, Producer, LOOP_INDEX_WIDTH};
use crate::value::{apply_op, mask64, BitVal, Operand};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterpError {
    #[error("primary input '{0}' not bound")]
    MissingInput(String),
    #[error("value for input '{0}' exceeds its declared width")]
    InputTooWide(String),
}

struct Interp<'a> {
    g: &'a ComputationGraph,
    inputs: Vec<BitVal>,
    env: BTreeMap<NodeId, BitVal>,
    hist: BTreeMap<NodeId, Vec<BitVal>>,
}

/// Execute the graph on one input binding. Returns the design outputs in
/// program order, named `out0`, `out1`, ...
pub fn interpret(
    g: &ComputationGraph,
    inputs: &BTreeMap<String, u64>,
) -> Result<BTreeMap<String, u64>, InterpError> {
    let mut bound = Vec::with_capacity(g.inputs.len());
    for pi in &g.inputs {
        let v = *inputs
            .get(&pi.name)
            .ok_or_else(|| InterpError::MissingInput(pi.name.clone()))?;
        if v & !mask64(pi.width) != 0 {
            return Err(InterpError::InputTooWide(pi.name.clone()));
        }
        bound.push(BitVal::new(v, pi.width));
    }
    let mut interp = Interp {
        g,
        inputs: bound,
        env: BTreeMap::new(),
        hist: BTreeMap::new(),
    };
    interp.run_children(None, true);
    let mut out = BTreeMap::new();
    for (i, &id) in g.outputs.iter().enumerate() {
        out.insert(format!("out{}", i), interp.env[&id].raw);
    }
    Ok(out)
}

impl<'a> Interp<'a> {
    fn read(&self, p: Producer) -> Operand {
        match p {
            Producer::Input(i) => Operand::int(self.inputs[i as usize]),
            Producer::Const { raw, width } => Operand::int(BitVal::new(raw, width)),
            Producer::Node(n) => Operand::new(
                self.env.get(&n).copied().unwrap_or_else(|| {
                    BitVal::zero(self.g.node_width(n).max(1))
                }),
                self.g.node_frac(n),
            ),
        }
    }

    fn run_children(&mut self, region: Option<NodeId>, pred: bool) {
        let children = match self.g.region_order.get(&region) {
            Some(c) => c.clone(),
            None => return,
        };
        for child in children {
            match self.g.nodes[&child].kind {
                NodeKind::Op(attrs) => {
                    let v = if pred {
                        let operands: Vec<Operand> = self
                            .g
                            .operands_of(child)
                            .into_iter()
                            .map(|p| self.read(p))
                            .collect();
                        apply_op(&attrs, &operands)
                    } else {
                        BitVal::zero(attrs.width)
                    };
                    self.env.insert(child, v);
                }
                NodeKind::Loop(attrs) => self.run_loop(child, &attrs, pred),
                NodeKind::Branch { condition } => {
                    let c = self.env.get(&condition).is_some_and(|b| b.raw != 0);
                    self.run_children(Some(child), pred && c);
                }
                NodeKind::Dep { .. } => {
                    // Loaded at iteration boundaries by the enclosing loop.
                }
            }
        }
    }

    fn run_loop(&mut self, id: NodeId, attrs: &LoopAttrs, pred: bool) {
        let trip = attrs.trip_count();
        let deps: Vec<(NodeId, u32, NodeId)> = self
            .g
            .nodes
            .iter()
            .filter_map(|(&d, n)| match n.kind {
                NodeKind::Dep { distance, source } if self.g.nearest_loop(d) == Some(id) => {
                    Some((d, distance, source))
                }
                _ => None,
            })
            .collect();
        for &(d, _, _) in &deps {
            self.hist.insert(d, Vec::new());
        }
        for i in 0..trip {
            let idx = attrs.start + i * attrs.step;
            self.env
                .insert(id, BitVal::new(idx as u64, LOOP_INDEX_WIDTH));
            for &(d, dist, source) in &deps {
                let w = self.g.node_width(source).max(1);
                let v = if i >= dist as i64 {
                    self.hist[&d][(i - dist as i64) as usize]
                } else {
                    BitVal::zero(w)
                };
                self.env.insert(d, v);
            }
            self.run_children(Some(id), pred);
            for &(d, _, source) in &deps {
                let v = self
                    .env
                    .get(&source)
                    .copied()
                    .unwrap_or_else(|| BitVal::zero(self.g.node_width(source).max(1)));
                self.hist.get_mut(&d).unwrap().push(v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::*;

    fn attrs(kind: OpKind, width: u32) -> OpAttrs {
        OpAttrs {
            op_kind: kind,
            width,
            dtype: DType::Int,
            signed: false,
            int_bits: width,
            rounding: Rounding::Truncate,
            saturation: Saturation::Wrap,
        }
    }

    /// Hand-build `acc[i] = acc[i-1] + x` over a trip-4 loop and check the
    /// accumulator semantics end to end.
    #[test]
    fn accumulator_via_dep_rewire() {
        let mut g = ComputationGraph::new(vec![PrimaryInput {
            name: "x".into(),
            width: 8,
            dtype: DType::Int,
        }]);
        let la = LoopAttrs {
            start: 0,
            end: 4,
            step: 1,
            pipelined: false,
            flattened: false,
            unroll_factor: 1,
            fully_unrolled: false,
        };
        let l = g.insert_node(NodeKind::Loop(la), None);
        let add = g.insert_node(NodeKind::Op(attrs(OpKind::Add, 8)), Some(l));
        g.edges.push(DataEdge {
            producer: Producer::Input(0),
            consumer: add,
            slot: 0,
        });
        g.edges.push(DataEdge {
            producer: Producer::Input(0),
            consumer: add,
            slot: 1,
        });
        let dep = g.insert_node(
            NodeKind::Dep {
                distance: 1,
                source: add,
            },
            Some(l),
        );
        // Rewire slot 1 to read the previous iteration's sum.
        for e in &mut g.edges {
            if e.consumer == add && e.slot == 1 {
                e.producer = Producer::Node(dep);
            }
        }
        g.recompute_outputs();
        assert!(validate(&g).is_valid());

        let mut inp = BTreeMap::new();
        inp.insert("x".to_string(), 3u64);
        let out = interpret(&g, &inp).unwrap();
        // acc: 3, 6, 9, 12
        assert_eq!(out["out0"], 12);
    }

    #[test]
    fn missing_input_is_an_error() {
        let g = ComputationGraph::new(vec![PrimaryInput {
            name: "x".into(),
            width: 4,
            dtype: DType::Int,
        }]);
        let err = interpret(&g, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, InterpError::MissingInput(_)));
    }
}
