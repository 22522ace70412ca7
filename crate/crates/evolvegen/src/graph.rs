//! Computation graphs: a typed DAG of operator, loop, branch and
//! loop-carried-dependency nodes, plus the constructive action space that
//! builds them.
//!
//! A graph is a structured program: every node lives in a region (the top
//! level, a loop body, or a branch body), regions nest as a forest, and the
//! per-region node order is program order. Data edges carry operand
//! references which may point at nodes, primary inputs, or inline constants.
//! The only backward data flow is through a `Dep` node, which reads the value
//! a source node produced a fixed number of loop iterations earlier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const GRAPH_SCHEMA_VERSION: &str = "graph/v1";

/// Maximum accepted construction actions per graph.
pub const ACTION_CAP: usize = 40;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Not,
    Shl,
    Shr,
    Eq,
    Neq,
    Lt,
    Le,
    Mux,
}

pub const ALL_OP_KINDS: [OpKind; 14] = [
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::And,
    OpKind::Or,
    OpKind::Xor,
    OpKind::Not,
    OpKind::Shl,
    OpKind::Shr,
    OpKind::Eq,
    OpKind::Neq,
    OpKind::Lt,
    OpKind::Le,
    OpKind::Mux,
];

impl OpKind {
    pub fn arity(self) -> usize {
        match self {
            OpKind::Not => 1,
            OpKind::Mux => 3,
            _ => 2,
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(self, OpKind::Eq | OpKind::Neq | OpKind::Lt | OpKind::Le)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DType {
    Int,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rounding {
    Truncate,
    RoundHalfUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Saturation {
    Wrap,
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpAttrs {
    pub op_kind: OpKind,
    /// Result width in bits, 1..=64. Comparisons are always width 1.
    pub width: u32,
    pub dtype: DType,
    pub signed: bool,
    /// Integer bits of a Fixed value (1..=width); ignored for Int.
    pub int_bits: u32,
    pub rounding: Rounding,
    pub saturation: Saturation,
}

impl OpAttrs {
    /// Fraction bits of the produced value.
    pub fn frac_bits(&self) -> u32 {
        match self.dtype {
            DType::Int => 0,
            DType::Fixed => self.width - self.int_bits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoopAttrs {
    pub start: i64,
    pub end: i64,
    pub step: i64,
    pub pipelined: bool,
    pub flattened: bool,
    pub unroll_factor: u32,
    pub fully_unrolled: bool,
}

impl LoopAttrs {
    /// Number of iterations: ceil((end - start) / step).
    pub fn trip_count(&self) -> i64 {
        if self.step == 0 {
            return 0;
        }
        let diff = self.end - self.start;
        if self.step > 0 {
            if diff <= 0 {
                0
            } else {
                (diff + self.step - 1) / self.step
            }
        } else if diff >= 0 {
            0
        } else {
            (-diff + (-self.step) - 1) / (-self.step)
        }
    }
}

/// Width of the value a loop node exposes (its running index).
pub const LOOP_INDEX_WIDTH: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Op(OpAttrs),
    Loop(LoopAttrs),
    Branch { condition: NodeId },
    Dep { distance: u32, source: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
}

impl Node {
    /// Does this node produce a data value usable as an operand?
    pub fn is_value(&self) -> bool {
        !matches!(self.kind, NodeKind::Branch { .. })
    }
}

/// An operand source: another node, a primary input, or an inline constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Producer {
    Node(NodeId),
    Input(u32),
    Const { raw: u64, width: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataEdge {
    pub producer: Producer,
    pub consumer: NodeId,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryInput {
    pub name: String,
    pub width: u32,
    pub dtype: DType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    AddOp,
    AddLoop,
    AddBranch,
    AddDep,
}

pub const ALL_ACTION_KINDS: [ActionKind; 4] = [
    ActionKind::AddOp,
    ActionKind::AddLoop,
    ActionKind::AddBranch,
    ActionKind::AddDep,
];

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ActionKind::AddOp => "AddOp",
            ActionKind::AddLoop => "AddLoop",
            ActionKind::AddBranch => "AddBranch",
            ActionKind::AddDep => "AddDep",
        };
        f.write_str(s)
    }
}

/// A fully realized construction step, as recorded in the action log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionAction {
    pub kind: ActionKind,
    /// Region the node was placed in (None = top level).
    pub region: Option<NodeId>,
    /// The created node.
    pub node: NodeId,
    /// Operand producers chosen for the node (condition for branches,
    /// source for deps).
    pub operands: Vec<Producer>,
    /// For AddDep: an operand slot that was rewired onto the new dep node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewired: Option<(NodeId, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputationGraph {
    pub inputs: Vec<PrimaryInput>,
    pub nodes: BTreeMap<NodeId, Node>,
    pub edges: Vec<DataEdge>,
    /// Containment: child node -> enclosing loop/branch node.
    pub regions: BTreeMap<NodeId, NodeId>,
    /// Program order of the children of each region (None = top level).
    pub region_order: BTreeMap<Option<NodeId>, Vec<NodeId>>,
    /// Value nodes with no consumers, in program order. These become the
    /// design outputs.
    pub outputs: Vec<NodeId>,
    pub action_log: Vec<ConstructionAction>,
    next_id: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("placement infeasible: {0}")]
    PlacementInfeasible(String),
    #[error("generation stalled after {0} infeasible placements")]
    GenerationStalled(usize),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub message: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Sampling ranges used when realizing construction actions. The legal
/// ranges are wider (widths up to 64, trips up to 64); these defaults keep
/// generated designs desk-scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenParams {
    pub max_width: u32,
    pub max_trip: i64,
    pub max_dep_distance: u32,
    pub num_inputs: (u32, u32),
    pub input_width_choices: Vec<u32>,
    /// Probability an operand slot is filled with a fresh constant.
    pub const_prob: f64,
    pub fixed_prob: f64,
    pub pipelined_prob: f64,
    pub flattened_prob: f64,
    pub fully_unrolled_prob: f64,
    pub rewire_prob: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            max_width: 16,
            max_trip: 8,
            max_dep_distance: 4,
            num_inputs: (1, 3),
            input_width_choices: vec![1, 2, 4, 6, 8, 12, 16],
            const_prob: 0.2,
            fixed_prob: 0.3,
            pipelined_prob: 0.5,
            flattened_prob: 0.5,
            fully_unrolled_prob: 0.35,
            rewire_prob: 0.5,
        }
    }
}

impl ComputationGraph {
    pub fn new(inputs: Vec<PrimaryInput>) -> Self {
        let mut region_order = BTreeMap::new();
        region_order.insert(None, Vec::new());
        ComputationGraph {
            inputs,
            nodes: BTreeMap::new(),
            edges: Vec::new(),
            regions: BTreeMap::new(),
            region_order,
            outputs: Vec::new(),
            action_log: Vec::new(),
            next_id: 0,
        }
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[&id]
    }

    pub fn region_of(&self, id: NodeId) -> Option<NodeId> {
        self.regions.get(&id).copied()
    }

    /// Chain of enclosing regions from innermost to outermost.
    pub fn region_chain(&self, id: NodeId) -> Vec<NodeId> {
        let mut chain = Vec::new();
        let mut cur = self.region_of(id);
        while let Some(r) = cur {
            chain.push(r);
            cur = self.region_of(r);
        }
        chain
    }

    /// Nearest enclosing loop of a node, if any.
    pub fn nearest_loop(&self, id: NodeId) -> Option<NodeId> {
        self.region_chain(id)
            .into_iter()
            .find(|r| matches!(self.nodes[r].kind, NodeKind::Loop(_)))
    }

    /// Enclosing branch nodes of `id`, innermost first.
    pub fn branch_chain(&self, id: NodeId) -> Vec<NodeId> {
        self.region_chain(id)
            .into_iter()
            .filter(|r| matches!(self.nodes[r].kind, NodeKind::Branch { .. }))
            .collect()
    }

    /// Bit width of a producer's value.
    pub fn producer_width(&self, p: Producer) -> u32 {
        match p {
            Producer::Input(i) => self.inputs[i as usize].width,
            Producer::Const { width, .. } => width,
            Producer::Node(id) => self.node_width(id),
        }
    }

    pub fn node_width(&self, id: NodeId) -> u32 {
        match self.nodes[&id].kind {
            NodeKind::Op(a) => a.width,
            NodeKind::Loop(_) => LOOP_INDEX_WIDTH,
            NodeKind::Dep { source, .. } => self.node_width(source),
            NodeKind::Branch { .. } => 0,
        }
    }

    /// Fraction bits of a producer's value.
    pub fn producer_frac(&self, p: Producer) -> u32 {
        match p {
            Producer::Input(_) | Producer::Const { .. } => 0,
            Producer::Node(id) => self.node_frac(id),
        }
    }

    pub fn node_frac(&self, id: NodeId) -> u32 {
        match self.nodes[&id].kind {
            NodeKind::Op(a) => a.frac_bits(),
            NodeKind::Loop(_) => 0,
            NodeKind::Dep { source, .. } => self.node_frac(source),
            NodeKind::Branch { .. } => 0,
        }
    }

    /// Ordered operand producers of a node (by slot).
    pub fn operands_of(&self, id: NodeId) -> Vec<Producer> {
        let mut ops: Vec<(u32, Producer)> = self
            .edges
            .iter()
            .filter(|e| e.consumer == id)
            .map(|e| (e.slot, e.producer))
            .collect();
        ops.sort_by_key(|(s, _)| *s);
        ops.into_iter().map(|(_, p)| p).collect()
    }

    /// Positions of all nodes in a canonical preorder traversal of the
    /// region tree. This is the program order.
    pub fn canonical_order(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        self.walk_region(None, &mut out);
        out
    }

    fn walk_region(&self, region: Option<NodeId>, out: &mut Vec<NodeId>) {
        if let Some(children) = self.region_order.get(&region) {
            for &c in children {
                out.push(c);
                if matches!(
                    self.nodes[&c].kind,
                    NodeKind::Loop(_) | NodeKind::Branch { .. }
                ) {
                    self.walk_region(Some(c), out);
                }
            }
        }
    }

    /// Is producer `p` visible as an operand for a (new or existing) node
    /// placed at the end of `region`?
    ///
    /// Standard lexical scoping: a node is visible if it occurs before the
    /// reference point in the region tree (an earlier sibling at any common
    /// ancestor level, including nodes inside earlier sibling blocks, which
    /// are read at their final value). Dep nodes are additionally visible
    /// anywhere inside their nearest loop.
    fn visible_at_end(&self, p: NodeId, region: Option<NodeId>) -> bool {
        // Chain of (region, index within region) for the reference point at
        // end-of-region.
        let ref_chain = self.position_chain_end(region);
        let prod_chain = self.position_chain(p);
        chains_before(&prod_chain, &ref_chain)
    }

    /// (region, index) pairs from the top level down to the node itself.
    fn position_chain(&self, id: NodeId) -> Vec<(Option<NodeId>, usize)> {
        let mut chain = Vec::new();
        let mut cur = id;
        loop {
            let reg = self.region_of(cur);
            let idx = self.region_order[&reg]
                .iter()
                .position(|&n| n == cur)
                .expect("node present in its region order");
            chain.push((reg, idx));
            match reg {
                Some(r) => cur = r,
                None => break,
            }
        }
        chain.reverse();
        chain
    }

    fn position_chain_end(&self, region: Option<NodeId>) -> Vec<(Option<NodeId>, usize)> {
        let mut chain = match region {
            Some(r) => self.position_chain(r),
            None => Vec::new(),
        };
        // One past the last child of `region`.
        chain.push((region, self.region_order.get(&region).map_or(0, |v| v.len())));
        chain
    }

    fn fresh_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    /// All regions a new node may be placed in: top level plus every loop
    /// and branch body.
    fn all_regions(&self) -> Vec<Option<NodeId>> {
        let mut regions = vec![None];
        for id in self.canonical_order() {
            if matches!(
                self.nodes[&id].kind,
                NodeKind::Loop(_) | NodeKind::Branch { .. }
            ) {
                regions.push(Some(id));
            }
        }
        regions
    }

    /// Value nodes visible from the end of `region`.
    fn visible_values(&self, region: Option<NodeId>) -> Vec<NodeId> {
        let mut vis: Vec<NodeId> = self
            .canonical_order()
            .into_iter()
            .filter(|&n| self.nodes[&n].is_value() && self.visible_at_end(n, region))
            .collect();
        // Dep nodes of the enclosing loop chain are readable regardless of
        // position.
        let mut loops = BTreeSet::new();
        let mut cur = region;
        while let Some(r) = cur {
            if matches!(self.nodes[&r].kind, NodeKind::Loop(_)) {
                loops.insert(r);
            }
            cur = self.region_of(r);
        }
        for (&id, node) in &self.nodes {
            if let NodeKind::Dep { .. } = node.kind {
                if let Some(l) = self.nearest_loop(id) {
                    if loops.contains(&l) && !vis.contains(&id) {
                        vis.push(id);
                    }
                }
            }
        }
        vis.sort();
        vis
    }

    pub(crate) fn recompute_outputs(&mut self) {
        // Outputs are the op/dep values nothing consumes through an operand
        // edge. Dep-source and branch-condition uses do not count: an
        // accumulator read only by its own carry is still the result.
        let consumed: BTreeSet<NodeId> = self
            .edges
            .iter()
            .filter_map(|e| match e.producer {
                Producer::Node(n) => Some(n),
                _ => None,
            })
            .collect();
        self.outputs = self
            .canonical_order()
            .into_iter()
            .filter(|&n| {
                matches!(self.nodes[&n].kind, NodeKind::Op(_) | NodeKind::Dep { .. })
                    && !consumed.contains(&n)
            })
            .collect();
    }

    pub(crate) fn insert_node(&mut self, kind: NodeKind, region: Option<NodeId>) -> NodeId {
        let id = self.fresh_id();
        self.nodes.insert(id, Node { id, kind });
        if let Some(r) = region {
            self.regions.insert(id, r);
        }
        self.region_order.entry(region).or_default().push(id);
        if matches!(kind, NodeKind::Loop(_) | NodeKind::Branch { .. }) {
            self.region_order.entry(Some(id)).or_default();
        }
        id
    }
}

/// Two position chains compared lexicographically: does `a` occur strictly
/// before reference point `b`?
fn chains_before(a: &[(Option<NodeId>, usize)], b: &[(Option<NodeId>, usize)]) -> bool {
    for (pa, pb) in a.iter().zip(b.iter()) {
        if pa.0 != pb.0 {
            // Different regions at the same depth implies the chains already
            // diverged at an earlier index comparison.
            return false;
        }
        match pa.1.cmp(&pb.1) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    // `a` is an ancestor prefix of `b`: the producer is an enclosing
    // loop/branch node of the reference point. Enclosing loops are readable
    // (current index); an exact prefix means a == enclosing node.
    a.len() < b.len()
}

// ---------------------------------------------------------------------------
// validate

pub fn validate(g: &ComputationGraph) -> ValidationReport {
    let mut v = Vec::new();
    let mut push = |node: Option<NodeId>, message: String| {
        v.push(Violation { node, message });
    };

    // Structural bookkeeping must be consistent before deeper checks.
    let order = g.canonical_order();
    if order.len() != g.nodes.len() {
        push(None, "region order does not cover every node exactly once".into());
        return ValidationReport { violations: v };
    }

    for (&id, node) in &g.nodes {
        if node.id != id {
            push(Some(id), "node id mismatch with map key".into());
        }
        match node.kind {
            NodeKind::Op(a) => {
                if !(1..=64).contains(&a.width) {
                    push(Some(id), format!("op width {} outside 1..=64", a.width));
                }
                if a.dtype == DType::Fixed && !(1..=a.width).contains(&a.int_bits) {
                    push(
                        Some(id),
                        format!("int_bits {} outside 1..={}", a.int_bits, a.width),
                    );
                }
                if a.op_kind.is_comparison() && a.width != 1 {
                    push(Some(id), "condition width != 1".into());
                }
                let operands = g.operands_of(id);
                if operands.len() != a.op_kind.arity() {
                    push(
                        Some(id),
                        format!(
                            "operand count {} != arity {}",
                            operands.len(),
                            a.op_kind.arity()
                        ),
                    );
                } else if a.op_kind == OpKind::Mux && g.producer_width(operands[0]) != 1 {
                    push(Some(id), "mux select width != 1".into());
                }
            }
            NodeKind::Loop(la) => {
                if la.step == 0 {
                    push(Some(id), "loop step is zero".into());
                }
                let trip = la.trip_count();
                if !(1..=64).contains(&trip) {
                    push(Some(id), format!("trip count {} outside 1..=64", trip));
                }
                if trip >= 1 && !(1..=trip).contains(&(la.unroll_factor as i64)) {
                    push(
                        Some(id),
                        format!("unroll factor {} outside 1..={}", la.unroll_factor, trip),
                    );
                }
            }
            NodeKind::Branch { condition } => match g.nodes.get(&condition) {
                Some(c) => match c.kind {
                    NodeKind::Op(a) if a.width == 1 => {}
                    NodeKind::Op(_) => push(Some(id), "condition width != 1".into()),
                    _ => push(Some(id), "branch condition is not an op node".into()),
                },
                None => push(Some(id), "branch condition references unknown node".into()),
            },
            NodeKind::Dep { distance, source } => {
                match g.nearest_loop(id) {
                    None => push(Some(id), "dep node outside any loop".into()),
                    Some(l) => {
                        let NodeKind::Loop(la) = g.nodes[&l].kind else {
                            unreachable!()
                        };
                        if distance == 0 {
                            push(Some(id), "dep distance is zero".into());
                        } else if (distance as i64) > la.trip_count() {
                            push(
                                Some(id),
                                format!(
                                    "distance {} exceeds trip count {}",
                                    distance,
                                    la.trip_count()
                                ),
                            );
                        }
                        match g.nodes.get(&source) {
                            None => push(Some(id), "dep source unknown".into()),
                            Some(s)
                                if !matches!(
                                    s.kind,
                                    NodeKind::Op(_) | NodeKind::Dep { .. }
                                ) =>
                            {
                                push(Some(id), "dep source must be an op or dep node".into())
                            }
                            Some(_) => {
                                if g.nearest_loop(source) != Some(l) {
                                    push(
                                        Some(id),
                                        "dep source not in the same nearest loop".into(),
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // Region forest: parents must be loop/branch nodes, no cycles.
    for (&child, &parent) in &g.regions {
        match g.nodes.get(&parent) {
            Some(p) if matches!(p.kind, NodeKind::Loop(_) | NodeKind::Branch { .. }) => {}
            _ => push(Some(child), "region parent is not a loop/branch node".into()),
        }
        let mut seen = BTreeSet::new();
        let mut cur = Some(parent);
        while let Some(r) = cur {
            if !seen.insert(r) {
                push(Some(child), "region nesting contains a cycle".into());
                break;
            }
            cur = g.region_of(r);
        }
    }

    // Edges: existing endpoints, contiguous slots, visibility.
    let mut slots: BTreeMap<NodeId, Vec<u32>> = BTreeMap::new();
    for e in &g.edges {
        if !g.nodes.contains_key(&e.consumer) {
            push(None, format!("edge consumer {} unknown", e.consumer));
            continue;
        }
        if let Producer::Node(p) = e.producer {
            match g.nodes.get(&p) {
                None => push(Some(e.consumer), format!("edge producer {} unknown", p)),
                Some(pn) if !pn.is_value() => {
                    push(Some(e.consumer), format!("producer {} is not a value", p))
                }
                Some(pn) => {
                    let ok = match pn.kind {
                        NodeKind::Dep { .. } => {
                            // Readable anywhere inside its nearest loop, or by
                            // ordinary visibility elsewhere.
                            let dl = g.nearest_loop(p);
                            let in_same_loop = dl.is_some()
                                && g
                                    .region_chain(e.consumer)
                                    .iter()
                                    .any(|r| Some(*r) == dl);
                            in_same_loop || g.visible_before(p, e.consumer)
                        }
                        _ => g.visible_before(p, e.consumer),
                    };
                    if !ok {
                        push(
                            Some(e.consumer),
                            format!("producer {} not in scope for {}", p, e.consumer),
                        );
                    }
                }
            }
        }
        if let Producer::Const { raw, width } = e.producer {
            if !(1..=64).contains(&width) || raw & !crate::value::mask64(width) != 0 {
                push(Some(e.consumer), "constant out of declared width".into());
            }
        }
        if let Producer::Input(i) = e.producer {
            if i as usize >= g.inputs.len() {
                push(Some(e.consumer), format!("input index {} unknown", i));
            }
        }
        slots.entry(e.consumer).or_default().push(e.slot);
    }
    for (id, mut s) in slots {
        s.sort_unstable();
        if s.iter().enumerate().any(|(i, &x)| i as u32 != x) {
            push(Some(id), "operand slots not contiguous from 0".into());
        }
    }

    // One-iteration DAG: data edges plus branch conditions, with dep nodes
    // acting as iteration sources (their source edge is the delayed one).
    let mut indeg: BTreeMap<NodeId, usize> = g.nodes.keys().map(|&k| (k, 0)).collect();
    let mut succ: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    let add_edge = |from: NodeId, to: NodeId,
                        indeg: &mut BTreeMap<NodeId, usize>,
                        succ: &mut BTreeMap<NodeId, Vec<NodeId>>| {
        succ.entry(from).or_default().push(to);
        *indeg.get_mut(&to).unwrap() += 1;
    };
    for e in &g.edges {
        if let Producer::Node(p) = e.producer {
            if g.nodes.contains_key(&p) && g.nodes.contains_key(&e.consumer) {
                add_edge(p, e.consumer, &mut indeg, &mut succ);
            }
        }
    }
    for (&id, node) in &g.nodes {
        if let NodeKind::Branch { condition } = node.kind {
            if g.nodes.contains_key(&condition) {
                add_edge(condition, id, &mut indeg, &mut succ);
            }
        }
    }
    let mut queue: Vec<NodeId> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&k, _)| k)
        .collect();
    let mut seen = 0;
    while let Some(n) = queue.pop() {
        seen += 1;
        if let Some(ss) = succ.get(&n) {
            for &s in ss.clone().iter() {
                let d = indeg.get_mut(&s).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push(s);
                }
            }
        }
    }
    if seen != g.nodes.len() {
        push(None, "one-iteration data flow contains a cycle".into());
    }

    // Reachability: every op/dep cone must bottom out at an input, constant
    // or loop index.
    for (&id, node) in &g.nodes {
        if matches!(node.kind, NodeKind::Op(_)) && !reaches_source(g, id) {
            push(Some(id), "node not reachable from an input or constant".into());
        }
    }

    // Outputs must be exactly the sink value nodes in program order.
    let mut expect = g.clone();
    expect.recompute_outputs();
    if expect.outputs != g.outputs {
        push(None, "outputs field does not match derived sink set".into());
    }

    ValidationReport { violations: v }
}

impl ComputationGraph {
    /// Is producer node `p` in scope at consumer node `c`'s position?
    fn visible_before(&self, p: NodeId, c: NodeId) -> bool {
        let pc = self.position_chain(p);
        let cc = self.position_chain(c);
        chains_before(&pc, &cc)
    }
}

fn reaches_source(g: &ComputationGraph, id: NodeId) -> bool {
    let mut stack = vec![id];
    let mut seen = BTreeSet::new();
    while let Some(n) = stack.pop() {
        if !seen.insert(n) {
            continue;
        }
        match g.nodes[&n].kind {
            // Loop indices derive from constant bounds; dep reads bottom out
            // at the constant 0 initial value.
            NodeKind::Loop(_) | NodeKind::Dep { .. } => return true,
            _ => {}
        }
        for p in g.operands_of(n) {
            match p {
                Producer::Input(_) | Producer::Const { .. } => return true,
                Producer::Node(m) => stack.push(m),
            }
        }
    }
    false
}

// ---------------------------------------------------------------------------
// apply_action

pub fn apply_action<R: Rng>(
    g: &ComputationGraph,
    kind: ActionKind,
    rng: &mut R,
) -> Result<ComputationGraph, GraphError> {
    apply_action_with(g, kind, &GenParams::default(), rng)
}

pub fn apply_action_with<R: Rng>(
    g: &ComputationGraph,
    kind: ActionKind,
    params: &GenParams,
    rng: &mut R,
) -> Result<ComputationGraph, GraphError> {
    let mut out = g.clone();
    let action = match kind {
        ActionKind::AddOp => add_op(&mut out, params, rng)?,
        ActionKind::AddLoop => add_loop(&mut out, params, rng)?,
        ActionKind::AddBranch => add_branch(&mut out, params, rng)?,
        ActionKind::AddDep => add_dep(&mut out, params, rng)?,
    };
    out.action_log.push(action);
    out.recompute_outputs();
    debug_assert!(validate(&out).is_valid(), "action produced invalid graph");
    Ok(out)
}

fn choose<'a, T, R: Rng>(items: &'a [T], rng: &mut R) -> &'a T {
    items.choose(rng).expect("choose from non-empty slice")
}

fn sample_operand<R: Rng>(
    g: &ComputationGraph,
    candidates: &[NodeId],
    width_hint: u32,
    params: &GenParams,
    rng: &mut R,
) -> Producer {
    let use_const =
        candidates.is_empty() && g.inputs.is_empty() || rng.random_bool(params.const_prob);
    if use_const {
        let width = width_hint;
        return Producer::Const {
            raw: rng.random::<u64>() & crate::value::mask64(width),
            width,
        };
    }
    let n_nodes = candidates.len();
    let n_inputs = g.inputs.len();
    let total = n_nodes + n_inputs;
    if total == 0 {
        return Producer::Const {
            raw: rng.random::<u64>() & crate::value::mask64(width_hint),
            width: width_hint,
        };
    }
    let pick = rng.random_range(0..total);
    if pick < n_nodes {
        Producer::Node(candidates[pick])
    } else {
        Producer::Input((pick - n_nodes) as u32)
    }
}

fn sample_op_attrs<R: Rng>(params: &GenParams, rng: &mut R) -> OpAttrs {
    let op_kind = *choose(&ALL_OP_KINDS, rng);
    let width = if op_kind.is_comparison() {
        1
    } else {
        rng.random_range(1..=params.max_width)
    };
    let dtype = if width > 1 && rng.random_bool(params.fixed_prob) {
        DType::Fixed
    } else {
        DType::Int
    };
    let int_bits = match dtype {
        DType::Int => width,
        DType::Fixed => rng.random_range(1..=width),
    };
    OpAttrs {
        op_kind,
        width,
        dtype,
        signed: rng.random_bool(0.5),
        int_bits,
        rounding: if rng.random_bool(0.5) {
            Rounding::Truncate
        } else {
            Rounding::RoundHalfUp
        },
        saturation: if rng.random_bool(0.5) {
            Saturation::Wrap
        } else {
            Saturation::Saturate
        },
    }
}

fn add_op<R: Rng>(
    g: &mut ComputationGraph,
    params: &GenParams,
    rng: &mut R,
) -> Result<ConstructionAction, GraphError> {
    let regions = g.all_regions();
    let region = *choose(&regions, rng);
    let attrs = sample_op_attrs(params, rng);
    let visible = g.visible_values(region);
    let mut operands = Vec::new();
    for slot in 0..attrs.op_kind.arity() {
        let p = if attrs.op_kind == OpKind::Mux && slot == 0 {
            // Select needs a width-1 producer.
            let ones: Vec<NodeId> = visible
                .iter()
                .copied()
                .filter(|&n| g.node_width(n) == 1)
                .collect();
            if ones.is_empty() {
                Producer::Const {
                    raw: rng.random_range(0..=1),
                    width: 1,
                }
            } else if rng.random_bool(params.const_prob) {
                Producer::Const {
                    raw: rng.random_range(0..=1),
                    width: 1,
                }
            } else {
                Producer::Node(*choose(&ones, rng))
            }
        } else {
            sample_operand(g, &visible, attrs.width.max(1), params, rng)
        };
        operands.push(p);
    }
    let id = g.insert_node(NodeKind::Op(attrs), region);
    for (slot, &producer) in operands.iter().enumerate() {
        g.edges.push(DataEdge {
            producer,
            consumer: id,
            slot: slot as u32,
        });
    }
    Ok(ConstructionAction {
        kind: ActionKind::AddOp,
        region,
        node: id,
        operands,
        rewired: None,
    })
}

fn add_loop<R: Rng>(
    g: &mut ComputationGraph,
    params: &GenParams,
    rng: &mut R,
) -> Result<ConstructionAction, GraphError> {
    let regions = g.all_regions();
    let region = *choose(&regions, rng);
    let trip = rng.random_range(1..=params.max_trip);
    let start = rng.random_range(-4..=4i64);
    let step = *choose(&[-3i64, -2, -1, 1, 2, 3], rng);
    let attrs = LoopAttrs {
        start,
        end: start + step * trip,
        step,
        pipelined: rng.random_bool(params.pipelined_prob),
        flattened: rng.random_bool(params.flattened_prob),
        unroll_factor: rng.random_range(1..=trip) as u32,
        fully_unrolled: rng.random_bool(params.fully_unrolled_prob),
    };
    let id = g.insert_node(NodeKind::Loop(attrs), region);
    Ok(ConstructionAction {
        kind: ActionKind::AddLoop,
        region,
        node: id,
        operands: vec![],
        rewired: None,
    })
}

fn add_branch<R: Rng>(
    g: &mut ComputationGraph,
    params: &GenParams,
    rng: &mut R,
) -> Result<ConstructionAction, GraphError> {
    let _ = params;
    // Feasible regions: a width-1 op node must be visible.
    let mut feasible = Vec::new();
    for region in g.all_regions() {
        let conds: Vec<NodeId> = g
            .visible_values(region)
            .into_iter()
            .filter(|&n| matches!(g.nodes[&n].kind, NodeKind::Op(a) if a.width == 1))
            .collect();
        if !conds.is_empty() {
            feasible.push((region, conds));
        }
    }
    if feasible.is_empty() {
        return Err(GraphError::PlacementInfeasible(
            "no width-1 op node available as branch condition".into(),
        ));
    }
    let (region, conds) = choose(&feasible, rng).clone();
    let condition = *choose(&conds, rng);
    let id = g.insert_node(NodeKind::Branch { condition }, region);
    Ok(ConstructionAction {
        kind: ActionKind::AddBranch,
        region,
        node: id,
        operands: vec![Producer::Node(condition)],
        rewired: None,
    })
}

fn add_dep<R: Rng>(
    g: &mut ComputationGraph,
    params: &GenParams,
    rng: &mut R,
) -> Result<ConstructionAction, GraphError> {
    // Candidate loops: must contain at least one value node.
    let mut feasible: Vec<(NodeId, Vec<NodeId>)> = Vec::new();
    for (&id, node) in &g.nodes {
        if let NodeKind::Loop(_) = node.kind {
            let members: Vec<NodeId> = g
                .nodes
                .iter()
                .filter(|(&m, n)| {
                    matches!(n.kind, NodeKind::Op(_) | NodeKind::Dep { .. })
                        && g.nearest_loop(m) == Some(id)
                })
                .map(|(&m, _)| m)
                .collect();
            if !members.is_empty() {
                feasible.push((id, members));
            }
        }
    }
    if feasible.is_empty() {
        return Err(GraphError::PlacementInfeasible(
            "no loop with a value node to carry".into(),
        ));
    }
    let (loop_id, members) = choose(&feasible, rng).clone();
    let NodeKind::Loop(la) = g.nodes[&loop_id].kind else {
        unreachable!()
    };
    let source = *choose(&members, rng);
    let max_d = (la.trip_count() as u32).min(params.max_dep_distance).max(1);
    let distance = rng.random_range(1..=max_d);
    let id = g.insert_node(NodeKind::Dep { distance, source }, Some(loop_id));

    // Optionally rewire one existing operand slot inside the loop onto the
    // new dep node; this is what creates genuine recurrences such as
    // accumulators.
    let mut rewired = None;
    if rng.random_bool(params.rewire_prob) {
        let dep_w = g.node_width(id);
        let slots: Vec<(NodeId, u32)> = g
            .edges
            .iter()
            .filter(|e| {
                e.consumer != id
                    && g.nearest_loop(e.consumer) == Some(loop_id)
                    && match g.nodes[&e.consumer].kind {
                        NodeKind::Op(a) => {
                            // A mux select must stay width 1.
                            !(a.op_kind == OpKind::Mux && e.slot == 0 && dep_w != 1)
                        }
                        _ => false,
                    }
            })
            .map(|e| (e.consumer, e.slot))
            .collect();
        if !slots.is_empty() {
            let &(consumer, slot) = choose(&slots, rng);
            for e in &mut g.edges {
                if e.consumer == consumer && e.slot == slot {
                    e.producer = Producer::Node(id);
                }
            }
            rewired = Some((consumer, slot));
        }
    }
    Ok(ConstructionAction {
        kind: ActionKind::AddDep,
        region: Some(loop_id),
        node: id,
        operands: vec![Producer::Node(source)],
        rewired,
    })
}

// ---------------------------------------------------------------------------
// generate_fresh

pub fn generate_fresh<R: Rng>(
    rng: &mut R,
    length: usize,
) -> Result<ComputationGraph, GraphError> {
    generate_fresh_with(rng, length, &GenParams::default())
}

pub fn generate_fresh_with<R: Rng>(
    rng: &mut R,
    length: usize,
    params: &GenParams,
) -> Result<ComputationGraph, GraphError> {
    assert!(
        (1..=ACTION_CAP).contains(&length),
        "length must be in 1..=40"
    );
    let n_inputs = rng.random_range(params.num_inputs.0..=params.num_inputs.1);
    let inputs = (0..n_inputs)
        .map(|i| PrimaryInput {
            name: format!("in{}", i),
            width: *choose(&params.input_width_choices, rng),
            dtype: DType::Int,
        })
        .collect();
    let mut g = ComputationGraph::new(inputs);
    let mut accepted = 0;
    let mut failures = 0;
    while accepted < length {
        let kind = *choose(&ALL_ACTION_KINDS, rng);
        match apply_action_with(&g, kind, params, rng) {
            Ok(next) => {
                g = next;
                accepted += 1;
            }
            Err(GraphError::PlacementInfeasible(_)) => {
                failures += 1;
                if failures >= 10 * length {
                    return Err(GraphError::GenerationStalled(failures));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// canonical hash

/// 256-bit digest invariant under node relabeling: node ids are replaced by
/// canonical preorder positions before hashing. The action log is excluded
/// (it records provenance, not structure).
pub fn canonical_hash(g: &ComputationGraph) -> [u8; 32] {
    let order = g.canonical_order();
    let pos: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut h = Sha256::new();
    h.update(GRAPH_SCHEMA_VERSION.as_bytes());
    for inp in &g.inputs {
        h.update(b"i");
        h.update(inp.name.as_bytes());
        h.update(inp.width.to_le_bytes());
        h.update([inp.dtype as u8]);
    }
    for &n in &order {
        h.update(b"n");
        h.update((pos[&n] as u64).to_le_bytes());
        h.update(
            g.region_of(n)
                .map_or(u64::MAX, |r| pos[&r] as u64)
                .to_le_bytes(),
        );
        match g.nodes[&n].kind {
            NodeKind::Op(a) => {
                h.update(b"op");
                h.update(serde_json::to_vec(&a).unwrap());
                for p in g.operands_of(n) {
                    hash_producer(&mut h, p, &pos);
                }
            }
            NodeKind::Loop(a) => {
                h.update(b"lp");
                h.update(serde_json::to_vec(&a).unwrap());
            }
            NodeKind::Branch { condition } => {
                h.update(b"br");
                h.update((pos[&condition] as u64).to_le_bytes());
            }
            NodeKind::Dep { distance, source } => {
                h.update(b"dp");
                h.update(distance.to_le_bytes());
                h.update((pos[&source] as u64).to_le_bytes());
            }
        }
    }
    for &o in &g.outputs {
        h.update(b"o");
        h.update((pos[&o] as u64).to_le_bytes());
    }
    h.finalize().into()
}

fn hash_producer(h: &mut Sha256, p: Producer, pos: &BTreeMap<NodeId, usize>) {
    match p {
        Producer::Node(n) => {
            h.update(b"N");
            h.update((pos[&n] as u64).to_le_bytes());
        }
        Producer::Input(i) => {
            h.update(b"I");
            h.update(i.to_le_bytes());
        }
        Producer::Const { raw, width } => {
            h.update(b"C");
            h.update(raw.to_le_bytes());
            h.update(width.to_le_bytes());
        }
    }
}

pub fn hash_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{:02x}", b)).collect()
}

// ---------------------------------------------------------------------------
// serialize / deserialize

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    version: String,
    inputs: Vec<PrimaryInput>,
    nodes: Vec<Node>,
    edges: Vec<DataEdge>,
    regions: BTreeMap<String, NodeId>,
    region_order: Vec<(Option<NodeId>, Vec<NodeId>)>,
    outputs: Vec<NodeId>,
    action_log: Vec<ConstructionAction>,
}

pub fn serialize(g: &ComputationGraph) -> Vec<u8> {
    let doc = GraphDoc {
        version: GRAPH_SCHEMA_VERSION.into(),
        inputs: g.inputs.clone(),
        nodes: g.nodes.values().copied().collect(),
        edges: g.edges.clone(),
        regions: g
            .regions
            .iter()
            .map(|(k, v)| (k.0.to_string(), *v))
            .collect(),
        region_order: g.region_order.iter().map(|(k, v)| (*k, v.clone())).collect(),
        outputs: g.outputs.clone(),
        action_log: g.action_log.clone(),
    };
    let mut bytes = serde_json::to_vec_pretty(&doc).unwrap();
    bytes.push(b'\n');
    bytes
}

pub fn deserialize(bytes: &[u8]) -> Result<ComputationGraph, GraphError> {
    let doc: GraphDoc = serde_json::from_slice(bytes)
        .map_err(|e| GraphError::SchemaViolation(e.to_string()))?;
    if doc.version != GRAPH_SCHEMA_VERSION {
        return Err(GraphError::SchemaViolation(format!(
            "unknown schema version '{}', expected '{}'",
            doc.version, GRAPH_SCHEMA_VERSION
        )));
    }
    let mut regions = BTreeMap::new();
    for (k, v) in doc.regions {
        let id: u32 = k
            .parse()
            .map_err(|_| GraphError::SchemaViolation(format!("bad node id '{}'", k)))?;
        regions.insert(NodeId(id), v);
    }
    let nodes: BTreeMap<NodeId, Node> = doc.nodes.into_iter().map(|n| (n.id, n)).collect();
    let next_id = nodes.keys().map(|n| n.0 + 1).max().unwrap_or(0);
    let g = ComputationGraph {
        inputs: doc.inputs,
        nodes,
        edges: doc.edges,
        regions,
        region_order: doc.region_order.into_iter().collect(),
        outputs: doc.outputs,
        action_log: doc.action_log,
        next_id,
    };
    let report = validate(&g);
    if !report.is_valid() {
        return Err(GraphError::SchemaViolation(format!(
            "document decodes to an invalid graph: {}",
            report.violations[0].message
        )));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn one_input_graph(width: u32) -> ComputationGraph {
        ComputationGraph::new(vec![PrimaryInput {
            name: "x".into(),
            width,
            dtype: DType::Int,
        }])
    }

    #[test]
    fn empty_graph_is_valid() {
        let g = one_input_graph(8);
        assert!(validate(&g).is_valid());
    }

    #[test]
    fn wide_branch_condition_is_flagged() {
        let mut g = one_input_graph(8);
        let attrs = OpAttrs {
            op_kind: OpKind::Add,
            width: 8,
            dtype: DType::Int,
            signed: false,
            int_bits: 8,
            rounding: Rounding::Truncate,
            saturation: Saturation::Wrap,
        };
        let op = g.insert_node(NodeKind::Op(attrs), None);
        g.edges.push(DataEdge {
            producer: Producer::Input(0),
            consumer: op,
            slot: 0,
        });
        g.edges.push(DataEdge {
            producer: Producer::Input(0),
            consumer: op,
            slot: 1,
        });
        g.insert_node(NodeKind::Branch { condition: op }, None);
        g.recompute_outputs();
        let report = validate(&g);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].message.contains("condition width != 1"));
    }

    #[test]
    fn dep_distance_exceeding_trip_is_flagged() {
        let mut g = one_input_graph(8);
        let la = LoopAttrs {
            start: 0,
            end: 4,
            step: 1,
            pipelined: false,
            flattened: false,
            unroll_factor: 1,
            fully_unrolled: false,
        };
        assert_eq!(la.trip_count(), 4);
        let l = g.insert_node(NodeKind::Loop(la), None);
        let attrs = OpAttrs {
            op_kind: OpKind::Add,
            width: 8,
            dtype: DType::Int,
            signed: false,
            int_bits: 8,
            rounding: Rounding::Truncate,
            saturation: Saturation::Wrap,
        };
        let op = g.insert_node(NodeKind::Op(attrs), Some(l));
        g.edges.push(DataEdge {
            producer: Producer::Input(0),
            consumer: op,
            slot: 0,
        });
        g.edges.push(DataEdge {
            producer: Producer::Input(0),
            consumer: op,
            slot: 1,
        });
        g.insert_node(
            NodeKind::Dep {
                distance: 5,
                source: op,
            },
            Some(l),
        );
        g.recompute_outputs();
        let report = validate(&g);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0]
            .message
            .contains("distance 5 exceeds trip count 4"));
    }

    #[test]
    fn add_dep_without_loop_is_infeasible() {
        let g = one_input_graph(8);
        let err = apply_action(&g, ActionKind::AddDep, &mut rng(1)).unwrap_err();
        assert!(matches!(err, GraphError::PlacementInfeasible(_)));
    }

    #[test]
    fn add_op_operands_come_from_legal_placements() {
        // With a single 8-bit input, every operand must be that input or a
        // constant; over many seeds both cases show up, including (x, x).
        let g = one_input_graph(8);
        let mut saw_input_pair = false;
        for seed in 0..200 {
            let out = apply_action(&g, ActionKind::AddOp, &mut rng(seed)).unwrap();
            let action = out.action_log.last().unwrap();
            for p in &action.operands {
                match p {
                    Producer::Input(0) | Producer::Const { .. } => {}
                    other => panic!("illegal operand {:?}", other),
                }
            }
            if action.operands.len() == 2
                && action.operands.iter().all(|p| matches!(p, Producer::Input(0)))
            {
                saw_input_pair = true;
            }
        }
        assert!(saw_input_pair, "slot reuse (x, x) never sampled");
    }

    #[test]
    fn action_closure_and_monotone_growth() {
        let mut g = one_input_graph(8);
        let mut r = rng(7);
        let mut count = 0;
        for _ in 0..60 {
            let kind = ALL_ACTION_KINDS[r.random_range(0..4)];
            if let Ok(next) = apply_action(&g, kind, &mut r) {
                assert_eq!(next.nodes.len(), g.nodes.len() + 1);
                assert!(validate(&next).is_valid());
                g = next;
                count += 1;
            }
        }
        assert!(count > 20);
    }

    #[test]
    fn generate_fresh_is_deterministic() {
        let a = generate_fresh(&mut rng(42), 12).unwrap();
        let b = generate_fresh(&mut rng(42), 12).unwrap();
        assert_eq!(serialize(&a), serialize(&b));
        assert_eq!(a.action_log.len(), 12);
    }

    #[test]
    fn generate_fresh_respects_cap() {
        let g = generate_fresh(&mut rng(3), ACTION_CAP).unwrap();
        assert_eq!(g.action_log.len(), 40);
        assert!(validate(&g).is_valid());
    }

    #[test]
    fn fresh_length_one_has_one_node() {
        let g = generate_fresh(&mut rng(5), 1).unwrap();
        assert_eq!(g.nodes.len(), 1);
    }

    #[test]
    fn hash_invariant_under_relabeling() {
        for seed in 0..20 {
            let g = generate_fresh(&mut rng(seed), 10).unwrap();
            let mut r = rng(seed + 1000);
            let remapped = relabel(&g, &mut r);
            assert_eq!(canonical_hash(&g), canonical_hash(&remapped));
        }
    }

    #[test]
    fn hash_differs_with_extra_node() {
        let g = generate_fresh(&mut rng(9), 6).unwrap();
        let mut r = rng(10);
        let mut bigger = g.clone();
        loop {
            if let Ok(next) = apply_action(&bigger, ActionKind::AddOp, &mut r) {
                bigger = next;
                break;
            }
        }
        assert_ne!(canonical_hash(&g), canonical_hash(&bigger));
    }

    #[test]
    fn hash_equal_for_empty_graphs_with_same_signature() {
        let a = one_input_graph(8);
        let b = one_input_graph(8);
        assert_eq!(canonical_hash(&a), canonical_hash(&b));
    }

    #[test]
    fn serde_round_trip_many_random_graphs() {
        for seed in 0..1000u64 {
            let len = 1 + (seed % 15) as usize;
            let g = generate_fresh(&mut rng(seed), len).unwrap();
            let bytes = serialize(&g);
            let back = deserialize(&bytes).unwrap();
            assert_eq!(g, back, "round trip failed for seed {}", seed);
        }
    }

    #[test]
    fn truncated_stream_is_schema_violation() {
        let g = generate_fresh(&mut rng(11), 5).unwrap();
        let bytes = serialize(&g);
        let err = deserialize(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, GraphError::SchemaViolation(_)));
    }

    #[test]
    fn unknown_version_names_the_version() {
        let g = generate_fresh(&mut rng(12), 3).unwrap();
        let text = String::from_utf8(serialize(&g)).unwrap();
        let bad = text.replace("graph/v1", "graph/v9");
        let err = deserialize(bad.as_bytes()).unwrap_err();
        match err {
            GraphError::SchemaViolation(msg) => assert!(msg.contains("graph/v9")),
            other => panic!("unexpected error {:?}", other),
        }
    }

    /// Remap all node ids through a random order-scrambling bijection.
    fn relabel<R: Rng>(g: &ComputationGraph, rng: &mut R) -> ComputationGraph {
        use rand::seq::SliceRandom;
        let ids: Vec<NodeId> = g.nodes.keys().copied().collect();
        let mut shuffled = ids.clone();
        shuffled.shuffle(rng);
        let map: BTreeMap<NodeId, NodeId> =
            ids.iter().copied().zip(shuffled.iter().copied()).collect();
        let m = |id: NodeId| map[&id];
        let mp = |p: Producer| match p {
            Producer::Node(n) => Producer::Node(m(n)),
            other => other,
        };
        ComputationGraph {
            inputs: g.inputs.clone(),
            nodes: g
                .nodes
                .values()
                .map(|n| {
                    let kind = match n.kind {
                        NodeKind::Branch { condition } => NodeKind::Branch {
                            condition: m(condition),
                        },
                        NodeKind::Dep { distance, source } => NodeKind::Dep {
                            distance,
                            source: m(source),
                        },
                        k => k,
                    };
                    (m(n.id), Node { id: m(n.id), kind })
                })
                .collect(),
            edges: g
                .edges
                .iter()
                .map(|e| DataEdge {
                    producer: mp(e.producer),
                    consumer: m(e.consumer),
                    slot: e.slot,
                })
                .collect(),
            regions: g.regions.iter().map(|(k, v)| (m(*k), m(*v))).collect(),
            region_order: g
                .region_order
                .iter()
                .map(|(k, v)| (k.map(&m), v.iter().map(|&n| m(n)).collect()))
                .collect(),
            outputs: g.outputs.iter().map(|&n| m(n)).collect(),
            action_log: vec![],
            next_id: g.next_id,
        }
    }
}
