//! Elaborated graph IR and the unroll pass.
//!
//! Scheduling works on this flattened form: bodies are explicit vectors,
//! operand references carry loop-index offsets, and unrolling rewrites loops
//! into replicated bodies with dep distances re-derived for the grouped
//! iteration space.

use std::collections::BTreeMap;

use crate::graph::{
    ComputationGraph, LoopAttrs, NodeId, NodeKind, OpAttrs, PrimaryInput, Producer,
    LOOP_INDEX_WIDTH,
};

use super::CompileError;

pub type EId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ERef {
    Node(EId),
    Input(u32),
    Const { raw: u64, width: u32 },
    /// The running index of a loop, plus a constant offset (16-bit wrap).
    LoopIdx { lp: EId, offset: i64 },
}

#[derive(Debug, Clone)]
pub enum EKind {
    Op { attrs: OpAttrs, operands: Vec<ERef> },
    Loop { attrs: LoopAttrs, body: Vec<EId> },
    Branch { cond: ERef, body: Vec<EId> },
    Dep { distance: u32, source: EId },
}

#[derive(Debug, Clone)]
pub struct ENode {
    pub kind: EKind,
    pub width: u32,
    pub frac: u32,
}

#[derive(Debug, Clone)]
pub struct ElabGraph {
    pub inputs: Vec<PrimaryInput>,
    pub nodes: Vec<ENode>,
    pub top: Vec<EId>,
    pub outputs: Vec<EId>,
}

impl ElabGraph {
    pub fn node(&self, id: EId) -> &ENode {
        &self.nodes[id]
    }

    pub fn ref_width(&self, r: ERef) -> u32 {
        match r {
            ERef::Node(n) => self.nodes[n].width,
            ERef::Input(i) => self.inputs[i as usize].width,
            ERef::Const { width, .. } => width,
            ERef::LoopIdx { .. } => LOOP_INDEX_WIDTH,
        }
    }

    pub fn ref_frac(&self, r: ERef) -> u32 {
        match r {
            ERef::Node(n) => self.nodes[n].frac,
            _ => 0,
        }
    }
}

/// Translate a validated computation graph into the elaborated IR.
pub fn from_graph(g: &ComputationGraph) -> ElabGraph {
    let order = g.canonical_order();
    let idmap: BTreeMap<NodeId, EId> = order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let conv = |p: Producer| -> ERef {
        match p {
            Producer::Input(i) => ERef::Input(i),
            Producer::Const { raw, width } => ERef::Const { raw, width },
            Producer::Node(n) => match g.nodes[&n].kind {
                NodeKind::Loop(_) => ERef::LoopIdx {
                    lp: idmap[&n],
                    offset: 0,
                },
                _ => ERef::Node(idmap[&n]),
            },
        }
    };
    let mut nodes = Vec::with_capacity(order.len());
    for &n in &order {
        let node = &g.nodes[&n];
        let kind = match node.kind {
            NodeKind::Op(attrs) => EKind::Op {
                attrs,
                operands: g.operands_of(n).into_iter().map(conv).collect(),
            },
            NodeKind::Loop(attrs) => EKind::Loop {
                attrs,
                body: g.region_order[&Some(n)].iter().map(|c| idmap[c]).collect(),
            },
            NodeKind::Branch { condition } => EKind::Branch {
                cond: conv(Producer::Node(condition)),
                body: g.region_order[&Some(n)].iter().map(|c| idmap[c]).collect(),
            },
            NodeKind::Dep { distance, source } => EKind::Dep {
                distance,
                source: idmap[&source],
            },
        };
        nodes.push(ENode {
            kind,
            width: g.node_width(n).max(1),
            frac: g.node_frac(n),
        });
    }
    ElabGraph {
        inputs: g.inputs.clone(),
        nodes,
        top: g.region_order[&None].iter().map(|c| idmap[c]).collect(),
        outputs: g.outputs.iter().map(|o| idmap[o]).collect(),
    }
}

struct ReplicaCtx {
    /// Source loop this context replicates.
    lp: EId,
    /// Replica index within the group.
    r: i64,
    /// Unroll factor.
    u: i64,
    /// Destination loop id when the loop survives (trip/u > 1).
    kept: Option<EId>,
    orig: LoopAttrs,
    /// Per-replica resolution of body-local source ids.
    replica_maps: Vec<BTreeMap<EId, ERef>>,
}

struct Unroller<'a> {
    src: &'a ElabGraph,
    dst_nodes: Vec<ENode>,
    /// Stack of loop replica contexts, innermost last.
    stack: Vec<ReplicaCtx>,
    /// Final-index resolution for completed loops.
    finished_loops: BTreeMap<EId, ERef>,
    budget: usize,
    /// (dst dep id, src source id, replica index) to patch after a group.
    patches: Vec<(EId, EId, usize)>,
}

/// Expand fully/partially unrolled loops. `honor_unroll` is false for the
/// Basic strategy, which ignores every pragma attribute.
pub fn unroll(
    src: &ElabGraph,
    honor_unroll: bool,
    budget: usize,
) -> Result<ElabGraph, CompileError> {
    let mut u = Unroller {
        src,
        dst_nodes: Vec::new(),
        stack: Vec::new(),
        finished_loops: BTreeMap::new(),
        budget,
        patches: Vec::new(),
    };
    let mut resolve: BTreeMap<EId, ERef> = BTreeMap::new();
    let mut top = u.process_body(&src.top, honor_unroll, &mut resolve)?;
    let outputs = src
        .outputs
        .iter()
        .map(|&o| match resolve.get(&o) {
            Some(ERef::Node(n)) => *n,
            // An output can resolve to a constant or final loop index (a dep
            // in a fully unrolled loop); wrap it so it exists as a node.
            Some(other) => {
                let id = u.materialize(*other);
                top.push(id);
                id
            }
            None => panic!("output not resolved"),
        })
        .collect();
    Ok(ElabGraph {
        inputs: src.inputs.clone(),
        nodes: u.dst_nodes,
        top,
        outputs,
    })
}

impl<'a> Unroller<'a> {
    fn push_node(&mut self, n: ENode) -> Result<EId, CompileError> {
        if self.dst_nodes.len() >= self.budget {
            return Err(CompileError::ResourceBound {
                nodes: self.dst_nodes.len(),
            });
        }
        self.dst_nodes.push(n);
        Ok(self.dst_nodes.len() - 1)
    }

    /// Wrap a non-node reference into a single-operand identity when a node
    /// id is required (unrolled outputs resolving to constants or indices).
    fn materialize(&mut self, r: ERef) -> EId {
        let width = self.dst_ref_width(r);
        let attrs = OpAttrs {
            op_kind: crate::graph::OpKind::Or,
            width,
            dtype: crate::graph::DType::Int,
            signed: false,
            int_bits: width,
            rounding: crate::graph::Rounding::Truncate,
            saturation: crate::graph::Saturation::Wrap,
        };
        let zero = ERef::Const { raw: 0, width };
        let n = ENode {
            kind: EKind::Op {
                attrs,
                operands: vec![r, zero],
            },
            width,
            frac: 0,
        };
        self.dst_nodes.push(n);
        self.dst_nodes.len() - 1
    }

    fn dst_ref_width(&self, r: ERef) -> u32 {
        match r {
            ERef::Node(n) => self.dst_nodes[n].width,
            ERef::Input(i) => self.src.inputs[i as usize].width,
            ERef::Const { width, .. } => width,
            ERef::LoopIdx { .. } => LOOP_INDEX_WIDTH,
        }
    }

    fn map_ref(&self, r: ERef, resolve: &BTreeMap<EId, ERef>) -> ERef {
        match r {
            ERef::Node(n) => *resolve.get(&n).expect("operand resolved before use"),
            ERef::LoopIdx { lp, offset } => {
                // Inside the loop: index of the current replica. Outside: the
                // final index of a completed loop.
                for ctx in self.stack.iter().rev() {
                    if ctx.lp == lp {
                        let off = offset + ctx.r * ctx.orig.step;
                        return match ctx.kept {
                            Some(dst) => ERef::LoopIdx {
                                lp: dst,
                                offset: off,
                            },
                            None => idx_const(ctx.orig.start + off),
                        };
                    }
                }
                match self.finished_loops.get(&lp).expect("loop ref after processing") {
                    ERef::LoopIdx { lp: dst, offset: o } => ERef::LoopIdx {
                        lp: *dst,
                        offset: o + offset,
                    },
                    ERef::Const { raw, .. } => idx_const(*raw as i16 as i64 + offset),
                    other => *other,
                }
            }
            other => other,
        }
    }

    /// Resolve every dep node carried by the loop being replicated, before
    /// any body op is processed (deps are readable loop-wide, including by
    /// ops that precede them).
    fn resolve_deps(
        &mut self,
        deps: &[EId],
        resolve: &mut BTreeMap<EId, ERef>,
        out: &mut Vec<EId>,
    ) -> Result<(), CompileError> {
        for &item in deps {
            let (dist, dep_src) = match &self.src.nodes[item].kind {
                EKind::Dep { distance, source } => (*distance, *source),
                _ => unreachable!(),
            };
            let ctx = self.stack.last().expect("dep inside a loop context");
            let (r, u) = (ctx.r, ctx.u);
            let d = dist as i64;
            if d <= r {
                // Same replica group: a direct wire to an earlier copy.
                let src_val = ctx.replica_maps[(r - d) as usize]
                    .get(&dep_src)
                    .copied()
                    .expect("dep source resolved in earlier replica");
                resolve.insert(item, src_val);
            } else {
                let delta = (d - r + u - 1) / u;
                let r_prime = (r - d).rem_euclid(u);
                let w = self.src.nodes[item].width;
                let frac = self.src.nodes[item].frac;
                match ctx.kept {
                    Some(_) => {
                        let id = self.push_node(ENode {
                            kind: EKind::Dep {
                                distance: delta as u32,
                                source: usize::MAX, // patched after the group
                            },
                            width: w,
                            frac,
                        })?;
                        self.patches.push((id, dep_src, r_prime as usize));
                        resolve.insert(item, ERef::Node(id));
                        out.push(id);
                    }
                    None => {
                        // Loop vanished: the read always precedes the start.
                        resolve.insert(item, ERef::Const { raw: 0, width: w });
                    }
                }
            }
        }
        Ok(())
    }

    fn process_body(
        &mut self,
        body: &[EId],
        honor_unroll: bool,
        resolve: &mut BTreeMap<EId, ERef>,
    ) -> Result<Vec<EId>, CompileError> {
        let mut out = Vec::new();
        for &item in body {
            match self.src.nodes[item].kind.clone() {
                EKind::Op { attrs, operands } => {
                    let ops = operands.iter().map(|&o| self.map_ref(o, resolve)).collect();
                    let id = self.push_node(ENode {
                        kind: EKind::Op {
                            attrs,
                            operands: ops,
                        },
                        width: self.src.nodes[item].width,
                        frac: self.src.nodes[item].frac,
                    })?;
                    resolve.insert(item, ERef::Node(id));
                    out.push(id);
                }
                EKind::Branch { cond, body } => {
                    let c = self.map_ref(cond, resolve);
                    let inner = self.process_body(&body, honor_unroll, resolve)?;
                    let id = self.push_node(ENode {
                        kind: EKind::Branch {
                            cond: c,
                            body: inner,
                        },
                        width: 1,
                        frac: 0,
                    })?;
                    out.push(id);
                }
                EKind::Dep { .. } => {
                    // Handled in the pre-pass.
                }
                EKind::Loop { attrs, body } => {
                    let ids = self.process_loop(item, attrs, &body, honor_unroll, resolve)?;
                    out.extend(ids);
                }
            }
        }
        Ok(out)
    }

    fn process_loop(
        &mut self,
        lp: EId,
        attrs: LoopAttrs,
        body: &[EId],
        honor_unroll: bool,
        resolve: &mut BTreeMap<EId, ERef>,
    ) -> Result<Vec<EId>, CompileError> {
        let trip = attrs.trip_count();
        let u = if !honor_unroll {
            1
        } else if attrs.fully_unrolled {
            trip
        } else {
            // Largest divisor of the trip count not exceeding the factor.
            let mut d = (attrs.unroll_factor as i64).min(trip).max(1);
            while trip % d != 0 {
                d -= 1;
            }
            d
        };
        let trip2 = trip / u;
        // A surviving single-iteration loop is only kept when pragmas are
        // ignored entirely (Basic); otherwise it splices into the parent.
        let keep = if honor_unroll { trip2 > 1 } else { true };

        let kept = if keep {
            let attrs2 = LoopAttrs {
                start: attrs.start,
                end: attrs.end,
                step: attrs.step * u,
                pipelined: attrs.pipelined,
                flattened: attrs.flattened,
                unroll_factor: 1,
                fully_unrolled: false,
            };
            let id = self.push_node(ENode {
                kind: EKind::Loop {
                    attrs: attrs2,
                    body: Vec::new(),
                },
                width: LOOP_INDEX_WIDTH,
                frac: 0,
            })?;
            Some(id)
        } else {
            None
        };

        self.stack.push(ReplicaCtx {
            lp,
            r: 0,
            u,
            kept,
            orig: attrs,
            replica_maps: Vec::new(),
        });
        let patch_base = self.patches.len();
        let deps = collect_deps_shallow(self.src, body);
        let mut new_body = Vec::new();
        for r in 0..u {
            self.stack.last_mut().unwrap().r = r;
            let mut local = resolve.clone();
            self.resolve_deps(&deps, &mut local, &mut new_body)?;
            let ids = self.process_body(body, honor_unroll, &mut local)?;
            new_body.extend(ids);
            // Keep the body-local resolutions for later replicas (deps) and
            // fold non-local additions back (there are none outside `body`).
            let mut replica_map = BTreeMap::new();
            for &item in body_ids_recursive(self.src, body).iter() {
                if let Some(v) = local.get(&item) {
                    replica_map.insert(item, *v);
                }
            }
            self.stack.last_mut().unwrap().replica_maps.push(replica_map);
        }
        let ctx = self.stack.pop().unwrap();

        // Patch cross-replica dep sources now that every replica exists.
        for (dep_id, src_eid, r_prime) in self.patches.drain(patch_base..).collect::<Vec<_>>() {
            let v = ctx.replica_maps[r_prime]
                .get(&src_eid)
                .copied()
                .expect("dep source resolved in replica");
            let src_node = match v {
                ERef::Node(n) => n,
                other => self.materialize_into(other, &mut new_body, dep_id),
            };
            if let EKind::Dep { source, .. } = &mut self.dst_nodes[dep_id].kind {
                *source = src_node;
            }
        }

        // The loop's own value, as read after completion.
        let final_ref = match kept {
            Some(dst) => ERef::LoopIdx {
                lp: dst,
                offset: (u - 1) * attrs.step,
            },
            None => idx_const(attrs.start + (trip - 1) * attrs.step),
        };
        self.finished_loops.insert(lp, final_ref);

        // Expose final values of body nodes to the outer scope.
        for &item in body_ids_recursive(self.src, body).iter() {
            if let Some(v) = ctx.replica_maps.last().and_then(|m| m.get(&item)) {
                resolve.insert(item, *v);
            }
        }

        match kept {
            Some(id) => {
                if let EKind::Loop { body, .. } = &mut self.dst_nodes[id].kind {
                    *body = new_body;
                }
                Ok(vec![id])
            }
            None => Ok(new_body),
        }
    }

    /// Insert an identity op in front of `before` inside `body` so a
    /// non-node reference can serve as a dep source.
    fn materialize_into(&mut self, r: ERef, body: &mut Vec<EId>, before: EId) -> EId {
        let id = self.materialize(r);
        let pos = body.iter().position(|&b| b == before).unwrap_or(0);
        body.insert(pos, id);
        id
    }
}

fn idx_const(value: i64) -> ERef {
    ERef::Const {
        raw: (value as u64) & crate::value::mask64(LOOP_INDEX_WIDTH),
        width: LOOP_INDEX_WIDTH,
    }
}

/// Dep nodes whose nearest loop is the one owning `body`: recurse through
/// branches but stop at nested loops.
fn collect_deps_shallow(g: &ElabGraph, body: &[EId]) -> Vec<EId> {
    let mut out = Vec::new();
    for &item in body {
        match &g.nodes[item].kind {
            EKind::Dep { .. } => out.push(item),
            EKind::Branch { body, .. } => out.extend(collect_deps_shallow(g, body)),
            _ => {}
        }
    }
    out
}

/// All node ids inside a body, recursing through branches and loops.
fn body_ids_recursive(g: &ElabGraph, body: &[EId]) -> Vec<EId> {
    let mut out = Vec::new();
    let mut stack: Vec<EId> = body.to_vec();
    while let Some(n) = stack.pop() {
        out.push(n);
        match &g.nodes[n].kind {
            EKind::Loop { body, .. } | EKind::Branch { body, .. } => stack.extend(body.iter()),
            _ => {}
        }
    }
    out
}
