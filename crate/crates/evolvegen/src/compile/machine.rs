//! Staged program-counter machine: the single scheduler behind both
//! strategies.
//!
//! The elaborated graph compiles to a machine of sequential steps. Straight
//! line code becomes stage steps (one op per stage for Basic, depth-packed
//! at the register threshold for Optimized); loops become init/advance step
//! pairs around their body, or a single multi-cycle pipeline step with
//! initiation interval 1. Flattened perfect nests share one advance step
//! with ripple-carried counters. Inputs are sampled into shadow registers at
//! cycle 0 and held; `valid` is a sticky done register.

use std::collections::HashMap;

use crate::graph::{LoopAttrs, LOOP_INDEX_WIDTH};

use super::elab::{EId, EKind, ERef, ElabGraph};
use super::expr::{ExprPool, ExprRef, TypedExpr};
use super::ts::{StateVar, TransitionSystem};
use super::CompileError;

#[derive(Debug, Clone)]
pub struct MachineParams {
    pub name: String,
    /// One op per stage (Basic) instead of depth packing.
    pub one_op_per_stage: bool,
    /// Combinational operator depth allowed within one stage.
    pub threshold: u32,
    pub honor_pipeline: bool,
    pub honor_flatten: bool,
    /// Abort when the expression pool outgrows this.
    pub node_budget: usize,
}

// ---------------------------------------------------------------------------
// plan

#[derive(Debug)]
enum PlanItem {
    Segment(Vec<Vec<EId>>),
    Loop(LoopPlan),
}

#[derive(Debug)]
struct LoopPlan {
    /// Flatten group, outermost first (single entry when not flattened).
    levels: Vec<EId>,
    pipelined: bool,
    /// Pipelined body ops per stage.
    stages: Vec<Vec<EId>>,
    /// Sequential body.
    body: Vec<PlanItem>,
    /// Dep nodes carried by the innermost level.
    deps: Vec<EId>,
    trip_total: i64,
}

struct Planner<'a> {
    eg: &'a ElabGraph,
    params: &'a MachineParams,
    preds: &'a HashMap<EId, Vec<EId>>,
}

impl<'a> Planner<'a> {
    fn plan_body(&self, body: &[EId]) -> Vec<PlanItem> {
        let mut stream_ops: Vec<EId> = Vec::new();
        let mut items = Vec::new();
        let mut ops_here = Vec::new();
        self.stream(body, &mut ops_here);
        for entry in ops_here {
            match entry {
                StreamItem::Op(id) => stream_ops.push(id),
                StreamItem::Loop(id) => {
                    if !stream_ops.is_empty() {
                        items.push(PlanItem::Segment(
                            self.stage_pack(&std::mem::take(&mut stream_ops), false),
                        ));
                    }
                    items.push(PlanItem::Loop(self.plan_loop(id)));
                }
            }
        }
        if !stream_ops.is_empty() {
            items.push(PlanItem::Segment(self.stage_pack(&stream_ops, false)));
        }
        items
    }

    fn stream(&self, body: &[EId], out: &mut Vec<StreamItem>) {
        for &item in body {
            match &self.eg.nodes[item].kind {
                EKind::Op { .. } => out.push(StreamItem::Op(item)),
                EKind::Loop { .. } => out.push(StreamItem::Loop(item)),
                EKind::Branch { body, .. } => self.stream(body, out),
                EKind::Dep { .. } => {}
            }
        }
    }

    fn plan_loop(&self, lp: EId) -> LoopPlan {
        let mut levels = vec![lp];
        loop {
            let last = *levels.last().unwrap();
            let (attrs, body) = match &self.eg.nodes[last].kind {
                EKind::Loop { attrs, body } => (attrs, body),
                _ => unreachable!(),
            };
            if !self.params.honor_flatten || !attrs.flattened || body.len() != 1 {
                break;
            }
            let only = body[0];
            if matches!(self.eg.nodes[only].kind, EKind::Loop { .. }) {
                levels.push(only);
            } else {
                break;
            }
        }
        let innermost = *levels.last().unwrap();
        let inner_body = match &self.eg.nodes[innermost].kind {
            EKind::Loop { body, .. } => body.clone(),
            _ => unreachable!(),
        };
        let deps = collect_deps(self.eg, &inner_body);
        let has_inner_loops = contains_loop(self.eg, &inner_body);
        let inner_attrs = loop_attrs(self.eg, innermost);
        let pipelined = self.params.honor_pipeline && inner_attrs.pipelined && !has_inner_loops;
        let trip_total: i64 = levels
            .iter()
            .map(|&l| loop_attrs(self.eg, l).trip_count())
            .product();
        if pipelined {
            let mut ops = Vec::new();
            self.stream(&inner_body, &mut ops);
            let ops: Vec<EId> = ops
                .into_iter()
                .map(|s| match s {
                    StreamItem::Op(id) => id,
                    StreamItem::Loop(_) => unreachable!(),
                })
                .collect();
            let stages = self.stage_pack(&ops, !deps.is_empty());
            LoopPlan {
                levels,
                pipelined: true,
                stages,
                body: Vec::new(),
                deps,
                trip_total,
            }
        } else {
            LoopPlan {
                levels,
                pipelined: false,
                stages: Vec::new(),
                body: self.plan_body(&inner_body),
                deps,
                trip_total,
            }
        }
    }

    /// Partition ops into stages. Depth counts graph operators; a chain
    /// deeper than the threshold is cut by a stage boundary (a register).
    fn stage_pack(&self, ops: &[EId], force_single: bool) -> Vec<Vec<EId>> {
        if ops.is_empty() {
            return Vec::new();
        }
        if force_single {
            return vec![ops.to_vec()];
        }
        if self.params.one_op_per_stage {
            return ops.iter().map(|&o| vec![o]).collect();
        }
        let here: HashMap<EId, usize> = ops.iter().enumerate().map(|(i, &o)| (o, i)).collect();
        let mut depth: HashMap<EId, u32> = HashMap::new();
        let mut stage_of = Vec::with_capacity(ops.len());
        for &op in ops {
            let mut d = 0;
            if let EKind::Op { operands, .. } = &self.eg.nodes[op].kind {
                for r in operands {
                    if let ERef::Node(n) = r {
                        if here.contains_key(n) {
                            d = d.max(depth[n]);
                        }
                    }
                }
            }
            for b in self.preds.get(&op).map(|v| v.as_slice()).unwrap_or(&[]) {
                if let EKind::Branch { cond, .. } = &self.eg.nodes[*b].kind {
                    if let ERef::Node(n) = cond {
                        if here.contains_key(n) {
                            d = d.max(depth[n]);
                        }
                    }
                }
            }
            let d = d + 1;
            depth.insert(op, d);
            stage_of.push((d - 1) / self.params.threshold.max(1));
        }
        // Compact stage indices (depth gaps would leave empty steps).
        let mut uniq: Vec<u32> = stage_of.clone();
        uniq.sort_unstable();
        uniq.dedup();
        let remap: HashMap<u32, usize> = uniq.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut stages = vec![Vec::new(); uniq.len()];
        for (i, &op) in ops.iter().enumerate() {
            stages[remap[&stage_of[i]]].push(op);
        }
        stages
    }
}

enum StreamItem {
    Op(EId),
    Loop(EId),
}

fn loop_attrs(eg: &ElabGraph, id: EId) -> LoopAttrs {
    match &eg.nodes[id].kind {
        EKind::Loop { attrs, .. } => *attrs,
        _ => unreachable!(),
    }
}

fn collect_deps(eg: &ElabGraph, body: &[EId]) -> Vec<EId> {
    let mut out = Vec::new();
    for &item in body {
        match &eg.nodes[item].kind {
            EKind::Dep { .. } => out.push(item),
            EKind::Branch { body, .. } => out.extend(collect_deps(eg, body)),
            _ => {}
        }
    }
    out
}

fn contains_loop(eg: &ElabGraph, body: &[EId]) -> bool {
    body.iter().any(|&item| match &eg.nodes[item].kind {
        EKind::Loop { .. } => true,
        EKind::Branch { body, .. } => contains_loop(eg, body),
        _ => false,
    })
}

fn count_steps(items: &[PlanItem]) -> usize {
    items
        .iter()
        .map(|i| match i {
            PlanItem::Segment(stages) => stages.len(),
            PlanItem::Loop(lp) => {
                if lp.pipelined {
                    2
                } else {
                    2 + count_steps(&lp.body)
                }
            }
        })
        .sum()
}

fn max_duration(items: &[PlanItem]) -> u64 {
    items
        .iter()
        .map(|i| match i {
            PlanItem::Segment(_) => 1,
            PlanItem::Loop(lp) => {
                if lp.pipelined {
                    (lp.trip_total as u64 + lp.stages.len().max(1) as u64 - 1).max(1)
                } else {
                    max_duration(&lp.body)
                }
            }
        })
        .max()
        .unwrap_or(1)
}

fn static_latency(items: &[PlanItem]) -> u64 {
    items
        .iter()
        .map(|i| match i {
            PlanItem::Segment(stages) => stages.len() as u64,
            PlanItem::Loop(lp) => {
                if lp.pipelined {
                    1 + (lp.trip_total as u64 + lp.stages.len().max(1) as u64 - 1).max(1)
                } else {
                    1 + lp.trip_total as u64 * (static_latency(&lp.body) + 1)
                }
            }
        })
        .sum()
}

// ---------------------------------------------------------------------------
// builder

#[derive(Clone, Copy)]
struct NodeVal {
    wire: ExprRef,
    step: usize,
    stage: u32,
    /// Innermost loop id when produced inside a pipelined body.
    pipe: Option<EId>,
    reg: Option<u32>,
    guard: ExprRef,
}

struct Builder<'a> {
    eg: &'a ElabGraph,
    params: &'a MachineParams,
    pool: ExprPool,
    names: Vec<String>,
    widths: Vec<u32>,
    inits: Vec<u128>,
    assigns: Vec<Vec<(ExprRef, ExprRef)>>,
    preds: HashMap<EId, Vec<EId>>,
    node_val: HashMap<EId, NodeVal>,
    effective_in: Vec<ExprRef>,
    pc: u32,
    pc_width: u32,
    sc: Option<u32>,
    sc_width: u32,
    pc_targets: Vec<Option<ExprRef>>,
    loop_idx_reg: HashMap<EId, u32>,
    loop_cnt_reg: HashMap<EId, u32>,
    /// Balancing delay registers: (node, delay) -> state.
    chains: HashMap<(EId, u32), u32>,
    idx_chains: HashMap<(EId, u32), u32>,
}

struct PipeCtx {
    innermost: EId,
    levels: Vec<EId>,
    guard: ExprRef,
}

pub fn build_machine(
    eg: &ElabGraph,
    params: &MachineParams,
) -> Result<TransitionSystem, CompileError> {
    // Enclosing branch chains, outermost first.
    let mut preds: HashMap<EId, Vec<EId>> = HashMap::new();
    {
        fn walk(
            eg: &ElabGraph,
            body: &[EId],
            chain: &mut Vec<EId>,
            preds: &mut HashMap<EId, Vec<EId>>,
        ) {
            for &item in body {
                match &eg.nodes[item].kind {
                    EKind::Op { .. } => {
                        preds.insert(item, chain.clone());
                    }
                    EKind::Branch { body, .. } => {
                        chain.push(item);
                        walk(eg, body, chain, preds);
                        chain.pop();
                    }
                    EKind::Loop { body, .. } => walk(eg, body, chain, preds),
                    EKind::Dep { .. } => {}
                }
            }
        }
        let mut chain = Vec::new();
        walk(eg, &eg.top, &mut chain, &mut preds);
    }

    let planner = Planner {
        eg,
        params,
        preds: &preds,
    };
    let plan = planner.plan_body(&eg.top);
    let n_steps = count_steps(&plan);
    let max_dur = max_duration(&plan);
    let latency = static_latency(&plan).max(1);

    let mut b = Builder {
        eg,
        params,
        pool: ExprPool::new(),
        names: Vec::new(),
        widths: Vec::new(),
        inits: Vec::new(),
        assigns: Vec::new(),
        preds,
        node_val: HashMap::new(),
        effective_in: Vec::new(),
        pc: 0,
        pc_width: 0,
        sc: None,
        sc_width: 0,
        pc_targets: vec![None; n_steps],
        loop_idx_reg: HashMap::new(),
        loop_cnt_reg: HashMap::new(),
        chains: HashMap::new(),
        idx_chains: HashMap::new(),
    };

    for pi in &eg.inputs {
        b.pool.add_input(pi.width);
    }

    // started / shadows
    let started = b.alloc_state("started", 1, 0);
    let started_e = b.pool.state(started);
    let one1 = b.pool.c(1, 1);
    b.assign(started, one1, one1);
    for (i, pi) in eg.inputs.iter().enumerate() {
        let sh = b.alloc_state(&format!("shadow_{}", pi.name), pi.width, 0);
        let not_started = b.pool.not(started_e);
        let live = b.pool.input(i as u32);
        b.assign(sh, not_started, live);
        let she = b.pool.state(sh);
        let eff = b.pool.ite(started_e, she, live);
        b.effective_in.push(eff);
    }

    b.pc_width = bits_for(n_steps as u64);
    b.pc = b.alloc_state("pc", b.pc_width, 0);
    if max_dur > 1 {
        b.sc_width = bits_for(max_dur - 1);
        b.sc = Some(b.alloc_state("sc", b.sc_width, 0));
    }
    let done = b.alloc_state("done", 1, 0);

    // compile the plan
    let mut cursor = 0usize;
    b.compile_items(&plan, &mut cursor)?;
    debug_assert_eq!(cursor, n_steps);

    // pc next: self-hold at DONE, per-step targets elsewhere.
    let pc_e = b.pool.state(b.pc);
    let mut pc_next = pc_e;
    for k in (0..n_steps).rev() {
        let guard = b.step_guard(k);
        let tgt = b.pc_targets[k].expect("step target assigned");
        pc_next = b.pool.ite(guard, tgt, pc_next);
    }
    b.set_next_direct(b.pc, pc_next);

    if let Some(sc) = b.sc {
        let sc_e = b.pool.state(sc);
        let one = b.pool.c(b.sc_width, 1);
        let incr = b.pool.add(sc_e, one);
        let same = b.pool.eq(pc_next, pc_e);
        let zero = b.pool.c(b.sc_width, 0);
        let nxt = b.pool.ite(same, incr, zero);
        b.set_next_direct(sc, nxt);
    }

    // sticky done
    let done_e = b.pool.state(done);
    let dc = b.pool.c(b.pc_width, n_steps as u128);
    let at_done = b.pool.eq(pc_next, dc);
    let done_next = b.pool.or(done_e, at_done);
    b.set_next_direct(done, done_next);

    // outputs
    let mut outputs: Vec<(String, ExprRef)> = Vec::new();
    outputs.push(("valid".into(), done_e));
    let mut fold = b.pool.c(64, 0);
    let out_ids: Vec<EId> = eg.outputs.clone();
    let mut out_exprs = Vec::new();
    for (i, &o) in out_ids.iter().enumerate() {
        let reg = b.reg_of(o);
        let oe = b.pool.state(reg);
        out_exprs.push(oe);
        let ze = b.pool.zext(oe, 64);
        let k = (7 * i as u32) % 64;
        let rot = if k == 0 {
            ze
        } else {
            let lo = b.pool.shlc(ze, k);
            let hi = b.pool.shrc(ze, 64 - k, false);
            b.pool.or(lo, hi)
        };
        fold = b.pool.xor(fold, rot);
    }
    outputs.push(("result".into(), fold));
    for (i, oe) in out_exprs.into_iter().enumerate() {
        outputs.push((format!("out{}", i), oe));
    }

    if b.pool.len() > params.node_budget {
        return Err(CompileError::ResourceBound {
            nodes: b.pool.len(),
        });
    }

    // finalize state nexts
    let n = b.names.len();
    let mut state_vars = Vec::with_capacity(n);
    for i in 0..n {
        let mut next = b.pool.state(i as u32);
        for (g, v) in b.assigns[i as usize].clone() {
            next = b.pool.ite(g, v, next);
        }
        state_vars.push(StateVar {
            name: b.names[i].clone(),
            width: b.widths[i],
            init: b.inits[i],
            next,
        });
    }

    Ok(TransitionSystem {
        name: params.name.clone(),
        inputs: eg
            .inputs
            .iter()
            .map(|p| (p.name.clone(), p.width))
            .collect(),
        state_vars,
        outputs,
        bad: None,
        pool: b.pool,
        latency: Some(latency),
    })
}

fn bits_for(v: u64) -> u32 {
    (64 - v.leading_zeros()).max(1)
}

impl<'a> Builder<'a> {
    fn alloc_state(&mut self, name: &str, width: u32, init: u128) -> u32 {
        let i = self.pool.add_state(width);
        self.names.push(name.to_string());
        self.widths.push(width);
        self.inits.push(init);
        self.assigns.push(Vec::new());
        i
    }

    fn assign(&mut self, state: u32, guard: ExprRef, value: ExprRef) {
        self.assigns[state as usize].push((guard, value));
    }

    /// Replace the whole next function (pc/sc/done bookkeeping).
    fn set_next_direct(&mut self, state: u32, next: ExprRef) {
        self.assigns[state as usize] = vec![(self.pool.c(1, 1), next)];
    }

    fn step_guard(&mut self, step: usize) -> ExprRef {
        let pc_e = self.pool.state(self.pc);
        let k = self.pool.c(self.pc_width, step as u128);
        self.pool.eq(pc_e, k)
    }

    fn check_budget(&self) -> Result<(), CompileError> {
        if self.pool.len() > self.params.node_budget {
            Err(CompileError::ResourceBound {
                nodes: self.pool.len(),
            })
        } else {
            Ok(())
        }
    }

    fn compile_items(
        &mut self,
        items: &[PlanItem],
        cursor: &mut usize,
    ) -> Result<(), CompileError> {
        for item in items {
            match item {
                PlanItem::Segment(stages) => {
                    for stage_ops in stages.iter() {
                        let step = *cursor;
                        *cursor += 1;
                        self.pc_targets[step] =
                            Some(self.pool.c(self.pc_width, (step + 1) as u128));
                        for &op in stage_ops {
                            self.compile_op(op, step, 0, None)?;
                        }
                    }
                }
                PlanItem::Loop(lp) => self.compile_loop(lp, cursor)?,
            }
        }
        Ok(())
    }

    /// Register a value node's computation at (step, stage).
    fn compile_op(
        &mut self,
        id: EId,
        step: usize,
        stage: u32,
        pipe: Option<&PipeCtx>,
    ) -> Result<(), CompileError> {
        let node = &self.eg.nodes[id];
        let (attrs, operands) = match &node.kind {
            EKind::Op { attrs, operands } => (*attrs, operands.clone()),
            _ => unreachable!(),
        };
        let typed: Vec<TypedExpr> = operands
            .iter()
            .map(|&r| {
                let e = self.fetch(r, step, stage, pipe);
                TypedExpr {
                    expr: e,
                    width: self.eg.ref_width(r),
                    frac: self.eg.ref_frac(r),
                }
            })
            .collect();
        let raw = super::expr::lower_op(&mut self.pool, &attrs, &typed);
        let pred = self.pred_expr(id, step, stage, pipe);
        let wire = match pred {
            Some(p) => {
                let z = self.pool.c(node.width, 0);
                self.pool.ite(p, raw.expr, z)
            }
            None => raw.expr,
        };
        let guard = self.step_guard(step);
        self.node_val.insert(
            id,
            NodeVal {
                wire,
                step,
                stage,
                pipe: pipe.map(|p| p.innermost),
                reg: None,
                guard,
            },
        );
        self.check_budget()
    }

    fn pred_expr(
        &mut self,
        id: EId,
        step: usize,
        stage: u32,
        pipe: Option<&PipeCtx>,
    ) -> Option<ExprRef> {
        let chain = self.preds.get(&id)?.clone();
        if chain.is_empty() {
            return None;
        }
        let mut acc: Option<ExprRef> = None;
        for b in chain {
            let cond = match &self.eg.nodes[b].kind {
                EKind::Branch { cond, .. } => *cond,
                _ => unreachable!(),
            };
            let c = self.fetch(cond, step, stage, pipe);
            acc = Some(match acc {
                None => c,
                Some(a) => self.pool.and(a, c),
            });
        }
        acc
    }

    fn reg_of(&mut self, id: EId) -> u32 {
        let nv = *self.node_val.get(&id).expect("node compiled");
        if let Some(r) = nv.reg {
            return r;
        }
        let w = self.eg.nodes[id].width;
        let r = self.alloc_state(&format!("n{}", id), w, 0);
        self.assign(r, nv.guard, nv.wire);
        self.node_val.get_mut(&id).unwrap().reg = Some(r);
        r
    }

    /// Fetch a reference's value as seen from (step, stage).
    fn fetch(&mut self, r: ERef, step: usize, stage: u32, pipe: Option<&PipeCtx>) -> ExprRef {
        match r {
            ERef::Const { raw, width } => self.pool.c(width, raw as u128),
            ERef::Input(i) => self.effective_in[i as usize],
            ERef::LoopIdx { lp, offset } => {
                let base = self.loop_idx_read(lp, stage, pipe);
                if offset == 0 {
                    base
                } else {
                    let off = self
                        .pool
                        .c(LOOP_INDEX_WIDTH, (offset as u64 as u128) & 0xffff);
                    self.pool.add(base, off)
                }
            }
            ERef::Node(x) => {
                let nv = *self.node_val.get(&x).expect("producer compiled before use");
                if nv.step == step && nv.stage == stage {
                    return nv.wire;
                }
                if let (Some(p), Some(px)) = (pipe, nv.pipe) {
                    if px == p.innermost && nv.step == step {
                        // Same pipeline, earlier stage: balance by delay regs.
                        let delta = stage - nv.stage;
                        let base = self.reg_of(x);
                        if delta == 1 {
                            return self.pool.state(base);
                        }
                        let guard = p.guard;
                        let w = self.eg.nodes[x].width;
                        let mut prev = base;
                        for t in 1..delta {
                            let key = (x, t);
                            let reg = match self.chains.get(&key) {
                                Some(&r) => r,
                                None => {
                                    let r =
                                        self.alloc_state(&format!("n{}_dly{}", x, t), w, 0);
                                    let pe = self.pool.state(prev);
                                    self.assign(r, guard, pe);
                                    self.chains.insert(key, r);
                                    r
                                }
                            };
                            prev = reg;
                        }
                        return self.pool.state(prev);
                    }
                }
                let reg = self.reg_of(x);
                self.pool.state(reg)
            }
        }
    }

    fn loop_idx_read(&mut self, lp: EId, stage: u32, pipe: Option<&PipeCtx>) -> ExprRef {
        let idx = *self.loop_idx_reg.get(&lp).expect("loop registers exist");
        let base = self.pool.state(idx);
        if let Some(p) = pipe {
            // Only this pipe's own levels advance per cycle; an ancestor's
            // index is frozen for the whole window.
            if stage > 0 && p.levels.contains(&lp) {
                // The index advances every launch cycle; later stages need
                // the value from `stage` cycles ago.
                let guard = p.guard;
                let mut prev = idx;
                for t in 1..=stage {
                    let key = (lp, t);
                    let reg = match self.idx_chains.get(&key) {
                        Some(&r) => r,
                        None => {
                            let r = self.alloc_state(
                                &format!("idx{}_dly{}", lp, t),
                                LOOP_INDEX_WIDTH,
                                0,
                            );
                            let pe = self.pool.state(prev);
                            self.assign(r, guard, pe);
                            self.idx_chains.insert(key, r);
                            r
                        }
                    };
                    prev = reg;
                }
                return self.pool.state(prev);
            }
        }
        base
    }

    fn compile_loop(&mut self, lp: &LoopPlan, cursor: &mut usize) -> Result<(), CompileError> {
        // Registers per level.
        for &level in &lp.levels {
            let attrs = loop_attrs(self.eg, level);
            let trip = attrs.trip_count();
            if !self.loop_idx_reg.contains_key(&level) {
                let idx = self.alloc_state(&format!("idx{}", level), LOOP_INDEX_WIDTH, 0);
                let cntw = bits_for((trip - 1).max(0) as u64);
                let cnt = self.alloc_state(&format!("cnt{}", level), cntw, 0);
                self.loop_idx_reg.insert(level, idx);
                self.loop_cnt_reg.insert(level, cnt);
            }
        }
        // Dep registers: the dep value itself plus distance-1 history slots.
        let mut dep_regs: Vec<(EId, u32, EId, u32, Vec<u32>)> = Vec::new();
        for &dep in &lp.deps {
            let (dist, source) = match &self.eg.nodes[dep].kind {
                EKind::Dep { distance, source } => (*distance, *source),
                _ => unreachable!(),
            };
            let w = self.eg.nodes[dep].width;
            let r = self.alloc_state(&format!("dep{}", dep), w, 0);
            let hist: Vec<u32> = (1..dist)
                .map(|t| self.alloc_state(&format!("dep{}_h{}", dep, t), w, 0))
                .collect();
            let wire = self.pool.state(r);
            let g = self.pool.c(1, 1);
            self.node_val.insert(
                dep,
                NodeVal {
                    wire,
                    step: usize::MAX,
                    stage: 0,
                    pipe: None,
                    reg: Some(r),
                    guard: g,
                },
            );
            dep_regs.push((dep, dist, source, r, hist));
        }

        let init_step = *cursor;
        *cursor += 1;
        let g_init = self.step_guard(init_step);
        self.pc_targets[init_step] = Some(self.pool.c(self.pc_width, (init_step + 1) as u128));
        for &level in &lp.levels {
            let attrs = loop_attrs(self.eg, level);
            let idx = self.loop_idx_reg[&level];
            let cnt = self.loop_cnt_reg[&level];
            let sv = self
                .pool
                .c(LOOP_INDEX_WIDTH, (attrs.start as u64 as u128) & 0xffff);
            self.assign(idx, g_init, sv);
            let zero = self.pool.c(self.widths[cnt as usize], 0);
            self.assign(cnt, g_init, zero);
        }
        for (_, _, _, r, hist) in &dep_regs {
            let z = self.pool.c(self.widths[*r as usize], 0);
            self.assign(*r, g_init, z);
            for h in hist {
                self.assign(*h, g_init, z);
            }
        }

        if lp.pipelined {
            let run_step = *cursor;
            *cursor += 1;
            let g_run = self.step_guard(run_step);
            let s = lp.stages.len().max(1) as u64;
            let duration = (lp.trip_total as u64 + s - 1).max(1);
            // pc leaves the run step when the duration elapses.
            let sc = self.sc.expect("pipe implies a duration counter");
            let sc_e = self.pool.state(sc);
            let wide = self.pool.zext(sc_e, self.sc_width + 1);
            let dml = self.pool.c(self.sc_width + 1, (duration - 1) as u128);
            let at_end = self.pool.eq(wide, dml);
            let nxt = self.pool.c(self.pc_width, (run_step + 1) as u128);
            let stay = self.pool.c(self.pc_width, run_step as u128);
            self.pc_targets[run_step] = Some(self.pool.ite(at_end, nxt, stay));

            let tt = self.pool.c(self.sc_width + 1, lp.trip_total as u128);
            let launching = self.pool.ult(wide, tt);
            let adv_guard = self.pool.and(g_run, launching);

            let ctx = PipeCtx {
                innermost: *lp.levels.last().unwrap(),
                levels: lp.levels.clone(),
                guard: g_run,
            };
            for (si, ops) in lp.stages.iter().enumerate() {
                for &op in ops {
                    self.compile_op(op, run_step, si as u32, Some(&ctx))?;
                }
            }
            // After the body: dep sources exist now. Shifts read the
            // same-cycle wire, since source registers update in parallel.
            self.advance_levels(lp, adv_guard, &dep_regs, true);
        } else {
            let body_start = *cursor;
            self.compile_items(&lp.body, cursor)?;
            let adv_step = *cursor;
            *cursor += 1;
            let g_adv = self.step_guard(adv_step);
            // Loop back unless every level is at its last iteration.
            let all_last = self.all_last(lp);
            let back = self
                .pool
                .c(self.pc_width, body_start.min(adv_step) as u128);
            let exit = self.pool.c(self.pc_width, (adv_step + 1) as u128);
            self.pc_targets[adv_step] = Some(self.pool.ite(all_last, exit, back));
            self.advance_levels(lp, g_adv, &dep_regs, false);
        }
        Ok(())
    }

    fn all_last(&mut self, lp: &LoopPlan) -> ExprRef {
        let mut acc: Option<ExprRef> = None;
        for &level in &lp.levels {
            let attrs = loop_attrs(self.eg, level);
            let cnt = self.loop_cnt_reg[&level];
            let ce = self.pool.state(cnt);
            let tm1 = self
                .pool
                .c(self.widths[cnt as usize], (attrs.trip_count() - 1) as u128);
            let last = self.pool.eq(ce, tm1);
            acc = Some(match acc {
                None => last,
                Some(a) => self.pool.and(a, last),
            });
        }
        acc.expect("loop has levels")
    }

    /// Ripple-advance the level counters and shift the dep histories; fires
    /// under `guard` and freezes once every level is at its last iteration.
    fn advance_levels(
        &mut self,
        lp: &LoopPlan,
        guard: ExprRef,
        dep_regs: &[(EId, u32, EId, u32, Vec<u32>)],
        pipelined: bool,
    ) {
        let all_last = self.all_last(lp);
        let not_all = self.pool.not(all_last);
        let upd = self.pool.and(guard, not_all);

        // innermost advances first; a wrap carries outward
        let mut carry = self.pool.c(1, 1);
        let mut inner_wrap: Option<ExprRef> = None;
        for (i, &level) in lp.levels.iter().enumerate().rev() {
            let attrs = loop_attrs(self.eg, level);
            let idx = self.loop_idx_reg[&level];
            let cnt = self.loop_cnt_reg[&level];
            let ce = self.pool.state(cnt);
            let cw = self.widths[cnt as usize];
            let tm1 = self.pool.c(cw, (attrs.trip_count() - 1) as u128);
            let last = self.pool.eq(ce, tm1);
            let wrap = self.pool.and(carry, last);
            let one = self.pool.c(cw, 1);
            let inc = self.pool.add(ce, one);
            let zero = self.pool.c(cw, 0);
            let wrapped = self.pool.ite(last, zero, inc);
            let cnt_next = self.pool.ite(carry, wrapped, ce);
            self.assign(cnt, upd, cnt_next);

            let ie = self.pool.state(idx);
            let stepc = self
                .pool
                .c(LOOP_INDEX_WIDTH, (attrs.step as u64 as u128) & 0xffff);
            let startc = self
                .pool
                .c(LOOP_INDEX_WIDTH, (attrs.start as u64 as u128) & 0xffff);
            let stepped = self.pool.add(ie, stepc);
            let iwrapped = self.pool.ite(last, startc, stepped);
            let idx_next = self.pool.ite(carry, iwrapped, ie);
            self.assign(idx, upd, idx_next);

            if i == lp.levels.len() - 1 {
                inner_wrap = Some(last);
            }
            carry = wrap;
        }

        // Dep histories shift per innermost iteration; a wrap of the
        // innermost level restarts the carried state.
        let inner_wrap = inner_wrap.expect("loop has levels");
        for (_, dist, source, r, hist) in dep_regs {
            // A pipelined boundary coincides with the body cycle: take the
            // live wire. A sequential advance runs a cycle later: take the
            // register.
            let src_e = if pipelined {
                self.node_val.get(source).expect("dep source compiled").wire
            } else {
                let src_reg = self.reg_of(*source);
                self.pool.state(src_reg)
            };
            let w = self.widths[*r as usize];
            let z = self.pool.c(w, 0);
            let shift_in = if *dist == 1 {
                src_e
            } else {
                self.pool.state(hist[(*dist - 2) as usize])
            };
            let rv = self.pool.ite(inner_wrap, z, shift_in);
            self.assign(*r, upd, rv);
            let mut prev = src_e;
            for h in hist {
                let hv = self.pool.ite(inner_wrap, z, prev);
                self.assign(*h, upd, hv);
                prev = self.pool.state(*h);
            }
        }
    }
}
