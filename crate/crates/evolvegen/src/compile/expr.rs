//! Word-level expression DAG for transition systems.
//!
//! The pool hash-conses a small set of primitive bit-vector operators. Graph
//! operators are lowered onto these primitives by [`lower_op`], which mirrors
//! [`crate::value::apply_op`] bit for bit; the two routes are cross-checked
//! by property tests.

use std::collections::HashMap;

use crate::graph::{OpAttrs, OpKind, Rounding, Saturation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExprRef(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Expr {
    Const { width: u32, value: u128 },
    Input(u32),
    State(u32),
    Not(ExprRef),
    And(ExprRef, ExprRef),
    Or(ExprRef, ExprRef),
    Xor(ExprRef, ExprRef),
    Add(ExprRef, ExprRef),
    Sub(ExprRef, ExprRef),
    Mul(ExprRef, ExprRef),
    /// Variable left shift; an amount >= width yields 0.
    Shl(ExprRef, ExprRef),
    /// Variable right shift; logical unless `arith`.
    Shr { a: ExprRef, amount: ExprRef, arith: bool },
    ShlC { a: ExprRef, k: u32 },
    ShrC { a: ExprRef, k: u32, arith: bool },
    ZExt { a: ExprRef, width: u32 },
    SExt { a: ExprRef, width: u32 },
    Slice { a: ExprRef, lo: u32, width: u32 },
    Eq(ExprRef, ExprRef),
    Ult(ExprRef, ExprRef),
    Slt(ExprRef, ExprRef),
    Ite { c: ExprRef, t: ExprRef, e: ExprRef },
}

#[derive(Debug, Clone, Default)]
pub struct ExprPool {
    nodes: Vec<Expr>,
    widths: Vec<u32>,
    dedup: HashMap<Expr, ExprRef>,
    pub input_widths: Vec<u32>,
    pub state_widths: Vec<u32>,
}

fn m128(width: u32) -> u128 {
    if width >= 128 {
        u128::MAX
    } else {
        (1u128 << width) - 1
    }
}

impl ExprPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, r: ExprRef) -> Expr {
        self.nodes[r.0 as usize]
    }

    pub fn width(&self, r: ExprRef) -> u32 {
        self.widths[r.0 as usize]
    }

    pub fn add_input(&mut self, width: u32) -> u32 {
        self.input_widths.push(width);
        (self.input_widths.len() - 1) as u32
    }

    pub fn add_state(&mut self, width: u32) -> u32 {
        self.state_widths.push(width);
        (self.state_widths.len() - 1) as u32
    }

    fn expr_width(&self, e: &Expr) -> u32 {
        match *e {
            Expr::Const { width, .. } => width,
            Expr::Input(i) => self.input_widths[i as usize],
            Expr::State(i) => self.state_widths[i as usize],
            Expr::Not(a) => self.width(a),
            Expr::And(a, _) | Expr::Or(a, _) | Expr::Xor(a, _) => self.width(a),
            Expr::Add(a, _) | Expr::Sub(a, _) | Expr::Mul(a, _) => self.width(a),
            Expr::Shl(a, _) | Expr::Shr { a, .. } => self.width(a),
            Expr::ShlC { a, .. } | Expr::ShrC { a, .. } => self.width(a),
            Expr::ZExt { width, .. } | Expr::SExt { width, .. } => width,
            Expr::Slice { width, .. } => width,
            Expr::Eq(..) | Expr::Ult(..) | Expr::Slt(..) => 1,
            Expr::Ite { t, .. } => self.width(t),
        }
    }

    fn check(&self, e: &Expr) {
        match *e {
            Expr::And(a, b)
            | Expr::Or(a, b)
            | Expr::Xor(a, b)
            | Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Eq(a, b)
            | Expr::Ult(a, b)
            | Expr::Slt(a, b) => {
                debug_assert_eq!(self.width(a), self.width(b), "operand width mismatch")
            }
            Expr::Ite { c, t, e } => {
                debug_assert_eq!(self.width(c), 1);
                debug_assert_eq!(self.width(t), self.width(e));
            }
            Expr::ZExt { a, width } | Expr::SExt { a, width } => {
                debug_assert!(width >= self.width(a))
            }
            Expr::Slice { a, lo, width } => debug_assert!(lo + width <= self.width(a)),
            _ => {}
        }
    }

    pub fn intern(&mut self, e: Expr) -> ExprRef {
        self.check(&e);
        if let Some(folded) = self.fold(&e) {
            return folded;
        }
        if let Some(&r) = self.dedup.get(&e) {
            return r;
        }
        let r = ExprRef(self.nodes.len() as u32);
        let w = self.expr_width(&e);
        self.nodes.push(e);
        self.widths.push(w);
        self.dedup.insert(e, r);
        r
    }

    fn const_of(&self, r: ExprRef) -> Option<u128> {
        match self.node(r) {
            Expr::Const { value, .. } => Some(value),
            _ => None,
        }
    }

    /// Constant folding and a few cheap identities.
    fn fold(&mut self, e: &Expr) -> Option<ExprRef> {
        let w = self.expr_width(e);
        let c = |p: &Self, r: ExprRef| p.const_of(r);
        let fold_c = |this: &mut Self, v: u128, w: u32| {
            Some(this.intern(Expr::Const {
                width: w,
                value: v & m128(w),
            }))
        };
        match *e {
            Expr::Not(a) => {
                if let Some(v) = c(self, a) {
                    return fold_c(self, !v, w);
                }
            }
            Expr::And(a, b) => {
                if a == b {
                    return Some(a);
                }
                match (c(self, a), c(self, b)) {
                    (Some(x), Some(y)) => return fold_c(self, x & y, w),
                    (Some(0), _) | (_, Some(0)) => return fold_c(self, 0, w),
                    (Some(x), None) if x == m128(w) => return Some(b),
                    (None, Some(y)) if y == m128(w) => return Some(a),
                    _ => {}
                }
            }
            Expr::Or(a, b) => {
                if a == b {
                    return Some(a);
                }
                match (c(self, a), c(self, b)) {
                    (Some(x), Some(y)) => return fold_c(self, x | y, w),
                    (Some(0), None) => return Some(b),
                    (None, Some(0)) => return Some(a),
                    (Some(x), _) if x == m128(w) => return fold_c(self, m128(w), w),
                    (_, Some(y)) if y == m128(w) => return fold_c(self, m128(w), w),
                    _ => {}
                }
            }
            Expr::Xor(a, b) => match (c(self, a), c(self, b)) {
                (Some(x), Some(y)) => return fold_c(self, x ^ y, w),
                (Some(0), None) => return Some(b),
                (None, Some(0)) => return Some(a),
                _ if a == b => return fold_c(self, 0, w),
                _ => {}
            },
            Expr::Add(a, b) => match (c(self, a), c(self, b)) {
                (Some(x), Some(y)) => return fold_c(self, x.wrapping_add(y), w),
                (Some(0), None) => return Some(b),
                (None, Some(0)) => return Some(a),
                _ => {}
            },
            Expr::Sub(a, b) => match (c(self, a), c(self, b)) {
                (Some(x), Some(y)) => return fold_c(self, x.wrapping_sub(y), w),
                (None, Some(0)) => return Some(a),
                _ => {}
            },
            Expr::Mul(a, b) => match (c(self, a), c(self, b)) {
                (Some(x), Some(y)) => return fold_c(self, x.wrapping_mul(y), w),
                (Some(0), _) | (_, Some(0)) => return fold_c(self, 0, w),
                (Some(1), None) => return Some(b),
                (None, Some(1)) => return Some(a),
                _ => {}
            },
            Expr::Shl(a, amt) => {
                if let (Some(x), Some(k)) = (c(self, a), c(self, amt)) {
                    let v = if k >= w as u128 { 0 } else { x << (k as u32) };
                    return fold_c(self, v, w);
                }
                if c(self, amt) == Some(0) {
                    return Some(a);
                }
            }
            Expr::Shr { a, amount, arith } => {
                if let (Some(x), Some(k)) = (c(self, a), c(self, amount)) {
                    return fold_c(self, shr_value(x, w, k.min(1 << 20) as u32, arith), w);
                }
                if c(self, amount) == Some(0) {
                    return Some(a);
                }
            }
            Expr::ShlC { a, k } => {
                if k == 0 {
                    return Some(a);
                }
                if let Some(x) = c(self, a) {
                    let v = if k >= w { 0 } else { x << k };
                    return fold_c(self, v, w);
                }
            }
            Expr::ShrC { a, k, arith } => {
                if k == 0 {
                    return Some(a);
                }
                if let Some(x) = c(self, a) {
                    return fold_c(self, shr_value(x, w, k, arith), w);
                }
            }
            Expr::ZExt { a, width } => {
                if width == self.width(a) {
                    return Some(a);
                }
                if let Some(x) = c(self, a) {
                    return fold_c(self, x, width);
                }
            }
            Expr::SExt { a, width } => {
                let aw = self.width(a);
                if width == aw {
                    return Some(a);
                }
                if let Some(x) = c(self, a) {
                    let v = if aw < 128 && (x >> (aw - 1)) & 1 == 1 {
                        x | !m128(aw)
                    } else {
                        x
                    };
                    return fold_c(self, v, width);
                }
            }
            Expr::Slice { a, lo, width } => {
                if lo == 0 && width == self.width(a) {
                    return Some(a);
                }
                if let Some(x) = c(self, a) {
                    return fold_c(self, x >> lo, width);
                }
            }
            Expr::Eq(a, b) => {
                if a == b {
                    return fold_c(self, 1, 1);
                }
                if let (Some(x), Some(y)) = (c(self, a), c(self, b)) {
                    return fold_c(self, (x == y) as u128, 1);
                }
            }
            Expr::Ult(a, b) => {
                if a == b {
                    return fold_c(self, 0, 1);
                }
                if let (Some(x), Some(y)) = (c(self, a), c(self, b)) {
                    return fold_c(self, (x < y) as u128, 1);
                }
            }
            Expr::Slt(a, b) => {
                if a == b {
                    return fold_c(self, 0, 1);
                }
                if let (Some(x), Some(y)) = (c(self, a), c(self, b)) {
                    let aw = self.width(a);
                    return fold_c(self, (sext_i128(x, aw) < sext_i128(y, aw)) as u128, 1);
                }
            }
            Expr::Ite { c: cc, t, e } => {
                if t == e {
                    return Some(t);
                }
                if let Some(v) = c(self, cc) {
                    return Some(if v != 0 { t } else { e });
                }
            }
            _ => {}
        }
        None
    }

    // Convenience constructors.
    pub fn c(&mut self, width: u32, value: u128) -> ExprRef {
        self.intern(Expr::Const {
            width,
            value: value & m128(width),
        })
    }
    pub fn input(&mut self, i: u32) -> ExprRef {
        self.intern(Expr::Input(i))
    }
    pub fn state(&mut self, i: u32) -> ExprRef {
        self.intern(Expr::State(i))
    }
    pub fn not(&mut self, a: ExprRef) -> ExprRef {
        self.intern(Expr::Not(a))
    }
    pub fn and(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::And(a, b))
    }
    pub fn or(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::Or(a, b))
    }
    pub fn xor(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::Xor(a, b))
    }
    pub fn add(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::Add(a, b))
    }
    pub fn sub(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::Sub(a, b))
    }
    pub fn mul(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::Mul(a, b))
    }
    pub fn shl(&mut self, a: ExprRef, amount: ExprRef) -> ExprRef {
        self.intern(Expr::Shl(a, amount))
    }
    pub fn shr(&mut self, a: ExprRef, amount: ExprRef, arith: bool) -> ExprRef {
        self.intern(Expr::Shr { a, amount, arith })
    }
    pub fn shlc(&mut self, a: ExprRef, k: u32) -> ExprRef {
        self.intern(Expr::ShlC { a, k })
    }
    pub fn shrc(&mut self, a: ExprRef, k: u32, arith: bool) -> ExprRef {
        self.intern(Expr::ShrC { a, k, arith })
    }
    pub fn zext(&mut self, a: ExprRef, width: u32) -> ExprRef {
        self.intern(Expr::ZExt { a, width })
    }
    pub fn sext(&mut self, a: ExprRef, width: u32) -> ExprRef {
        self.intern(Expr::SExt { a, width })
    }
    pub fn ext(&mut self, a: ExprRef, width: u32, signed: bool) -> ExprRef {
        if signed {
            self.sext(a, width)
        } else {
            self.zext(a, width)
        }
    }
    pub fn slice(&mut self, a: ExprRef, lo: u32, width: u32) -> ExprRef {
        self.intern(Expr::Slice { a, lo, width })
    }
    pub fn eq(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::Eq(a, b))
    }
    pub fn neq(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        let e = self.eq(a, b);
        self.not(e)
    }
    pub fn ult(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::Ult(a, b))
    }
    pub fn slt(&mut self, a: ExprRef, b: ExprRef) -> ExprRef {
        self.intern(Expr::Slt(a, b))
    }
    pub fn lt(&mut self, a: ExprRef, b: ExprRef, signed: bool) -> ExprRef {
        if signed {
            self.slt(a, b)
        } else {
            self.ult(a, b)
        }
    }
    pub fn ite(&mut self, c: ExprRef, t: ExprRef, e: ExprRef) -> ExprRef {
        self.intern(Expr::Ite { c, t, e })
    }
    pub fn eq_const(&mut self, a: ExprRef, v: u128) -> ExprRef {
        let w = self.width(a);
        let c = self.c(w, v);
        self.eq(a, c)
    }
}

fn sext_i128(x: u128, w: u32) -> i128 {
    if w < 128 && (x >> (w - 1)) & 1 == 1 {
        (x | !m128(w)) as i128
    } else {
        x as i128
    }
}

fn shr_value(x: u128, w: u32, k: u32, arith: bool) -> u128 {
    let sign = arith && w > 0 && (x >> (w - 1)) & 1 == 1;
    if k >= w {
        return if sign { m128(w) } else { 0 };
    }
    let mut v = x >> k;
    if sign {
        v |= m128(w) & !(m128(w) >> k);
    }
    v & m128(w)
}

/// Memoizing evaluator. Values are width-masked u128 patterns.
pub struct Evaluator<'a> {
    pool: &'a ExprPool,
    memo: Vec<u128>,
    have: Vec<u64>,
    generation: u64,
}

impl<'a> Evaluator<'a> {
    pub fn new(pool: &'a ExprPool) -> Self {
        Evaluator {
            pool,
            memo: vec![0; pool.len()],
            have: vec![0; pool.len()],
            generation: 0,
        }
    }

    /// Begin a new evaluation cycle (invalidates the memo table).
    pub fn next_cycle(&mut self) {
        self.generation += 1;
    }

    pub fn eval(&mut self, r: ExprRef, inputs: &[u128], states: &[u128]) -> u128 {
        let i = r.0 as usize;
        if self.have[i] == self.generation && self.generation > 0 {
            return self.memo[i];
        }
        let v = self.compute(r, inputs, states);
        self.memo[i] = v;
        self.have[i] = self.generation;
        v
    }

    fn compute(&mut self, r: ExprRef, inp: &[u128], st: &[u128]) -> u128 {
        let w = self.pool.width(r);
        let v = match self.pool.node(r) {
            Expr::Const { value, .. } => value,
            Expr::Input(i) => inp[i as usize],
            Expr::State(i) => st[i as usize],
            Expr::Not(a) => !self.eval(a, inp, st),
            Expr::And(a, b) => self.eval(a, inp, st) & self.eval(b, inp, st),
            Expr::Or(a, b) => self.eval(a, inp, st) | self.eval(b, inp, st),
            Expr::Xor(a, b) => self.eval(a, inp, st) ^ self.eval(b, inp, st),
            Expr::Add(a, b) => self.eval(a, inp, st).wrapping_add(self.eval(b, inp, st)),
            Expr::Sub(a, b) => self.eval(a, inp, st).wrapping_sub(self.eval(b, inp, st)),
            Expr::Mul(a, b) => self.eval(a, inp, st).wrapping_mul(self.eval(b, inp, st)),
            Expr::Shl(a, amt) => {
                let x = self.eval(a, inp, st);
                let k = self.eval(amt, inp, st);
                if k >= w as u128 {
                    0
                } else {
                    x << (k as u32)
                }
            }
            Expr::Shr { a, amount, arith } => {
                let x = self.eval(a, inp, st);
                let k = self.eval(amount, inp, st).min(1 << 20) as u32;
                shr_value(x, w, k, arith)
            }
            Expr::ShlC { a, k } => {
                let x = self.eval(a, inp, st);
                if k >= w {
                    0
                } else {
                    x << k
                }
            }
            Expr::ShrC { a, k, arith } => shr_value(self.eval(a, inp, st), w, k, arith),
            Expr::ZExt { a, .. } => self.eval(a, inp, st),
            Expr::SExt { a, width } => {
                let aw = self.pool.width(a);
                let x = self.eval(a, inp, st);
                if aw < 128 && (x >> (aw - 1)) & 1 == 1 {
                    (x | !m128(aw)) & m128(width)
                } else {
                    x
                }
            }
            Expr::Slice { a, lo, .. } => self.eval(a, inp, st) >> lo,
            Expr::Eq(a, b) => (self.eval(a, inp, st) == self.eval(b, inp, st)) as u128,
            Expr::Ult(a, b) => (self.eval(a, inp, st) < self.eval(b, inp, st)) as u128,
            Expr::Slt(a, b) => {
                let aw = self.pool.width(a);
                (sext_i128(self.eval(a, inp, st), aw) < sext_i128(self.eval(b, inp, st), aw))
                    as u128
            }
            Expr::Ite { c, t, e } => {
                if self.eval(c, inp, st) != 0 {
                    self.eval(t, inp, st)
                } else {
                    self.eval(e, inp, st)
                }
            }
        };
        v & m128(w)
    }
}

/// A width- and frac-typed expression, the unit the lowering works with.
#[derive(Debug, Clone, Copy)]
pub struct TypedExpr {
    pub expr: ExprRef,
    pub width: u32,
    pub frac: u32,
}

/// Lower one graph operator onto pool primitives. Must agree bit for bit
/// with `value::apply_op`.
pub fn lower_op(pool: &mut ExprPool, attrs: &OpAttrs, operands: &[TypedExpr]) -> TypedExpr {
    let kind = attrs.op_kind;
    assert_eq!(operands.len(), kind.arity());
    let signed = attrs.signed;

    if kind.is_comparison() {
        let (a, b) = align2(pool, operands[0], operands[1], signed, 0);
        let e = match kind {
            OpKind::Eq => pool.eq(a, b),
            OpKind::Neq => pool.neq(a, b),
            OpKind::Lt => pool.lt(a, b, signed),
            OpKind::Le => {
                let gt = pool.lt(b, a, signed);
                pool.not(gt)
            }
            _ => unreachable!(),
        };
        return TypedExpr {
            expr: e,
            width: 1,
            frac: 0,
        };
    }

    // (value expr, working width, frac, interpret-signed, overflow flag)
    let (v, frac, interp_signed, ovf) = match kind {
        OpKind::Add | OpKind::Sub => {
            let fc = operands[0].frac.max(operands[1].frac);
            let (a, b) = align2(pool, operands[0], operands[1], signed, 1);
            let e = if kind == OpKind::Add {
                pool.add(a, b)
            } else {
                pool.sub(a, b)
            };
            let fc2 = fc;
            // Unsigned subtraction can go negative; interpret signed then.
            let isigned = signed || kind == OpKind::Sub;
            (e, fc2, isigned, None)
        }
        OpKind::Mul => {
            let wm = (operands[0].width + operands[1].width).min(64);
            let a = pool.ext(operands[0].expr, wm, signed);
            let b = pool.ext(operands[1].expr, wm, signed);
            let e = pool.mul(a, b);
            (e, operands[0].frac + operands[1].frac, signed, None)
        }
        OpKind::And | OpKind::Or | OpKind::Xor => {
            let fc = operands[0].frac.max(operands[1].frac);
            let (a, b) = align2(pool, operands[0], operands[1], signed, 0);
            let e = match kind {
                OpKind::And => pool.and(a, b),
                OpKind::Or => pool.or(a, b),
                OpKind::Xor => pool.xor(a, b),
                _ => unreachable!(),
            };
            (e, fc, signed, None)
        }
        OpKind::Not => {
            let e = pool.not(operands[0].expr);
            (e, operands[0].frac, signed, None)
        }
        OpKind::Shr => {
            let e = pool.shr(operands[0].expr, operands[1].expr, signed);
            (e, operands[0].frac, signed, None)
        }
        OpKind::Shl => {
            let a128 = pool.ext(operands[0].expr, 128, signed);
            let shifted = pool.shl(a128, operands[1].expr);
            // Round trip detects set bits pushed past the 128-bit boundary.
            let back = pool.shr(shifted, operands[1].expr, signed);
            let lost = pool.neq(back, a128);
            let neg = if signed {
                pool.slice(operands[0].expr, operands[0].width - 1, 1)
            } else {
                pool.c(1, 0)
            };
            (shifted, operands[0].frac, signed, Some((lost, neg)))
        }
        OpKind::Mux => {
            let (a, b) = align2(pool, operands[1], operands[2], signed, 0);
            let fc = operands[1].frac.max(operands[2].frac);
            let e = pool.ite(operands[0].expr, a, b);
            (e, fc, signed, None)
        }
        _ => unreachable!(),
    };

    retype_expr(pool, v, frac, interp_signed, ovf, attrs)
}

/// Extend both operands under `signed`, align binary points, and give the
/// result `headroom` extra bits. Returns same-width expressions.
fn align2(
    pool: &mut ExprPool,
    a: TypedExpr,
    b: TypedExpr,
    signed: bool,
    headroom: u32,
) -> (ExprRef, ExprRef) {
    let fc = a.frac.max(b.frac);
    let sa = fc - a.frac;
    let sb = fc - b.frac;
    let w = (a.width + sa).max(b.width + sb) + headroom;
    let ea = pool.ext(a.expr, w, signed);
    let eb = pool.ext(b.expr, w, signed);
    (pool.shlc(ea, sa), pool.shlc(eb, sb))
}

/// Retype an exact working value into the declared result attributes:
/// adjust fraction bits with rounding, then wrap or saturate into the
/// declared width.
fn retype_expr(
    pool: &mut ExprPool,
    v: ExprRef,
    frac: u32,
    interp_signed: bool,
    ovf: Option<(ExprRef, ExprRef)>,
    attrs: &OpAttrs,
) -> TypedExpr {
    let w_t = attrs.width;
    let f_t = attrs.frac_bits();
    let mut cur = v;
    let mut ovf = ovf;

    if frac > f_t {
        let s = frac - f_t;
        // The discard can exceed the working width (heavily fractional
        // multiplies); widen so the round bit position exists.
        if s >= pool.width(cur) {
            cur = pool.ext(cur, s + 1, interp_signed);
        }
        let shifted = pool.shrc(cur, s, interp_signed);
        cur = match attrs.rounding {
            Rounding::Truncate => shifted,
            Rounding::RoundHalfUp => {
                let w = pool.width(cur);
                let bit = pool.slice(cur, s - 1, 1);
                let bitw = pool.zext(bit, w);
                pool.add(shifted, bitw)
            }
        };
    } else if f_t > frac {
        let k = f_t - frac;
        let w = pool.width(cur);
        if w + k <= 128 {
            let ext = pool.ext(cur, w + k, interp_signed);
            cur = pool.shlc(ext, k);
        } else {
            let wide = pool.ext(cur, 128, interp_signed);
            let shifted = pool.shlc(wide, k);
            let back = pool.shrc(shifted, k, interp_signed);
            let lost2 = pool.neq(back, wide);
            let neg2 = if interp_signed {
                let ww = pool.width(wide);
                pool.slice(wide, ww - 1, 1)
            } else {
                pool.c(1, 0)
            };
            ovf = Some(match ovf {
                None => (lost2, neg2),
                Some((l, n)) => {
                    // Once overflowed, the sign of the earlier overflow wins.
                    let lo = pool.or(l, lost2);
                    let nn = pool.ite(l, n, neg2);
                    (lo, nn)
                }
            });
            cur = shifted;
        }
    }

    // Saturation bounds must be representable at the working width under
    // the comparison interpretation (an unsigned upper bound needs one
    // extra bit when compared signed).
    let min_w = if interp_signed && !attrs.signed {
        w_t + 1
    } else {
        w_t
    };
    if pool.width(cur) < min_w {
        cur = pool.ext(cur, min_w, interp_signed);
    }
    let w = pool.width(cur);
    let expr = match attrs.saturation {
        Saturation::Wrap => pool.slice(cur, 0, w_t.min(w)),
        Saturation::Saturate => {
            let (lo_v, hi_v): (u128, u128) = if attrs.signed {
                let half = 1u128 << (w_t - 1);
                (half.wrapping_neg() & m128(w), half - 1)
            } else {
                (0, m128(w_t))
            };
            let lo_c = if attrs.signed && w > w_t {
                // Sign-extend the (negative) lower bound to the working width.
                let small = pool.c(w_t, lo_v);
                pool.sext(small, w)
            } else {
                pool.c(w, lo_v)
            };
            let hi_c = pool.c(w, hi_v);
            let gt = pool.lt(hi_c, cur, interp_signed);
            let lt = pool.lt(cur, lo_c, interp_signed);
            let sel_lo = pool.ite(lt, lo_c, cur);
            let mut sel = pool.ite(gt, hi_c, sel_lo);
            if let Some((lost, neg)) = ovf {
                let clamp = pool.ite(neg, lo_c, hi_c);
                sel = pool.ite(lost, clamp, sel);
            }
            pool.slice(sel, 0, w_t.min(w))
        }
    };
    // Working width always covers the target width except for the degenerate
    // wrap of an already-narrow value.
    let expr = if pool.width(expr) < w_t {
        pool.ext(expr, w_t, interp_signed)
    } else {
        expr
    };
    TypedExpr {
        expr,
        width: w_t,
        frac: f_t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DType, OpAttrs, OpKind, Rounding, Saturation, ALL_OP_KINDS};
    use crate::value::{apply_op, BitVal, Operand};
    use rand::Rng as _;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// The lowered expression route must agree with the value kernel on
    /// random attributes and operands.
    #[test]
    fn lowering_matches_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
        for iter in 0..30_000 {
            let kind = ALL_OP_KINDS[rng.random_range(0..ALL_OP_KINDS.len())];
            let width = if kind.is_comparison() {
                1
            } else {
                rng.random_range(1..=64)
            };
            let dtype = if width > 1 && rng.random_bool(0.5) {
                DType::Fixed
            } else {
                DType::Int
            };
            let attrs = OpAttrs {
                op_kind: kind,
                width,
                dtype,
                signed: rng.random_bool(0.5),
                int_bits: match dtype {
                    DType::Int => width,
                    DType::Fixed => rng.random_range(1..=width),
                },
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
            };
            let mut operands = Vec::new();
            for slot in 0..kind.arity() {
                let w = if kind == OpKind::Mux && slot == 0 {
                    1
                } else {
                    rng.random_range(1..=64)
                };
                let frac = if rng.random_bool(0.5) && w > 1 {
                    rng.random_range(0..w)
                } else {
                    0
                };
                let raw = rng.random::<u64>() & crate::value::mask64(w);
                operands.push(Operand::new(BitVal::new(raw, w), frac));
            }
            let expect = apply_op(&attrs, &operands);

            let mut pool = ExprPool::new();
            let typed: Vec<TypedExpr> = operands
                .iter()
                .map(|o| TypedExpr {
                    expr: pool.c(o.val.width, o.val.raw as u128),
                    width: o.val.width,
                    frac: o.frac,
                })
                .collect();
            let lowered = lower_op(&mut pool, &attrs, &typed);
            let mut ev = Evaluator::new(&pool);
            ev.next_cycle();
            let got = ev.eval(lowered.expr, &[], &[]);
            assert_eq!(
                got, expect.raw as u128,
                "iter {} kind {:?} attrs {:?} operands {:?}",
                iter, kind, attrs, operands
            );
            assert_eq!(lowered.width, expect.width);
        }
    }

    #[test]
    fn pool_folds_constants() {
        let mut p = ExprPool::new();
        let a = p.c(8, 3);
        let b = p.c(8, 5);
        let s = p.add(a, b);
        assert_eq!(p.node(s), Expr::Const { width: 8, value: 8 });
    }
}
