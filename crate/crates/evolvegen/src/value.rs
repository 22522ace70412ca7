//! Exact scaled-integer arithmetic for graph operators.
//!
//! Every value in a computation graph is a raw two's-complement bit pattern
//! of a declared width (at most 64 bits). Fixed-point values scale the raw
//! integer by `2^-frac`. An operator
//!
//! 1. reads its operands and extends them per the operator's signedness,
//! 2. aligns binary points (left shift to the largest `frac`; multiplication
//!    adds fracs instead),
//! 3. computes the exact integer result,
//! 4. retypes the result to the operator's declared attributes: a shift with
//!    the declared rounding mode drops or adds fraction bits, then the value
//!    is wrapped or saturated into the declared width.
//!
//! The one deliberate loss of information is multiplication: its natural
//! width is `min(w1 + w2, 64)` and the exact product is wrapped into that
//! width before retyping, which keeps all derived datapaths at most 64 bits
//! wide.
//!
//! All intermediates here fit in 128 bits except oversized left shifts,
//! which are tracked with an explicit overflow sign so that saturation still
//! sees the true magnitude.

use crate::graph::{OpAttrs, OpKind, Rounding, Saturation};

/// A raw bit-pattern value of a declared width (1..=64). Bits above `width`
/// are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BitVal {
    pub raw: u64,
    pub width: u32,
}

impl BitVal {
    pub fn new(raw: u64, width: u32) -> Self {
        debug_assert!((1..=64).contains(&width));
        BitVal {
            raw: raw & mask64(width),
            width,
        }
    }

    pub fn zero(width: u32) -> Self {
        BitVal { raw: 0, width }
    }

    /// Value as an unsigned integer.
    pub fn as_unsigned(self) -> u64 {
        self.raw
    }

    /// Value as a signed integer (two's complement at `width`).
    pub fn as_signed(self) -> i64 {
        let w = self.width;
        if w == 64 {
            self.raw as i64
        } else if self.raw >> (w - 1) & 1 == 1 {
            (self.raw | !mask64(w)) as i64
        } else {
            self.raw as i64
        }
    }
}

pub fn mask64(width: u32) -> u64 {
    if width >= 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

fn mask128(width: u32) -> u128 {
    if width >= 128 {
        u128::MAX
    } else {
        (1u128 << width) - 1
    }
}

/// An operand value together with its fraction-bit count.
#[derive(Debug, Clone, Copy)]
pub struct Operand {
    pub val: BitVal,
    pub frac: u32,
}

impl Operand {
    pub fn new(val: BitVal, frac: u32) -> Self {
        Operand { val, frac }
    }
    pub fn int(val: BitVal) -> Self {
        Operand { val, frac: 0 }
    }
}

/// Exact intermediate: the low 128 bits of the true value plus an overflow
/// sign when the true value does not fit. The low bits are always exact mod
/// 2^128.
#[derive(Debug, Clone, Copy)]
struct Wide {
    pat: i128,
    /// 0 when `pat` is the exact value; otherwise the sign of the true value.
    ovf: i8,
}

impl Wide {
    fn exact(v: i128) -> Self {
        Wide { pat: v, ovf: 0 }
    }
}

fn extend(v: BitVal, signed: bool) -> i128 {
    if signed {
        v.as_signed() as i128
    } else {
        v.as_unsigned() as i128
    }
}

/// Apply one operator with fully resolved attributes to its operands.
///
/// Operand count must match the operator arity. For MUX the select comes
/// first; for shifts the amount comes second.
pub fn apply_op(attrs: &OpAttrs, operands: &[Operand]) -> BitVal {
    let kind = attrs.op_kind;
    assert_eq!(operands.len(), kind.arity(), "operand arity mismatch");
    let signed = attrs.signed;

    if kind.is_comparison() {
        let (a, b, fc) = align2(operands[0], operands[1], signed);
        let r = match kind {
            OpKind::Eq => a == b,
            OpKind::Neq => a != b,
            OpKind::Lt => a < b,
            OpKind::Le => a <= b,
            _ => unreachable!(),
        };
        let _ = fc;
        return BitVal::new(r as u64, 1);
    }

    let (wide, frac) = match kind {
        OpKind::Add | OpKind::Sub => {
            let (a, b, fc) = align2(operands[0], operands[1], signed);
            let (pat, o) = if kind == OpKind::Add {
                a.overflowing_add(b)
            } else {
                a.overflowing_sub(b)
            };
            // i128 overflow means the true value is just past +/-2^127; the
            // sign is the opposite of the wrapped pattern's sign.
            let ovf = if o {
                if pat < 0 {
                    1
                } else {
                    -1
                }
            } else {
                0
            };
            (Wide { pat, ovf }, fc)
        }
        OpKind::Mul => {
            let a = extend(operands[0].val, signed);
            let b = extend(operands[1].val, signed);
            let natural_w = (operands[0].val.width + operands[1].val.width).min(64);
            let (prod, _) = a.overflowing_mul(b);
            // Wrap the exact product into the capped natural width, then
            // reinterpret under the operator signedness.
            let low = (prod as u128) & mask128(natural_w);
            let v = reinterpret(low, natural_w, signed);
            (Wide::exact(v), operands[0].frac + operands[1].frac)
        }
        OpKind::And | OpKind::Or | OpKind::Xor => {
            let (a, b, fc) = align2(operands[0], operands[1], signed);
            let pat = match kind {
                OpKind::And => a & b,
                OpKind::Or => a | b,
                OpKind::Xor => a ^ b,
                _ => unreachable!(),
            };
            (Wide::exact(pat), fc)
        }
        OpKind::Not => {
            // Complement at the operand width, reinterpreted under the
            // operator signedness (unsigned ~x is 2^w - 1 - x, not -x - 1).
            let a = extend(operands[0].val, signed);
            let w = operands[0].val.width;
            let v = reinterpret(!a as u128 & mask128(w), w, signed);
            (Wide::exact(v), operands[0].frac)
        }
        OpKind::Shl => {
            let a = extend(operands[0].val, signed);
            let count = operands[1].val.as_unsigned();
            (shl_wide(a, count), operands[0].frac)
        }
        OpKind::Shr => {
            let a = extend(operands[0].val, signed);
            let count = operands[1].val.as_unsigned().min(127) as u32;
            (Wide::exact(a >> count), operands[0].frac)
        }
        OpKind::Mux => {
            let sel = operands[0].val.raw != 0;
            let (a, b, fc) = align2(operands[1], operands[2], signed);
            (Wide::exact(if sel { a } else { b }), fc)
        }
        OpKind::Eq | OpKind::Neq | OpKind::Lt | OpKind::Le => unreachable!(),
    };

    retype(wide, frac, attrs)
}

/// Extend both operands under `signed` and align their binary points.
/// Returns the aligned values and the common frac.
fn align2(a: Operand, b: Operand, signed: bool) -> (i128, i128, u32) {
    let fc = a.frac.max(b.frac);
    let av = extend(a.val, signed) << (fc - a.frac);
    let bv = extend(b.val, signed) << (fc - b.frac);
    (av, bv, fc)
}

/// Exact left shift of a <=64-bit value by an arbitrary count.
fn shl_wide(a: i128, count: u64) -> Wide {
    if a == 0 {
        return Wide::exact(0);
    }
    let sign: i8 = if a < 0 { -1 } else { 1 };
    // Number of significant bits of |a| (<= 64 for inputs extended from
    // 64-bit patterns; -2^63 needs 64 bits).
    let bl = 128 - a.unsigned_abs().leading_zeros();
    if count <= 127 && bl + count as u32 <= 127 {
        Wide::exact(a << count)
    } else {
        let pat = if count >= 128 {
            0i128
        } else {
            ((a as u128) << count) as i128
        };
        Wide { pat, ovf: sign }
    }
}

fn reinterpret(low: u128, width: u32, signed: bool) -> i128 {
    if signed && width < 128 && (low >> (width - 1)) & 1 == 1 {
        (low | !mask128(width)) as i128
    } else {
        low as i128
    }
}

/// Convert an exact intermediate with `frac` fraction bits into the declared
/// result type of `attrs`.
fn retype(v: Wide, frac: u32, attrs: &OpAttrs) -> BitVal {
    let w_t = attrs.width;
    let f_t = attrs.frac_bits();
    let mut pat = v.pat;
    let mut ovf = v.ovf;

    if frac > f_t {
        let s = frac - f_t;
        if ovf == 0 {
            let shifted = pat >> s;
            pat = match attrs.rounding {
                Rounding::Truncate => shifted,
                Rounding::RoundHalfUp => shifted + ((pat >> (s - 1)) & 1),
            };
        } else {
            // Low bits of the true value are exact in `pat`; a logical shift
            // keeps the bits the target can observe exact. Saturation is
            // decided by `ovf` alone (|true| >= 2^127 >> any 64-bit bound).
            let shifted = ((pat as u128) >> s) as i128;
            pat = match attrs.rounding {
                Rounding::Truncate => shifted,
                Rounding::RoundHalfUp => shifted + (((pat as u128) >> (s - 1)) & 1) as i128,
            };
        }
    } else if f_t > frac {
        let s = f_t - frac;
        if ovf == 0 {
            let w = shl_wide_i128(pat, s);
            pat = w.pat;
            ovf = w.ovf;
        } else {
            pat = ((pat as u128) << s) as i128;
        }
    }

    let (lo, hi): (i128, i128) = if attrs.signed {
        (-(1i128 << (w_t - 1)), (1i128 << (w_t - 1)) - 1)
    } else {
        (0, mask128(w_t) as i128)
    };

    let raw = match attrs.saturation {
        Saturation::Wrap => (pat as u128 as u64) & mask64(w_t),
        Saturation::Saturate => {
            if ovf > 0 || (ovf == 0 && pat > hi) {
                hi as u128 as u64 & mask64(w_t)
            } else if ovf < 0 || pat < lo {
                lo as u128 as u64 & mask64(w_t)
            } else {
                (pat as u128 as u64) & mask64(w_t)
            }
        }
    };
    BitVal::new(raw, w_t)
}

/// Left shift of an arbitrary i128 (not just a 64-bit extension), used when
/// retyping adds fraction bits.
fn shl_wide_i128(a: i128, count: u32) -> Wide {
    if a == 0 {
        return Wide::exact(0);
    }
    let sign: i8 = if a < 0 { -1 } else { 1 };
    let bl = 128 - a.unsigned_abs().leading_zeros();
    if bl + count <= 127 {
        Wide::exact(a << count)
    } else {
        let pat = if count >= 128 {
            0
        } else {
            ((a as u128) << count) as i128
        };
        Wide { pat, ovf: sign }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DType;

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

    #[test]
    fn add_wraps_mod_width() {
        // 9 + 9 at width 4, wrap: 18 mod 16 = 2
        let a = attrs(OpKind::Add, 4);
        let r = apply_op(
            &a,
            &[
                Operand::int(BitVal::new(9, 4)),
                Operand::int(BitVal::new(9, 4)),
            ],
        );
        assert_eq!(r.raw, 2);
    }

    #[test]
    fn add_saturates_signed() {
        // 7 + 7 at signed width 4, saturate: clamps at 7
        let mut a = attrs(OpKind::Add, 4);
        a.signed = true;
        a.saturation = Saturation::Saturate;
        let r = apply_op(
            &a,
            &[
                Operand::int(BitVal::new(7, 4)),
                Operand::int(BitVal::new(7, 4)),
            ],
        );
        assert_eq!(r.as_signed(), 7);
    }

    #[test]
    fn fixed_add_saturate_and_wrap() {
        // width 4, int_bits 2, signed => frac 2. 1.75 is raw 7.
        let mut a = attrs(OpKind::Add, 4);
        a.signed = true;
        a.dtype = DType::Fixed;
        a.int_bits = 2;
        a.saturation = Saturation::Saturate;
        let x = Operand::new(BitVal::new(7, 4), 2);
        let r = apply_op(&a, &[x, x]);
        assert_eq!(r.as_signed(), 7, "1.75 + 1.75 saturates at 1.75 (raw 7)");

        a.saturation = Saturation::Wrap;
        let r = apply_op(&a, &[x, x]);
        assert_eq!(r.as_signed(), -2, "raw 14 wraps to -2, i.e. -0.5");
    }

    #[test]
    fn mul_caps_natural_width() {
        // 64-bit unsigned mul wraps into 64 bits before retype.
        let a = attrs(OpKind::Mul, 64);
        let big = BitVal::new(u64::MAX, 64);
        let r = apply_op(&a, &[Operand::int(big), Operand::int(big)]);
        assert_eq!(r.raw, u64::MAX.wrapping_mul(u64::MAX));
    }

    #[test]
    fn shl_saturation_sees_true_magnitude() {
        let mut a = attrs(OpKind::Shl, 8);
        a.saturation = Saturation::Saturate;
        let r = apply_op(
            &a,
            &[
                Operand::int(BitVal::new(1, 8)),
                Operand::int(BitVal::new(200, 8)),
            ],
        );
        assert_eq!(r.raw, 255, "1 << 200 saturates unsigned 8-bit");
    }

    #[test]
    fn round_half_up_on_negative() {
        // -3 with 1 frac bit (-1.5) rounded half-up to 0 frac bits => -1.
        let mut a = attrs(OpKind::Add, 4);
        a.signed = true;
        a.rounding = Rounding::RoundHalfUp;
        let x = Operand::new(BitVal::new(0b1101, 4), 1); // -1.5
        let zero = Operand::new(BitVal::new(0, 4), 1);
        let r = apply_op(&a, &[x, zero]);
        assert_eq!(r.as_signed(), -1);
    }
}
