//! Double-double arithmetic (about 32 significant digits).
//!
//! Used to evaluate losses for finite differences: with a step of 1e-6 the
//! rounding noise of an `f64` forward pass is around 1e-10 in the
//! difference quotient, which swamps small gradients.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::sync::OnceLock;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

const TAYLOR_TERMS: usize = 10;
// |r| <= ln2/2 gives |round(256 r)| <= 89
const TABLE_HALF: usize = 90;

/// `1/(k+1)!` for `k < TAYLOR_TERMS`.
fn coefficients() -> &'static [Dd; TAYLOR_TERMS] {
    static C: OnceLock<[Dd; TAYLOR_TERMS]> = OnceLock::new();
    C.get_or_init(|| {
        let mut c = [Dd::ONE; TAYLOR_TERMS];
        let mut f = Dd::ONE;
        for (k, v) in c.iter_mut().enumerate() {
            f = f / Dd::from_f64((k + 1) as f64);
            *v = f;
        }
        c
    })
}

/// `e^(m/256)` for `m` in `-TABLE_HALF..=TABLE_HALF`.
fn table() -> &'static [Dd] {
    static T: OnceLock<Vec<Dd>> = OnceLock::new();
    T.get_or_init(|| {
        (-(TABLE_HALF as i64)..=TABLE_HALF as i64)
            .map(|m| Dd::expm1_reference(Dd::from_f64(m as f64 / 256.0)) + Dd::ONE)
            .collect()
    })
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

// Veltkamp split; the portable target has no fused multiply-add, and the
// library fallback for `mul_add` is far slower than splitting.
fn split(a: f64) -> (f64, f64) {
    let t = 134_217_729.0 * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    if a.abs() > 1e290 || b.abs() > 1e290 {
        return (p, a.mul_add(b, -p));
    }
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub const fn from_f64(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Dd { hi, lo: 0.0 };
        }
        let (h, l) = quick_two_sum(hi, lo);
        Dd { hi: h, lo: l }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn is_finite(self) -> bool {
        self.hi.is_finite()
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn scale_pow2(self, k: i32) -> Self {
        // split so neither factor overflows
        let a = k / 2;
        let f1 = 2f64.powi(a);
        let f2 = 2f64.powi(k - a);
        Dd {
            hi: self.hi * f1 * f2,
            lo: self.lo * f1 * f2,
        }
    }

    /// `exp(s) - 1` for `|s| <= 0.36`: Taylor series on `s / 1024`, then ten
    /// doublings through `e(2s) = 2e(s) + e(s)²`, which keep relative accuracy.
    /// Slow; only used to build the lookup table.
    fn expm1_reference(s: Dd) -> Dd {
        let r = s.scale_pow2(-10);
        let mut term = r;
        let mut sum = r;
        for n in 2..=12 {
            term = term * r / Dd::from_f64(n as f64);
            sum += term;
            if term.hi.abs() < 1e-36 * sum.hi.abs() {
                break;
            }
        }
        for _ in 0..10 {
            sum = sum.scale_pow2(1) + sum * sum;
        }
        sum
    }

    /// `exp(s) - 1` for `|s| <= 1/512` by Horner's rule.
    fn expm1_tiny(s: Dd) -> Dd {
        let c = coefficients();
        let mut p = c[TAYLOR_TERMS - 1];
        for k in (0..TAYLOR_TERMS - 1).rev() {
            p = p * s + c[k];
        }
        p * s
    }

    /// `exp(r) - 1` for `|r| <= 0.35`, as `e^(m/256) · e^s - 1` with
    /// `|s| <= 1/512` and the first factor from a table.
    fn expm1_small(r: Dd) -> Dd {
        let m = (r.hi * 256.0).round();
        if m == 0.0 {
            return Dd::expm1_tiny(r);
        }
        let s = r - Dd::from_f64(m / 256.0);
        let t = table()[(m as i64 + TABLE_HALF as i64) as usize];
        // e^(m/256) e^s - 1 = (e^(m/256) - 1) + e^(m/256)(e^s - 1)
        (t - Dd::ONE) + t * Dd::expm1_tiny(s)
    }

    pub fn exp(self) -> Self {
        if self.hi.is_nan() {
            return self;
        }
        if self.hi < -745.2 {
            return Dd::ZERO;
        }
        if self.hi > 709.7 {
            return Dd::from_f64(f64::INFINITY);
        }
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2 * Dd::from_f64(k);
        (Dd::expm1_small(r) + Dd::ONE).scale_pow2(k as i32)
    }

    pub fn expm1(self) -> Self {
        if self.hi.abs() < 0.34 {
            Dd::expm1_small(self)
        } else {
            self.exp() - Dd::ONE
        }
    }

    pub fn ln(self) -> Self {
        if self.hi.is_nan() || self.hi < 0.0 {
            return Dd::from_f64(f64::NAN);
        }
        if self.hi == 0.0 {
            return Dd::from_f64(f64::NEG_INFINITY);
        }
        if self.hi.is_infinite() {
            return self;
        }
        // one Newton step on exp(y) = x doubles the f64 guess's precision
        let y = Dd::from_f64(self.hi.ln());
        y + self * (-y).exp() - Dd::ONE
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 {
                Dd::ZERO
            } else {
                Dd::from_f64(f64::NAN)
            };
        }
        let y = self.hi.sqrt();
        let (p, e) = two_prod(y, y);
        let r = self - Dd { hi: p, lo: e };
        Dd::norm(y, r.hi / (2.0 * y))
    }

    pub fn tanh(self) -> Self {
        let a = self.abs();
        if a.hi > 40.0 {
            return Dd::from_f64(self.hi.signum());
        }
        let em = (-a.scale_pow2(1)).expm1();
        let t = -em / (Dd::from_f64(2.0) + em);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    pub fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl fmt::Debug for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dd({:e} + {:e})", self.hi, self.lo)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd::from_f64(v)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, o.hi);
        if !s1.is_finite() {
            return Dd { hi: s1, lo: 0.0 };
        }
        let (t1, t2) = two_sum(self.lo, o.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        Dd::norm(s1, s2 + t2)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        if !p.is_finite() {
            return Dd { hi: p, lo: 0.0 };
        }
        Dd::norm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        if !q1.is_finite() || q1 == 0.0 && self.hi == 0.0 {
            return Dd { hi: q1, lo: 0.0 };
        }
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (h, l) = quick_two_sum(q1, q2);
        Dd { hi: h, lo: l } + Dd::from_f64(q3)
    }
}

macro_rules! assign_op {
    ($tr:ident, $m:ident, $op:tt) => {
        impl $tr for Dd {
            fn $m(&mut self, o: Dd) {
                *self = *self $op o;
            }
        }
    };
}
assign_op!(AddAssign, add_assign, +);
assign_op!(SubAssign, sub_assign, -);
assign_op!(MulAssign, mul_assign, *);
assign_op!(DivAssign, div_assign, /);

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::ZERO, |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        let d = (a - b).abs();
        d.hi <= tol * b.abs().hi.max(1e-300)
    }

    #[test]
    fn exp_one_matches_known_expansion() {
        let e = Dd::ONE.exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-31);
    }

    #[test]
    fn sqrt_two_squares_back() {
        let s = Dd::from_f64(2.0).sqrt();
        assert!(close(s * s, Dd::from_f64(2.0), 1e-31));
    }

    #[test]
    fn exp_ln_roundtrip() {
        for &x in &[1e-8, 0.3, 1.0, 2.5, 17.0, 1e5, 3e-200] {
            let v = Dd::from_f64(x) + Dd::from_f64(x * 1e-20);
            let back = v.ln().exp();
            assert!(close(back, v, 1e-26), "{x}: {:?}", (back - v) / v);
        }
        for &x in &[-300.0, -20.0, -1e-9, 0.0, 0.2, 5.0, 300.0] {
            let v = Dd::from_f64(x);
            assert!(close(v.exp().ln(), v, 1e-26) || x == 0.0, "{x}");
        }
    }

    #[test]
    fn table_path_matches_reference_series() {
        let mut x = -0.347;
        while x < 0.347 {
            let v = Dd::from_f64(x) + Dd::from_f64(x * 1.3e-19);
            let fast = Dd::expm1_small(v) + Dd::ONE;
            let slow = Dd::expm1_reference(v) + Dd::ONE;
            assert!(close(fast, slow, 2e-31), "{x}: {:?}", (fast - slow) / slow);
            x += 0.00731;
        }
        let tiny = Dd::from_f64(3e-9);
        assert!(close(tiny.expm1(), Dd::expm1_reference(tiny), 1e-30));
    }

    #[test]
    fn exp_is_additive() {
        let a = Dd::from_f64(0.731);
        let b = Dd::from_f64(-2.25);
        assert!(close((a + b).exp(), a.exp() * b.exp(), 1e-30));
    }

    #[test]
    fn tanh_matches_exp_form_and_is_odd() {
        for &x in &[1e-12, 1e-4, 0.3, 1.7, 8.0] {
            let v = Dd::from_f64(x);
            let e2 = v.scale_pow2(1).exp();
            let expect = (e2 - Dd::ONE) / (e2 + Dd::ONE);
            let tol = if x < 1e-3 { 1e-20 } else { 1e-30 };
            assert!(close(v.tanh(), expect, tol), "{x}");
            assert_eq!((-v).tanh(), -v.tanh());
        }
        // small-argument series: tanh x = x - x³/3 + 2x⁵/15 - ...
        let x = Dd::from_f64(1e-6);
        let x3 = x * x * x;
        let series = x - x3 / Dd::from_f64(3.0) + Dd::from_f64(2.0) * x3 * x * x / Dd::from_f64(15.0);
        assert!(close(x.tanh(), series, 1e-28));
    }

    #[test]
    fn underflow_and_specials() {
        assert_eq!(Dd::from_f64(-1e30).exp(), Dd::ZERO);
        assert!(Dd::from_f64(1e4).exp().hi.is_infinite());
        assert!(Dd::from_f64(-1.0).ln().hi.is_nan());
        assert_eq!(Dd::ZERO.sqrt(), Dd::ZERO);
    }

    #[test]
    fn division_inverts_multiplication() {
        let a = Dd::from_f64(1.0) / Dd::from_f64(3.0);
        assert!(close(a * Dd::from_f64(3.0), Dd::ONE, 1e-31));
    }
}
