//! Double-double scalar: an unevaluated sum `hi + lo` of two `f64`s with
//! `|lo| ≤ ulp(hi)/2`, giving about 106 bits of mantissa.
//!
//! Used to take finite differences whose rounding noise sits far below the
//! `f64` gradients being checked. Arithmetic, `sqrt`, `exp`, `ln`, `ln_1p`,
//! `tanh` and `powi` are carried at full width. Trigonometric and the other
//! rarely used functions fall back to `f64` on the leading component.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

/// `1/n!` for `n = 3..=12`, to double-double precision.
const INV_FACT: [Dd; 10] = [
    Dd { hi: 0.16666666666666666, lo: 9.25185853854297e-18 },
    Dd { hi: 0.041666666666666664, lo: 2.3129646346357427e-18 },
    Dd { hi: 0.008333333333333333, lo: 1.1564823173178714e-19 },
    Dd { hi: 0.001388888888888889, lo: -5.300543954373577e-20 },
    Dd { hi: 0.0001984126984126984, lo: 1.7209558293420705e-22 },
    Dd { hi: 2.48015873015873e-05, lo: 2.1511947866775882e-23 },
    Dd { hi: 2.7557319223985893e-06, lo: -1.858393274046472e-22 },
    Dd { hi: 2.755731922398589e-07, lo: 2.3767714622250297e-23 },
    Dd { hi: 2.505210838544172e-08, lo: -1.448814070935912e-24 },
    Dd { hi: 2.08767569878681e-09, lo: -1.20734505911326e-25 },
];

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    // exact product error through a fused multiply-add
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    #[inline]
    pub const fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    /// Normalizes an arbitrary pair.
    #[inline]
    pub fn new(hi: f64, lo: f64) -> Self {
        let (h, l) = two_sum(hi, lo);
        Dd { hi: h, lo: l }
    }

    #[inline]
    pub fn hi(self) -> f64 {
        self.hi
    }

    #[inline]
    pub fn lo(self) -> f64 {
        self.lo
    }

    #[inline]
    fn non_finite(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    #[inline]
    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        let (h, l) = quick_two_sum(p, e + self.lo * b);
        Dd { hi: h, lo: l }
    }

    fn ldexp(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    fn exp_dd(self) -> Self {
        if self.hi > 709.7 {
            return Self::non_finite(f64::INFINITY);
        }
        if self.hi < -745.2 {
            return Self::ZERO;
        }
        if self.hi.is_nan() {
            return self;
        }
        // exp(x) = 2^k · exp(r)^512 with |r| ≤ ln2/1024
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::from_f64(k)).ldexp(-9);
        // exp(r) − 1 = r + r²·Σ r^(n−2)/n!, truncated where r^13/13! < 1e-50
        let mut poly = INV_FACT[INV_FACT.len() - 1];
        for &c in INV_FACT[..INV_FACT.len() - 1].iter().rev() {
            poly = poly * r + c;
        }
        let mut s = r + r * r * (poly * r + Dd::from_f64(0.5));
        // (1 + s)² − 1 = s·(s + 2), nine times
        for _ in 0..9 {
            s = s * (s + Dd::from_f64(2.0));
        }
        (s + Self::ONE).ldexp(k as i32)
    }

    fn ln_dd(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::non_finite(self.hi.ln());
        }
        // one Newton step on exp(y) = x doubles the f64 accuracy
        let y = Dd::from_f64(self.hi.ln());
        y + self * (-y).exp_dd() - Self::ONE
    }
}

impl fmt::Debug for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dd({:e} + {:e})", self.hi, self.lo)
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
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

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        if !s.is_finite() {
            return Dd::non_finite(s);
        }
        // the cheap variant: the error is 2^-106 relative to the operands
        // rather than to the sum, plenty for differencing a loss
        let (s, e) = quick_two_sum(s, e + (self.lo + b.lo));
        Dd { hi: s, lo: e }
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        if !p.is_finite() {
            return Dd::non_finite(p);
        }
        let (h, l) = quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi));
        Dd { hi: h, lo: l }
    }
}

impl Div for Dd {
    type Output = Dd;
    #[inline]
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() {
            return Dd::non_finite(q1);
        }
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (h, l) = quick_two_sum(q1, q2);
        Dd { hi: h, lo: l } + Dd::from_f64(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, b: Dd) -> Dd {
        self - (self / b).trunc() * b
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for Dd {
            #[inline]
            fn $m(&mut self, b: Dd) {
                *self = *self $op b;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::ZERO, |a, b| a + b)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd::ZERO
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::ONE
    }
}

impl Num for Dd {
    type FromStrRadixErr = num_traits::ParseFloatError;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::from_f64)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        let t = self.trunc();
        t.hi.to_i64().and_then(|h| h.checked_add(t.lo.to_i64()?))
    }
    fn to_u64(&self) -> Option<u64> {
        let t = self.trunc();
        let h = t.hi.to_i128()?;
        let l = t.lo.to_i128()?;
        u64::try_from(h + l).ok()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        // the rounding remainder is exact in i128
        let lo = (n as i128 - hi as i128) as f64;
        Some(Dd::new(hi, lo))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        let lo = (n as i128 - hi as i128) as f64;
        Some(Dd::new(hi, lo))
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(Dd::from_f64(x))
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Dd::from_f64)
    }
}

macro_rules! via_hi {
    ($($m:ident),*) => {$(
        fn $m(self) -> Self {
            Dd::from_f64(self.hi.$m())
        }
    )*};
}

impl Float for Dd {
    fn nan() -> Self {
        Dd::non_finite(f64::NAN)
    }
    fn infinity() -> Self {
        Dd::non_finite(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Dd::non_finite(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Dd::non_finite(-0.0)
    }
    fn min_value() -> Self {
        Dd::from_f64(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Dd::from_f64(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Dd::from_f64(f64::MAX)
    }
    fn epsilon() -> Self {
        // 2^-104
        Dd::from_f64(4.930_380_657_631_324e-32)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let h = self.hi.floor();
        if h == self.hi {
            Dd::new(h, self.lo.floor())
        } else {
            Dd::from_f64(h)
        }
    }
    fn ceil(self) -> Self {
        let h = self.hi.ceil();
        if h == self.hi {
            Dd::new(h, self.lo.ceil())
        } else {
            Dd::from_f64(h)
        }
    }
    fn round(self) -> Self {
        let half = Dd::from_f64(0.5);
        if self.hi >= 0.0 {
            (self + half).floor()
        } else {
            -((-self) + half).floor()
        }
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.hi.is_sign_negative()) {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Dd::from_f64(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Dd::ONE / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut e = n.unsigned_abs();
        let mut acc = Dd::ONE;
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base *= base;
            e >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        if n.fract().is_zero() && n.abs().hi < i32::MAX as f64 {
            return self.powi(n.hi as i32);
        }
        (n * self.ln_dd()).exp_dd()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::from_f64(self.hi.sqrt());
        }
        if !self.hi.is_finite() {
            return Dd::non_finite(self.hi.sqrt());
        }
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let axd = Dd::from_f64(ax);
        axd + Dd::from_f64((self - axd * axd).hi * (x * 0.5))
    }
    fn exp(self) -> Self {
        self.exp_dd()
    }
    fn exp2(self) -> Self {
        (self * LN2).exp_dd()
    }
    fn ln(self) -> Self {
        self.ln_dd()
    }
    fn log(self, base: Self) -> Self {
        self.ln_dd() / base.ln_dd()
    }
    fn log2(self) -> Self {
        self.ln_dd() / LN2
    }
    fn log10(self) -> Self {
        self.ln_dd() / Dd::from_f64(10.0).ln_dd()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Dd::ZERO
        }
    }
    fn cbrt(self) -> Self {
        if self.hi == 0.0 || !self.hi.is_finite() {
            return Dd::from_f64(self.hi.cbrt());
        }
        // one Newton step from the f64 root
        let y = Dd::from_f64(self.hi.cbrt());
        y - (y * y * y - self) / (Dd::from_f64(3.0) * y * y)
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    via_hi!(sin, cos, tan, asin, acos, atan, sinh, cosh, asinh, acosh, atanh);
    fn atan2(self, other: Self) -> Self {
        Dd::from_f64(self.hi.atan2(other.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        if self.hi.abs() < 1e-3 {
            // Taylor series keeps the leading bits that exp(x) − 1 would cancel
            let mut term = self;
            let mut s = self;
            for n in 2..=20 {
                term = term * self / Dd::from_f64(n as f64);
                s += term;
            }
            s
        } else {
            self.exp_dd() - Dd::ONE
        }
    }
    fn ln_1p(self) -> Self {
        let one_plus = Dd::ONE + self;
        if self.hi.abs() < 1e-3 {
            // Newton on exp_m1(y) = x avoids the cancellation in 1 + x
            let y = Dd::from_f64(self.hi.ln_1p());
            let em = y.exp_m1();
            y - (em - self) / (em + Dd::ONE)
        } else {
            one_plus.ln_dd()
        }
    }
    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Dd::from_f64(self.hi.signum());
        }
        // evaluated on |x| so the result is exactly odd
        let a = self.abs();
        let em = (a + a).exp_m1();
        let t = em / (em + Dd::from_f64(2.0));
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for Dd {}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        ((a - b).abs() / b.abs().max(Dd::from_f64(1e-300))).hi < tol
    }

    #[test]
    fn thirds_carry_double_width() {
        let third = Dd::ONE / Dd::from_f64(3.0);
        let back = third * Dd::from_f64(3.0) - Dd::ONE;
        assert!(back.hi.abs() < 1e-31, "{back:?}");
        assert!(third.lo != 0.0);
    }

    #[test]
    fn sqrt_squares_back() {
        for x in [2.0, 0.3, 1e-20, 7.5e40] {
            let r = Dd::from_f64(x).sqrt();
            assert!(close(r * r, Dd::from_f64(x), 1e-31), "{x}");
        }
    }

    #[test]
    fn exp_ln_round_trip() {
        for x in [-30.0, -1.0, -1e-9, 0.0, 0.5, 1.0, 17.25, 300.0] {
            let d = Dd::from_f64(x) + Dd::from_f64(x * 1e-17);
            let back = d.exp().ln();
            assert!((back - d).abs().hi <= 1e-30 * x.abs().max(1.0), "{x}: {back:?}");
        }
    }

    #[test]
    fn exp_one_matches_e() {
        // e = 2.718281828459045 + 1.4456468917292502e-16
        let e = Dd::ONE.exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-31);
    }

    #[test]
    fn ln_1p_and_exp_m1_keep_tiny_arguments() {
        let x = Dd::from_f64(1e-12) + Dd::from_f64(3e-30);
        let y = x.ln_1p();
        // ln(1+x) = x − x²/2 + …
        let series = x - x * x / Dd::from_f64(2.0) + x * x * x / Dd::from_f64(3.0);
        assert!(close(y, series, 1e-30));
        assert!(close(y.exp_m1(), x, 1e-30));
    }

    #[test]
    fn tanh_is_odd_and_saturates() {
        let x = Dd::from_f64(0.7);
        assert_eq!(x.tanh(), -(-x).tanh());
        // reference from 200-bit arithmetic
        let want = Dd::new(0.604_367_777_117_163_5, -2.791_618_001_542_534_6e-17);
        assert!(close(x.tanh(), want, 1e-30), "{:?}", x.tanh());
        assert_eq!(Dd::from_f64(50.0).tanh(), Dd::ONE);
    }

    #[test]
    fn integer_conversions_are_exact() {
        let n = (1u64 << 60) + 1;
        let d = Dd::from_u64(n).unwrap();
        assert_eq!(d.to_u64(), Some(n));
        assert_eq!(Dd::from_i64(-7).unwrap().to_i64(), Some(-7));
        assert_eq!(Dd::from_f64(2.5).round(), Dd::from_f64(3.0));
        assert_eq!(Dd::from_f64(-2.5).round(), Dd::from_f64(-3.0));
    }
}
