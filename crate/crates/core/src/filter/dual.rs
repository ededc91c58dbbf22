//! Forward-mode dual numbers over the scalar kernel's primitive quantities.

use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

/// Number of primitive quantities; see [`Primitive`].
pub const N: usize = 17;

/// Tangent slots of the scalar kernel inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Primitive {
    F = 0,
    V,
    Gamma0,
    Gamma1,
    G0,
    G1,
    W0,
    W1,
    Mean0,
    Mean1,
    Var0,
    Var1,
    Prob0,
    /// `α_0 + xᵀβ_0`.
    Base0,
    Base1,
    Zeta0,
    Zeta1,
}

/// Arithmetic needed by the generic kernel.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
}

/// Value with `M` tangent components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const M: usize = N> {
    pub v: f64,
    pub d: [f64; M],
}

impl<const M: usize> Dual<M> {
    /// Seeds tangent component `slot`.
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; M];
        d[slot] = 1.0;
        Self { v, d }
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Self { v, d }
    }
}

impl<const M: usize> Real for Dual<M> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; M] }
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
    #[inline]
    fn recip(self) -> Self {
        let r = 1.0 / self.v;
        self.chain(r, -r * r)
    }
}

impl<const M: usize> Add for Dual<M> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl<const M: usize> AddAssign for Dual<M> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        self.v += o.v;
        for (a, b) in self.d.iter_mut().zip(&o.d) {
            *a += b;
        }
    }
}

impl<const M: usize> Sub for Dual<M> {
    type Output = Self;
    #[inline]
    fn sub(mut self, o: Self) -> Self {
        self -= o;
        self
    }
}

impl<const M: usize> SubAssign for Dual<M> {
    #[inline]
    fn sub_assign(&mut self, o: Self) {
        self.v -= o.v;
        for (a, b) in self.d.iter_mut().zip(&o.d) {
            *a -= b;
        }
    }
}

impl<const M: usize> Mul for Dual<M> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; M];
        for i in 0..M {
            d[i] = self.d[i] * o.v + o.d[i] * self.v;
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const M: usize> MulAssign for Dual<M> {
    #[inline]
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}

impl<const M: usize> Div for Dual<M> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v / o.v;
        let mut d = [0.0; M];
        for i in 0..M {
            d[i] = (self.d[i] - q * o.d[i]) * inv;
        }
        Self { v: q, d }
    }
}

impl<const M: usize> DivAssign for Dual<M> {
    #[inline]
    fn div_assign(&mut self, o: Self) {
        *self = *self / o;
    }
}

impl<const M: usize> Neg for Dual<M> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const M: usize> Add<f64> for Dual<M> {
    type Output = Self;
    #[inline]
    fn add(mut self, o: f64) -> Self {
        self.v += o;
        self
    }
}

impl<const M: usize> Mul<f64> for Dual<M> {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        self.chain(self.v * o, o)
    }
}
