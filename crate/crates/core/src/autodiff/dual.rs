use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Scalar arithmetic shared by the plain and the forward-over-reverse sweeps.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(v: f64) -> Self;
    fn primal(self) -> f64;
    fn mul_f(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn acos(self) -> Self;
    fn powf(self, p: f64) -> Self;

    fn is_zero(self) -> bool;

    fn sigmoid(self) -> Self {
        Self::cst(1.0) / (Self::cst(1.0) + (-self).exp())
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn primal(self) -> f64 {
        self
    }
    #[inline]
    fn mul_f(self, c: f64) -> Self {
        self * c
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
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn acos(self) -> Self {
        f64::acos(self)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
    #[inline]
    fn is_zero(self) -> bool {
        self == 0.0
    }
}

/// First-order dual number `primal + ε·tangent`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub primal: f64,
    pub tangent: f64,
}

impl Dual {
    pub const fn new(primal: f64, tangent: f64) -> Self {
        Dual { primal, tangent }
    }

    #[inline]
    fn chain(self, f: f64, df: f64) -> Self {
        Dual { primal: f, tangent: df * self.tangent }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.primal + o.primal, self.tangent + o.tangent)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.primal += o.primal;
        self.tangent += o.tangent;
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.primal - o.primal, self.tangent - o.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.primal * o.primal, self.primal * o.tangent + self.tangent * o.primal)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.primal / o.primal;
        Dual::new(q, (self.tangent - q * o.tangent) / o.primal)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.primal, -self.tangent)
    }
}

impl Scalar for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    #[inline]
    fn primal(self) -> f64 {
        self.primal
    }
    #[inline]
    fn mul_f(self, c: f64) -> Self {
        Dual::new(self.primal * c, self.tangent * c)
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.primal.exp();
        self.chain(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.chain(self.primal.ln(), 1.0 / self.primal)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.primal.sqrt();
        self.chain(s, 0.5 / s)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.primal.tanh();
        self.chain(t, 1.0 - t * t)
    }
    #[inline]
    fn sin(self) -> Self {
        self.chain(self.primal.sin(), self.primal.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.chain(self.primal.cos(), -self.primal.sin())
    }
    #[inline]
    fn acos(self) -> Self {
        let x = self.primal;
        self.chain(x.acos(), -1.0 / (1.0 - x * x).sqrt())
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        let x = self.primal;
        self.chain(x.powf(p), if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) })
    }
    #[inline]
    fn is_zero(self) -> bool {
        self.primal == 0.0 && self.tangent == 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let a = Dual::new(2.0, 3.0);
        let b = Dual::new(5.0, 7.0);
        let p = a * b;
        assert_eq!(p.primal, 10.0);
        assert_eq!(p.tangent, 2.0 * 7.0 + 3.0 * 5.0);
    }

    #[test]
    fn quotient_and_transcendentals() {
        let x = Dual::new(0.3, 1.0);
        assert!(((x / (x + Dual::cst(1.0))).tangent - 1.0 / 1.3f64.powi(2)).abs() < 1e-14);
        assert!((x.exp().tangent - 0.3f64.exp()).abs() < 1e-14);
        assert!((x.acos().tangent + 1.0 / (1.0 - 0.09f64).sqrt()).abs() < 1e-14);
        assert!((x.powf(3.0).tangent - 3.0 * 0.09).abs() < 1e-14);
    }
}
