//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records scalar primitives as they are evaluated. A reverse
//! sweep yields gradients; threading [`Dual`] numbers through the same
//! sweep (forward-over-reverse) yields exact Hessian-vector products at
//! a few times the cost of a gradient, without forming the Hessian.
//!
//! ```
//! use ffstack::autodiff::{grad, hvp};
//!
//! // f(x) = x0² x1
//! let f = |t: &mut ffstack::autodiff::Tape, x: &[ffstack::autodiff::Var]| {
//!     let sq = t.mul(x[0], x[0]);
//!     t.mul(sq, x[1])
//! };
//! let (_, g) = grad(f, &[1.0, 1.0]).unwrap();
//! assert_eq!(g, vec![2.0, 1.0]);
//! assert_eq!(hvp(f, &[1.0, 1.0], &[1.0, 0.0]).unwrap(), vec![2.0, 2.0]);
//! ```

mod dual;
mod tape;

pub use dual::{Dual, Scalar};
pub use tape::{Adjoints, SecondOrder, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("non-finite value produced by op #{op_index} ({op})")]
    NonFinite { op_index: usize, op: &'static str },
}

/// Value and gradient of `f` at `x`.
pub fn grad<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>), AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let xs = tape.inputs(x);
    let out = f(&mut tape, &xs);
    let adj = tape.gradient(out)?;
    Ok((tape.value(out), adj.collect(&xs)))
}

/// `∇²f(x) · v` by forward-over-reverse.
pub fn hvp<F>(f: F, x: &[f64], v: &[f64]) -> Result<Vec<f64>, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert_eq!(x.len(), v.len(), "direction must match input dimension");
    let mut tape = Tape::new();
    let xs = tape.inputs(x);
    let out = f(&mut tape, &xs);
    let dir: Vec<(Var, f64)> = xs.iter().copied().zip(v.iter().copied()).collect();
    let so = tape.hvp(out, &dir)?;
    Ok(so.hvps(&xs))
}

/// Evaluates `f` on a fresh tape, forward only.
pub fn eval<F>(f: F, x: &[f64]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let xs = tape.inputs(x);
    let out = f(&mut tape, &xs);
    tape.value(out)
}

/// Max over coordinates of `|ad − fd| / max(1, |fd|)` where `fd` is a
/// central difference with step `h`.
pub fn check_grad<F>(f: F, x: &[f64], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let gradient = |p: &[f64]| grad(&f, p).map(|(_, g)| g).unwrap_or_else(|_| vec![f64::NAN; p.len()]);
    check_grad_with(|p| eval(&f, p), gradient, x, h)
}

/// Same criterion as [`check_grad`] for an arbitrary claimed gradient.
pub fn check_grad_with<V, G>(value: V, gradient: G, x: &[f64], h: f64) -> f64
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert!((1e-7..=1e-2).contains(&h), "finite-difference step {h} outside [1e-7, 1e-2]");
    let ad = gradient(x);
    let mut p = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let fp = value(&p);
        p[i] = x[i] - h;
        let fm = value(&p);
        p[i] = x[i];
        let fd = (fp - fm) / (2.0 * h);
        let err = (ad[i] - fd).abs() / fd.abs().max(1.0);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm2(t: &mut Tape, x: &[Var]) -> Var {
        t.dot(x, x)
    }

    #[test]
    fn grad_of_squared_norm() {
        let (v, g) = grad(norm2, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v, 14.0);
        assert_eq!(g, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let (_, g) = grad(|t, _| t.constant(3.5), &[0.1, -4.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn silu_sum_matches_central_difference() {
        let f = |t: &mut Tape, x: &[Var]| {
            let s: Vec<Var> = x.iter().map(|&v| t.silu(v)).collect();
            t.sum(&s)
        };
        let x = [0.5, -0.5];
        let (_, g) = grad(f, &x).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let mut p = x;
            p[i] += h;
            let mut m = x;
            m[i] -= h;
            let fd = (eval(f, &p) - eval(f, &m)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-8, "coordinate {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn hvp_of_half_norm_is_identity() {
        let f = |t: &mut Tape, x: &[Var]| {
            let d = t.dot(x, x);
            t.scale(d, 0.5)
        };
        let v = [0.3, -1.2, 4.0];
        assert_eq!(hvp(f, &[1.0, 2.0, -3.0], &v).unwrap(), v.to_vec());
    }

    #[test]
    fn hvp_matches_hand_hessian() {
        // H = [[2 x1, 2 x0], [2 x0, 0]] at (1, 1) applied to (1, 0)
        let f = |t: &mut Tape, x: &[Var]| {
            let sq = t.square(x[0]);
            t.mul(sq, x[1])
        };
        assert_eq!(hvp(f, &[1.0, 1.0], &[1.0, 0.0]).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn non_finite_reports_op_index() {
        let err = grad(
            |t, x| {
                let l = t.ln(x[0]);
                t.scale(l, 2.0)
            },
            &[-1.0],
        )
        .unwrap_err();
        assert_eq!(err, AdError::NonFinite { op_index: 1, op: "log" });
    }

    #[test]
    fn check_grad_accepts_exact_and_flags_wrong() {
        assert!(check_grad(norm2, &[1.0, 2.0], 1e-5) < 1e-8);
        let linear = |t: &mut Tape, x: &[Var]| t.lin(0.5, &[3.0, -2.0], x);
        assert!(check_grad(linear, &[0.2, 7.0], 1e-4) < 1e-10);
        let wrong = check_grad_with(|x| x[0] * x[0], |x| vec![x[0]], &[2.0], 1e-5);
        assert!(wrong > 0.5, "negative control must be flagged, got {wrong}");
    }

    #[test]
    fn scatter_add_and_gather() {
        let mut t = Tape::new();
        let xs = t.inputs(&[1.0, 2.0, 3.0]);
        let out = t.scatter_add(&xs, &[1, 0, 1], 3);
        assert_eq!(t.values(&out), vec![2.0, 4.0, 0.0]);
        let g = t.gather(&xs, &[2, 2, 0]);
        assert_eq!(t.values(&g), vec![3.0, 3.0, 1.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let (_, g) = grad(|t, x| t.clamp(x[0], -1.0, 1.0), &[2.0]).unwrap();
        assert_eq!(g, vec![0.0]);
        let (_, g) = grad(|t, x| t.clamp(x[0], -1.0, 1.0), &[0.5]).unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn recompute_after_leaf_update() {
        let mut t = Tape::new();
        let x = t.input(2.0);
        let y = t.exp(x);
        let z = t.mul(y, x);
        t.set_leaf(x, 0.0);
        t.recompute();
        assert_eq!(t.value(z), 0.0);
        assert_eq!(t.value(y), 1.0);
    }
}
