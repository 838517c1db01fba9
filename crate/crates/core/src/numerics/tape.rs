//! Reverse-mode differentiation over a flat operation tape.
//!
//! Model code is written once against the [`Real`] trait and runs either on
//! plain `f64` (fast evaluation) or on [`Var`] (recorded on a [`Tape`] for
//! exact parameter gradients). Each tape node stores its parents together
//! with the local partial derivatives, so the backward sweep is a single
//! reverse pass over a contiguous buffer.
//!
//! ```
//! use varembed_core::numerics::{Real, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x;
//! assert_eq!(tape.gradient(y, &[x]).unwrap(), vec![6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::NumericsError;

/// Scalar arithmetic shared by `f64` and tape variables.
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant carrying no derivative information.
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    /// `Σ a_i b_i` as one operation.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = Self::cst(0.0);
        for (x, y) in a.iter().zip(b) {
            acc = acc + *x * *y;
        }
        acc
    }

    /// `Σ c_i x_i` with constant coefficients.
    fn dot_const(c: &[f64], x: &[Self]) -> Self {
        debug_assert_eq!(c.len(), x.len());
        let mut acc = Self::cst(0.0);
        for (ci, xi) in c.iter().zip(x) {
            acc = acc + *xi * *ci;
        }
        acc
    }

    fn sum(xs: &[Self]) -> Self {
        let mut acc = Self::cst(0.0);
        for x in xs {
            acc = acc + *x;
        }
        acc
    }

    /// `log(1 + e^x)` without overflow.
    fn softplus(self) -> Self {
        let v = self.value();
        if v > 0.0 {
            self + (-self).exp().ln_1p_small()
        } else {
            self.exp().ln_1p_small()
        }
    }

    /// `ln(1 + self)`; callers guarantee `self > -1`.
    fn ln_1p_small(self) -> Self {
        (self + 1.0).ln()
    }

    /// `log Σ exp(x_i)` shifted by the running maximum.
    fn log_sum_exp(xs: &[Self]) -> Self {
        let m = xs.iter().map(Real::value).fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Self::cst(m);
        }
        let shifted: Vec<Self> = xs.iter().map(|x| (*x - m).exp()).collect();
        Self::sum(&shifted).ln() + m
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
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
    fn dot(a: &[Self], b: &[Self]) -> Self {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }
    #[inline]
    fn dot_const(c: &[f64], x: &[Self]) -> Self {
        c.iter().zip(x).map(|(x, y)| x * y).sum()
    }
    #[inline]
    fn sum(xs: &[Self]) -> Self {
        xs.iter().sum()
    }
    #[inline]
    fn ln_1p_small(self) -> Self {
        self.ln_1p()
    }
}

#[derive(Default)]
struct TapeInner {
    // node i owns parents[offsets[i]..offsets[i + 1]]
    offsets: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
}

impl TapeInner {
    fn push(&mut self, edges: impl IntoIterator<Item = (u32, f64)>) -> u32 {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        for (p, d) in edges {
            self.parents.push(p);
            self.partials.push(d);
        }
        self.offsets.push(self.parents.len() as u32);
        (self.offsets.len() - 2) as u32
    }

    fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }
}

/// Operation record for reverse accumulation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(std::iter::empty());
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Exact derivative of `output` with respect to each of `params`.
    ///
    /// Fails when `output` is a constant, lives on another tape, or does not
    /// depend on any of `params`.
    pub fn gradient(&self, output: Var<'_>, params: &[Var<'_>]) -> Result<Vec<f64>, NumericsError> {
        let Some(out_tape) = output.tape else {
            return Err(NumericsError::NotTraceable("output is a constant".into()));
        };
        if !std::ptr::eq(out_tape, self) {
            return Err(NumericsError::NotTraceable(
                "output was recorded on a different tape".into(),
            ));
        }
        for p in params {
            match p.tape {
                Some(t) if std::ptr::eq(t, self) => {}
                _ => {
                    return Err(NumericsError::NotTraceable(
                        "parameter is not a variable of this tape".into(),
                    ))
                }
            }
        }
        let inner = self.inner.borrow();
        let n = output.idx as usize + 1;
        let mut adj = vec![0.0; n];
        let mut reached = vec![false; n];
        adj[n - 1] = 1.0;
        reached[n - 1] = true;
        for i in (0..n).rev() {
            if !reached[i] {
                continue;
            }
            let a = adj[i];
            let (lo, hi) = (inner.offsets[i] as usize, inner.offsets[i + 1] as usize);
            for k in lo..hi {
                let p = inner.parents[k] as usize;
                adj[p] += inner.partials[k] * a;
                reached[p] = true;
            }
        }
        let mut any = false;
        let grad = params
            .iter()
            .map(|p| {
                let i = p.idx as usize;
                if i < n && reached[i] {
                    any = true;
                    adj[i]
                } else {
                    0.0
                }
            })
            .collect();
        if !any && !params.is_empty() {
            return Err(NumericsError::NotTraceable(
                "output does not depend on any parameter".into(),
            ));
        }
        Ok(grad)
    }
}

/// A scalar that is either a constant or a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var#{}({})", self.idx, self.val),
            None => write!(f, "Const({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(v: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            val: v,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.tape.is_none()
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => {
                let idx = t.inner.borrow_mut().push([(self.idx, d)]);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }

    #[inline]
    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(val),
            (Some(t), None) => {
                let idx = t.inner.borrow_mut().push([(self.idx, da)]);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
            (None, Some(t)) => {
                let idx = t.inner.borrow_mut().push([(other.idx, db)]);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
            (Some(t), Some(_)) => {
                let idx = t.inner.borrow_mut().push([(self.idx, da), (other.idx, db)]);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
        }
    }

    fn nary(tape: Option<&'t Tape>, val: f64, edges: Vec<(u32, f64)>) -> Self {
        match tape {
            Some(t) if !edges.is_empty() => {
                let idx = t.inner.borrow_mut().push(edges);
                Var {
                    tape: Some(t),
                    idx,
                    val,
                }
            }
            _ => Var::constant(val),
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        self.unary(self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

fn shared_tape<'t>(xs: &[Var<'t>]) -> Option<&'t Tape> {
    xs.iter().find_map(|x| x.tape)
}

impl<'t> Real for Var<'t> {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    fn ln_1p_small(self) -> Self {
        self.unary(self.val.ln_1p(), 1.0 / (1.0 + self.val))
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let tape = shared_tape(a).or_else(|| shared_tape(b));
        let mut val = 0.0;
        let mut edges = Vec::with_capacity(2 * a.len());
        for (x, y) in a.iter().zip(b) {
            val += x.val * y.val;
            if x.tape.is_some() {
                edges.push((x.idx, y.val));
            }
            if y.tape.is_some() {
                edges.push((y.idx, x.val));
            }
        }
        Var::nary(tape, val, edges)
    }

    fn dot_const(c: &[f64], x: &[Self]) -> Self {
        debug_assert_eq!(c.len(), x.len());
        let tape = shared_tape(x);
        let mut val = 0.0;
        let mut edges = Vec::with_capacity(x.len());
        for (ci, xi) in c.iter().zip(x) {
            val += ci * xi.val;
            if xi.tape.is_some() {
                edges.push((xi.idx, *ci));
            }
        }
        Var::nary(tape, val, edges)
    }

    fn sum(xs: &[Self]) -> Self {
        let tape = shared_tape(xs);
        let mut val = 0.0;
        let mut edges = Vec::with_capacity(xs.len());
        for x in xs {
            val += x.val;
            if x.tape.is_some() {
                edges.push((x.idx, 1.0));
            }
        }
        Var::nary(tape, val, edges)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_log() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x * x;
        assert_eq!(tape.gradient(y, &[x]).unwrap(), vec![6.0]);

        let tape = Tape::new();
        let x = tape.var(2.0);
        assert_eq!(tape.gradient(x.ln(), &[x]).unwrap(), vec![0.5]);
    }

    #[test]
    fn constants_are_not_traceable() {
        let tape = Tape::new();
        let x = tape.var(1.0);
        let c = Var::constant(2.0) * 3.0;
        assert!(matches!(tape.gradient(c, &[x]), Err(NumericsError::NotTraceable(_))));

        let y = tape.var(4.0);
        let z = y * 2.0;
        assert!(matches!(tape.gradient(z, &[x]), Err(NumericsError::NotTraceable(_))));
    }

    #[test]
    fn foreign_tape_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let x = t1.var(1.0);
        let y = t2.var(1.0) * 2.0;
        assert!(t1.gradient(y, &[x]).is_err());
    }

    #[test]
    fn fused_ops_match_elementwise() {
        let tape = Tape::new();
        let a = tape.vars(&[1.0, -2.0, 0.5]);
        let b = tape.vars(&[0.3, 0.7, -1.1]);
        let fused = Real::dot(&a, &b) + Real::dot_const(&[2.0, 3.0, 4.0], &a) + Real::sum(&b);
        let mut slow = Var::constant(0.0);
        for i in 0..3 {
            slow = slow + a[i] * b[i] + a[i] * [2.0, 3.0, 4.0][i] + b[i];
        }
        let params: Vec<_> = a.iter().chain(&b).copied().collect();
        let g1 = tape.gradient(fused, &params).unwrap();
        let g2 = tape.gradient(slow, &params).unwrap();
        assert!((fused.value() - slow.value()).abs() < 1e-14);
        for (x, y) in g1.iter().zip(&g2) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn softplus_and_logsumexp_are_stable() {
        assert!((Real::softplus(800.0_f64) - 800.0).abs() < 1e-12);
        assert!(Real::softplus(-800.0_f64) >= 0.0);
        let l = <f64 as Real>::log_sum_exp(&[1000.0, 1000.0]);
        assert!((l - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
