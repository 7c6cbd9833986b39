//! Scalar abstraction plus a small reverse-mode tape.
//!
//! Pose-space code (forward kinematics, projection, the adaptation losses) is
//! written once against [`Real`]. Evaluating it with `f64` gives values;
//! evaluating it with [`Var`] records every operation on a [`Tape`] so the
//! gradient with respect to the leaf variables can be read back in one
//! reverse sweep.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn softplus(self) -> Self;
    fn abs(self) -> Self;
    /// `max(0, self)`.
    fn relu(self) -> Self;
    /// Clamp with zero derivative outside `[lo, hi]`.
    fn clamp_to(self, lo: f64, hi: f64) -> Self;

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }
}

#[inline]
fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
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
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn relu(self) -> Self {
        self.max(0.0)
    }
    #[inline]
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }
}

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Append-only record of scalar operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(8192)
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A fresh independent variable.
    pub fn var(&self, v: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [0, 0],
            partials: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            idx,
            v,
        }
    }

    pub fn vars(&self, vs: &[f64]) -> Vec<Var<'_>> {
        vs.iter().map(|&v| self.var(v)).collect()
    }

    #[inline]
    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        (nodes.len() - 1) as u32
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Adjoints {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.tape.is_some() {
            adj[output.idx as usize] = 1.0;
            for i in (0..=output.idx as usize).rev() {
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let n = nodes[i];
                adj[n.parents[0] as usize] += n.partials[0] * a;
                adj[n.parents[1] as usize] += n.partials[1] * a;
            }
        }
        Adjoints(adj)
    }
}

pub struct Adjoints(Vec<f64>);

impl Adjoints {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v.tape {
            Some(_) => self.0.get(v.idx as usize).copied().unwrap_or(0.0),
            None => 0.0,
        }
    }
}

/// Tape-tracked scalar. Constants carry no tape and cost nothing to record.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    v: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.v)
    }
}

impl<'t> Var<'t> {
    pub fn constant(v: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            v,
        }
    }

    #[inline]
    fn unary(self, v: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(v),
            Some(t) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, 0],
                    partials: [d, 0.0],
                }),
                v,
            },
        }
    }

    #[inline]
    fn binary(self, other: Self, v: f64, da: f64, db: f64) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(v),
            (Some(t), None) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, 0],
                    partials: [da, 0.0],
                }),
                v,
            },
            (None, Some(t)) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [other.idx, 0],
                    partials: [db, 0.0],
                }),
                v,
            },
            (Some(t), Some(_)) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, other.idx],
                    partials: [da, db],
                }),
                v,
            },
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        self.binary(o, self.v + o.v, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.v - o.v, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.v * o.v, o.v, self.v)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        self.binary(o, self.v * inv, inv, -self.v * inv * inv)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.v, -1.0)
    }
}

impl Real for Var<'_> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.v
    }
    fn sin(self) -> Self {
        self.unary(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.v.cos(), -self.v.sin())
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.unary(e, e)
    }
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.v), sigmoid(self.v))
    }
    fn abs(self) -> Self {
        let d = if self.v >= 0.0 { 1.0 } else { -1.0 };
        self.unary(self.v.abs(), d)
    }
    fn relu(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Var::constant(0.0)
        }
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        if self.v < lo {
            Var::constant(lo)
        } else if self.v > hi {
            Var::constant(hi)
        } else {
            self
        }
    }
    fn scale(self, k: f64) -> Self {
        self.unary(self.v * k, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn check_unary(f: impl for<'a> Fn(Var<'a>) -> Var<'a>, g: impl Fn(f64) -> f64, x: f64) {
        let tape = Tape::new();
        let v = tape.var(x);
        let y = f(v);
        let d = tape.gradient(y).wrt(v);
        let expect = fd(&g, x);
        assert!((d - expect).abs() < 1e-6 * (1.0 + expect.abs()), "{d} vs {expect}");
    }

    #[test]
    fn unary_derivatives_match_finite_differences() {
        for &x in &[-1.3, -0.2, 0.4, 2.1] {
            check_unary(|v| v.sin(), f64::sin, x);
            check_unary(|v| v.cos(), f64::cos, x);
            check_unary(|v| v.exp(), f64::exp, x);
            check_unary(|v| v.softplus(), softplus_f64, x);
            check_unary(|v| v.abs(), f64::abs, x);
            check_unary(|v| (v * v + Var::cst(1.0)).sqrt(), |x| (x * x + 1.0).sqrt(), x);
            check_unary(|v| Var::cst(3.0) / (v + Var::cst(5.0)), |x| 3.0 / (x + 5.0), x);
        }
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let y = tape.var(3.0);
        let a = x * y;
        let z = a * a - x;
        let g = tape.gradient(z);
        // z = x^2 y^2 - x
        assert_eq!(g.wrt(x), 2.0 * 2.0 * 9.0 - 1.0);
        assert_eq!(g.wrt(y), 2.0 * 3.0 * 4.0);
    }

    #[test]
    fn constants_do_not_touch_the_tape() {
        let tape = Tape::new();
        let c = Var::cst(2.0) * Var::cst(4.0) + Var::cst(1.0);
        assert_eq!(c.val(), 9.0);
        assert!(tape.is_empty());
        let x = tape.var(1.0);
        let y = x.clamp_to(2.0, 3.0);
        assert_eq!(tape.gradient(y).wrt(x), 0.0);
    }
}
