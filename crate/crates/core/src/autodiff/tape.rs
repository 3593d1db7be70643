//! Operation tape and the recording scalar [`Var`].
//!
//! Every non-constant operation appends one node holding the local partial
//! derivatives towards its parents. Constants never touch the tape, so a
//! computation with no registered leaves records nothing. Parents always
//! precede their children, which makes a single reverse sweep sufficient.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::real::Real;

const CONST: u32 = u32::MAX;

/// Coarse operation class, kept per node so non-finite gradients can be
/// traced back to the kind of operation that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sqrt,
    Exp,
    Sin,
    Cos,
    Acos,
    Sigmoid,
    Bilerp,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Copy)]
struct Edge {
    parent: u32,
    partial: f64,
}

#[derive(Default)]
struct TapeInner {
    edge_end: Vec<u32>,
    kinds: Vec<OpKind>,
    edges: Vec<Edge>,
    overflowed: bool,
}

const NODE_BYTES: usize = std::mem::size_of::<u32>() + std::mem::size_of::<OpKind>();
const EDGE_BYTES: usize = std::mem::size_of::<Edge>();
// Adjoint buffer allocated by the backward sweep.
const ADJOINT_BYTES: usize = std::mem::size_of::<f64>();

/// Default memory budget for one tape: 2 GiB.
pub const DEFAULT_TAPE_BUDGET: usize = 2 << 30;

pub struct Tape {
    inner: RefCell<TapeInner>,
    budget_bytes: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.edge_end.len())
            .field("edges", &inner.edges.len())
            .field("overflowed", &inner.overflowed)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_budget(DEFAULT_TAPE_BUDGET)
    }

    pub fn with_budget(budget_bytes: usize) -> Self {
        Tape {
            inner: RefCell::new(TapeInner::default()),
            budget_bytes,
        }
    }

    /// Registers a new differentiable input.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(OpKind::Leaf, &[]);
        if idx == CONST {
            return Var::constant(value);
        }
        Var {
            val: value,
            idx,
            tape: Some(self),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().edge_end.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn edge_count(&self) -> usize {
        self.inner.borrow().edges.len()
    }

    /// Bytes the tape occupies, including the adjoint buffer a backward
    /// sweep would allocate.
    pub fn bytes(&self) -> usize {
        let inner = self.inner.borrow();
        inner.edge_end.len() * (NODE_BYTES + ADJOINT_BYTES) + inner.edges.len() * EDGE_BYTES
    }

    pub fn budget_bytes(&self) -> usize {
        self.budget_bytes
    }

    /// True once a push was refused because of the memory budget. Values
    /// recorded after that point are still correct, gradients are not.
    pub fn overflowed(&self) -> bool {
        self.inner.borrow().overflowed
    }

    /// Drops every recorded node. Vars created before the reset must not be
    /// used afterwards.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.edge_end.clear();
        inner.kinds.clear();
        inner.edges.clear();
        inner.overflowed = false;
    }

    fn push(&self, kind: OpKind, edges: &[(u32, f64)]) -> u32 {
        let mut inner = self.inner.borrow_mut();
        if inner.overflowed {
            return CONST;
        }
        let projected = (inner.edge_end.len() + 1) * (NODE_BYTES + ADJOINT_BYTES)
            + (inner.edges.len() + edges.len()) * EDGE_BYTES;
        if projected > self.budget_bytes {
            inner.overflowed = true;
            return CONST;
        }
        for &(parent, partial) in edges {
            inner.edges.push(Edge { parent, partial });
        }
        let end = inner.edges.len() as u32;
        inner.edge_end.push(end);
        inner.kinds.push(kind);
        (inner.edge_end.len() - 1) as u32
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, NonFiniteGradient> {
        self.backward_seeded(&[(output, 1.0)])
    }

    /// Reverse sweep with several seeded outputs, i.e. the gradient of
    /// `Σ seed_k · output_k`.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, f64)]) -> Result<Gradients, NonFiniteGradient> {
        let inner = self.inner.borrow();
        let n = inner.edge_end.len();
        let mut adj = vec![0.0f64; n];
        let mut top = 0usize;
        for &(v, s) in seeds {
            if v.idx != CONST {
                adj[v.idx as usize] += s;
                top = top.max(v.idx as usize + 1);
            }
        }
        for i in (0..top).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let start = if i == 0 { 0 } else { inner.edge_end[i - 1] as usize };
            let end = inner.edge_end[i] as usize;
            for e in &inner.edges[start..end] {
                let c = g * e.partial;
                if !c.is_finite() {
                    return Err(NonFiniteGradient {
                        node: i,
                        kind: inner.kinds[i],
                    });
                }
                adj[e.parent as usize] += c;
            }
        }
        Ok(Gradients { adj })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("non-finite adjoint at tape node {node} ({kind})")]
pub struct NonFiniteGradient {
    pub node: usize,
    pub kind: OpKind,
}

/// Adjoints of every tape node after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    /// Derivative of the seeded output with respect to `v`; zero for
    /// constants.
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        if v.idx == CONST {
            0.0
        } else {
            self.adj.get(v.idx as usize).copied().unwrap_or(0.0)
        }
    }
}

/// Scalar that records its computation history on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    val: f64,
    idx: u32,
    tape: Option<&'t Tape>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.idx == CONST {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            val,
            idx: CONST,
            tape: None,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    pub fn index(&self) -> Option<usize> {
        (self.idx != CONST).then_some(self.idx as usize)
    }

    #[inline]
    fn unary(self, kind: OpKind, val: f64, d: f64) -> Self {
        match self.tape {
            Some(t) if self.idx != CONST => Var {
                val,
                idx: t.push(kind, &[(self.idx, d)]),
                tape: Some(t),
            },
            _ => Var::constant(val),
        }
        .normalize()
    }

    #[inline]
    fn binary(self, other: Self, kind: OpKind, val: f64, da: f64, db: f64) -> Self {
        let tape = self.tape.or(other.tape);
        let Some(t) = tape else {
            return Var::constant(val);
        };
        let idx = match (self.idx != CONST, other.idx != CONST) {
            (true, true) => t.push(kind, &[(self.idx, da), (other.idx, db)]),
            (true, false) => t.push(kind, &[(self.idx, da)]),
            (false, true) => t.push(kind, &[(other.idx, db)]),
            (false, false) => return Var::constant(val),
        };
        Var {
            val,
            idx,
            tape: Some(t),
        }
        .normalize()
    }

    // A refused push (budget exhausted) yields CONST; drop the tape handle so
    // the value behaves as a plain constant from then on.
    #[inline]
    fn normalize(self) -> Self {
        if self.idx == CONST {
            Var::constant(self.val)
        } else {
            self
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, OpKind::Add, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, OpKind::Sub, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, OpKind::Mul, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, OpKind::Div, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(OpKind::Neg, -self.val, -1.0)
    }
}

impl AddAssign for Var<'_> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for Var<'_> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl MulAssign for Var<'_> {
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl Real for Var<'_> {
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }

    fn value(self) -> f64 {
        self.val
    }

    fn sqrt(self) -> Self {
        let v = self.val.sqrt();
        let d = if v > 0.0 { 0.5 / v } else { 0.0 };
        self.unary(OpKind::Sqrt, v, d)
    }

    fn exp(self) -> Self {
        let v = self.val.exp();
        self.unary(OpKind::Exp, v, v)
    }

    fn sin(self) -> Self {
        self.unary(OpKind::Sin, self.val.sin(), self.val.cos())
    }

    fn cos(self) -> Self {
        self.unary(OpKind::Cos, self.val.cos(), -self.val.sin())
    }

    fn acos(self) -> Self {
        let a = self.val;
        let d = if a.abs() < 1.0 {
            -1.0 / (1.0 - a * a).sqrt()
        } else {
            0.0
        };
        self.unary(OpKind::Acos, a.acos(), d)
    }

    fn relu(self) -> Self {
        if self.val > 0.0 {
            self
        } else {
            Var::constant(0.0)
        }
    }

    fn clamp_const(self, lo: f64, hi: f64) -> Self {
        if self.val < lo {
            Var::constant(lo)
        } else if self.val > hi {
            Var::constant(hi)
        } else {
            self
        }
    }

    fn sigmoid(self) -> Self {
        let s = f64::sigmoid(self.val);
        self.unary(OpKind::Sigmoid, s, s * (1.0 - s))
    }

    fn bilerp(c00: Self, c10: Self, c01: Self, c11: Self, tx: Self, ty: Self) -> Self {
        let val = f64::bilerp(c00.val, c10.val, c01.val, c11.val, tx.val, ty.val);
        let operands = [c00, c10, c01, c11, tx, ty];
        let Some(t) = operands.iter().find_map(|o| (o.idx != CONST).then_some(o.tape).flatten())
        else {
            return Var::constant(val);
        };
        let (x, y) = (tx.val, ty.val);
        let lo = c00.val * (1.0 - x) + c10.val * x;
        let hi = c01.val * (1.0 - x) + c11.val * x;
        let partials = [
            (1.0 - x) * (1.0 - y),
            x * (1.0 - y),
            (1.0 - x) * y,
            x * y,
            (1.0 - y) * (c10.val - c00.val) + y * (c11.val - c01.val),
            hi - lo,
        ];
        let mut edges = [(0u32, 0.0f64); 6];
        let mut n = 0;
        for (o, p) in operands.iter().zip(partials) {
            if o.idx != CONST {
                edges[n] = (o.idx, p);
                n += 1;
            }
        }
        Var {
            val,
            idx: t.push(OpKind::Bilerp, &edges[..n]),
            tape: Some(t),
        }
        .normalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = tape.var(-2.0);
        let z = x * x * y + x.sin();
        let g = tape.backward(z).unwrap();
        assert_eq!(z.value(), 9.0 * -2.0 + 3.0f64.sin());
        assert!((g.wrt(x) - (2.0 * 3.0 * -2.0 + 3.0f64.cos())).abs() < 1e-15);
        assert_eq!(g.wrt(y), 9.0);
    }

    #[test]
    fn constants_do_not_grow_the_tape() {
        let tape = Tape::new();
        let a = Var::constant(2.0);
        let b = Var::constant(5.0);
        let c = (a * b + a).sqrt().exp().sigmoid();
        assert!(c.is_constant());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn values_match_plain_f64() {
        let tape = Tape::new();
        let xs = [0.3, -1.7, 2.2];
        let f = |a: f64, b: f64, c: f64| ((a * b - c) / (b * b + 1.0)).exp().sigmoid() + c.cos().acos();
        let v: Vec<Var> = xs.iter().map(|&x| tape.var(x)).collect();
        let r = ((v[0] * v[1] - v[2]) / (v[1] * v[1] + Var::one())).exp().sigmoid() + v[2].cos().acos();
        assert_eq!(r.value().to_bits(), f(xs[0], xs[1], xs[2]).to_bits());
    }

    #[test]
    fn bilerp_partials_match_generic_expansion() {
        let vals = [0.2, -0.4, 1.1, 0.7, 0.35, 0.8];
        let fused = {
            let tape = Tape::new();
            let v: Vec<Var> = vals.iter().map(|&x| tape.var(x)).collect();
            let out = Var::bilerp(v[0], v[1], v[2], v[3], v[4], v[5]);
            let g = tape.backward(out).unwrap();
            (out.value(), v.iter().map(|&x| g.wrt(x)).collect::<Vec<_>>())
        };
        let expanded = {
            let tape = Tape::new();
            let v: Vec<Var> = vals.iter().map(|&x| tape.var(x)).collect();
            let one = Var::one();
            let a = v[0] * (one - v[4]) + v[1] * v[4];
            let b = v[2] * (one - v[4]) + v[3] * v[4];
            let out = a * (one - v[5]) + b * v[5];
            let g = tape.backward(out).unwrap();
            (out.value(), v.iter().map(|&x| g.wrt(x)).collect::<Vec<_>>())
        };
        assert_eq!(fused.0.to_bits(), expanded.0.to_bits());
        for (a, b) in fused.1.iter().zip(&expanded.1) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn relu_and_clamp_cut_gradients() {
        let tape = Tape::new();
        let x = tape.var(-0.5);
        let y = tape.var(2.0);
        let out = x.relu() + y.clamp_const(-1.0, 1.0) + y.relu();
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(x), 0.0);
        assert_eq!(g.wrt(y), 1.0);
    }

    #[test]
    fn budget_overflow_is_flagged() {
        let tape = Tape::with_budget(64);
        let x = tape.var(1.0);
        let mut acc = x;
        for _ in 0..10 {
            acc *= x;
        }
        assert!(tape.overflowed());
        assert_eq!(acc.value(), 1.0);
    }

    #[test]
    fn non_finite_adjoint_reports_node_class() {
        let tape = Tape::new();
        let x = tape.var(0.0);
        let y = Var::one() / x;
        let err = tape.backward(y * Var::one()).unwrap_err();
        assert_eq!(err.kind, OpKind::Div);
        let _ = y;
    }
}
