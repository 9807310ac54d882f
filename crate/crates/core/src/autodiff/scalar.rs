//! Scalar reverse-mode differentiation for small local functions.
//!
//! Geometry kernels (ray/triangle intersection, face normals) are written
//! once, generic over [`Real`], and evaluated either on plain `f64` for the
//! forward pass or on [`Var`] to obtain their vector-Jacobian products.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by the generic kernels.
pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

const NO_PARENT: u32 = u32::MAX;

/// Wengert list: each entry stores up to two parents with local partials.
#[derive(Default)]
pub struct ScalarTape {
    nodes: RefCell<Vec<[(u32, f64); 2]>>,
}

impl ScalarTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push([(NO_PARENT, 0.0), (NO_PARENT, 0.0)]);
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, parents: [(u32, f64); 2]) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(parents);
        idx
    }

    /// Adjoints of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Adjoints {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.tape.is_none() {
            return Adjoints(adj);
        }
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for &(p, d) in &nodes[i] {
                if p != NO_PARENT {
                    adj[p as usize] += a * d;
                }
            }
        }
        Adjoints(adj)
    }
}

pub struct Adjoints(Vec<f64>);

impl Adjoints {
    /// Derivative of the output with respect to `v` (zero for constants).
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        match v.tape {
            Some(_) => self.0.get(v.idx as usize).copied().unwrap_or(0.0),
            None => 0.0,
        }
    }
}

/// A value recorded on a [`ScalarTape`], or a constant.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: Option<&'t ScalarTape>,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for ScalarTape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ScalarTape({} nodes)", self.len())
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var {
            tape: None,
            idx: 0,
            val,
        }
    }

    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => Var {
                tape: Some(t),
                idx: t.push([(self.idx, d), (NO_PARENT, 0.0)]),
                val,
            },
        }
    }

    fn binary(self, o: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, o.tape) {
            (None, None) => Var::constant(val),
            (Some(_), None) => self.unary(val, da),
            (None, Some(_)) => o.unary(val, db),
            (Some(t), Some(_)) => Var {
                tape: Some(t),
                idx: t.push([(self.idx, da), (o.idx, db)]),
                val,
            },
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        self.binary(o, self.val + o.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self.binary(o, self.val - o.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.binary(o, self.val * o.val, o.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.val / o.val;
        self.binary(o, q, 1.0 / o.val, -q / o.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl Real for Var<'_> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
}

/// Small 3-vector helpers for generic kernels.
pub mod v3 {
    use super::Real;

    pub fn sub<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    pub fn dot<T: Real>(a: [T; 3], b: [T; 3]) -> T {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }

    pub fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    }

    pub fn scale<T: Real>(a: [T; 3], s: T) -> [T; 3] {
        [a[0] * s, a[1] * s, a[2] * s]
    }

    pub fn lift<T: Real>(a: [f64; 3]) -> [T; 3] {
        [T::cst(a[0]), T::cst(a[1]), T::cst(a[2])]
    }
}
