//! Scalar reverse-mode tape.
//!
//! Used to express small loss heads over network outputs; the networks
//! themselves are differentiated layer-wise in the parent module.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [(usize, f64); 2],
}

const NONE: (usize, f64) = (usize::MAX, 0.0);

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives an adjoint.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, [NONE, NONE])
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.var(value)
    }

    fn push(&self, value: f64, parents: [(usize, f64); 2]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents });
        Var {
            tape: self,
            index: nodes.len() - 1,
            value,
        }
    }

    /// Adjoints `∂root/∂node` for every node on the tape, indexed by
    /// [`Var::index`].
    pub fn gradient(&self, root: Var<'_>) -> Result<Vec<f64>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Contract(
                "gradient root was recorded on a different tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        adj[root.index] = 1.0;
        for i in (0..=root.index).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            for &(p, w) in &nodes[i].parents {
                if p != usize::MAX {
                    adj[p] += w * a;
                }
            }
        }
        Ok(adj)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    fn unary(self, value: f64, d: f64) -> Var<'t> {
        self.tape.push(value, [(self.index, d), NONE])
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(self.value.cos(), -self.value.sin())
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value.exp();
        self.unary(e, e)
    }

    pub fn tanh(self) -> Var<'t> {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }

    pub fn powi(self, n: i32) -> Var<'t> {
        self.unary(
            self.value.powi(n),
            n as f64 * self.value.powi(n - 1),
        )
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(self.value * c, c)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push(self.value + rhs.value, [(self.index, 1.0), (rhs.index, 1.0)])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .push(self.value - rhs.value, [(self.index, 1.0), (rhs.index, -1.0)])
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.push(
            self.value * rhs.value,
            [(self.index, rhs.value), (rhs.index, self.value)],
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.value / rhs.value;
        self.tape.push(
            q,
            [(self.index, 1.0 / rhs.value), (rhs.index, -q / rhs.value)],
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}
