//! Scalar reverse-mode automatic differentiation with a stop-gradient node.
//!
//! Nodes are appended to a [`Tape`] in creation order, so the node list is
//! already a topological order and [`Tape::backward`] is a single reverse
//! sweep. Parameters are registered with [`Tape::param`] and receive dense
//! indices `0..param_count`.
//!
//! ```
//! use rpg_core::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(3.0);
//! let sg = tape.stop_gradient(x);
//! let f = tape.mul(sg, x); // SG(x) * x
//! assert_eq!(tape.value(f), 9.0);
//! assert_eq!(tape.backward(f), vec![3.0]);
//! ```
//!
//! `max`/`min` route the adjoint to the first operand on ties.

use crate::error::{Result, RpgError};
use crate::scalar::Scalar;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Const,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Ln(Var),
    Exp(Var),
    Neg(Var),
    Max(Var, Var),
    Min(Var, Var),
    StopGradient(Var),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub value: T,
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_count: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_count: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn value(&self, v: Var) -> T {
        self.nodes[v.0].value
    }

    fn push(&mut self, value: T, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: T) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, value: T) -> Var {
        let idx = self.param_count;
        self.param_count += 1;
        self.push(value, Op::Param(idx))
    }

    pub fn params(&mut self, values: &[T]) -> Vec<Var> {
        values.iter().map(|&v| self.param(v)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(b);
        if d == T::zero() {
            return Err(RpgError::DomainError("division by zero".into()));
        }
        let v = self.value(a) / d;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !(x > T::zero()) {
            return Err(RpgError::DomainError(format!("ln of nonpositive value {x}")));
        }
        Ok(self.push(x.ln(), Op::Ln(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, Op::Exp(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, Op::Neg(a))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(if x <= y { x } else { y }, Op::Min(a, b))
    }

    /// Identity on the forward pass; blocks the adjoint on the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v, Op::StopGradient(a))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let c = self.constant(k);
        self.mul(c, a)
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let c = self.constant(k);
        self.add(a, c)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(T::zero()),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// `Σ_i k_i · v_i`.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Var {
        let scaled: Vec<Var> = terms.iter().map(|&(k, v)| self.scale(v, k)).collect();
        self.sum(&scaled)
    }

    /// Log-softmax of a logit vector, shifted by the (constant) max logit.
    /// The shift does not change the value or the gradient.
    pub fn log_softmax(&mut self, logits: &[Var]) -> Result<Vec<Var>> {
        if logits.is_empty() {
            return Err(RpgError::DegenerateMeasure("empty logit vector".into()));
        }
        let shift = logits
            .iter()
            .map(|&l| self.value(l))
            .fold(T::neg_infinity(), T::max);
        let c = self.constant(shift);
        let exps: Vec<Var> = logits
            .iter()
            .map(|&l| {
                let d = self.sub(l, c);
                self.exp(d)
            })
            .collect();
        let total = self.sum(&exps);
        let log_total = self.ln(total)?;
        let lse = self.add(c, log_total);
        Ok(logits.iter().map(|&l| self.sub(l, lse)).collect())
    }

    /// Gradient of `root` with respect to every registered parameter.
    pub fn backward(&self, root: Var) -> Vec<T> {
        let mut adjoint = vec![T::zero(); root.0 + 1];
        let mut grad = vec![T::zero(); self.param_count];
        adjoint[root.0] = T::one();
        for i in (0..=root.0).rev() {
            let g = adjoint[i];
            if g == T::zero() {
                continue;
            }
            let node = &self.nodes[i];
            match node.op {
                Op::Const | Op::StopGradient(_) => {}
                Op::Param(p) => grad[p] = grad[p] + g,
                Op::Add(a, b) => {
                    adjoint[a.0] = adjoint[a.0] + g;
                    adjoint[b.0] = adjoint[b.0] + g;
                }
                Op::Sub(a, b) => {
                    adjoint[a.0] = adjoint[a.0] + g;
                    adjoint[b.0] = adjoint[b.0] - g;
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(a), self.value(b));
                    adjoint[a.0] = adjoint[a.0] + g * y;
                    adjoint[b.0] = adjoint[b.0] + g * x;
                }
                Op::Div(a, b) => {
                    let (x, y) = (self.value(a), self.value(b));
                    adjoint[a.0] = adjoint[a.0] + g / y;
                    adjoint[b.0] = adjoint[b.0] - g * x / (y * y);
                }
                Op::Ln(a) => adjoint[a.0] = adjoint[a.0] + g / self.value(a),
                Op::Exp(a) => adjoint[a.0] = adjoint[a.0] + g * node.value,
                Op::Neg(a) => adjoint[a.0] = adjoint[a.0] - g,
                Op::Max(a, b) => {
                    let target = if self.value(a) >= self.value(b) { a } else { b };
                    adjoint[target.0] = adjoint[target.0] + g;
                }
                Op::Min(a, b) => {
                    let target = if self.value(a) <= self.value(b) { a } else { b };
                    adjoint[target.0] = adjoint[target.0] + g;
                }
            }
        }
        grad
    }
}
