//! Scalar reverse-mode automatic differentiation with higher-order support.
//!
//! The backward pass emits adjoints as new tape nodes, so gradients are
//! themselves differentiable (grad-of-grad works to any depth). This engine
//! backs the exact parameter gradients of the factorized path log-probability
//! and serves as an independent second route for verifying the hand-written
//! vectorized backward passes.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Tanh(usize),
    Exp(usize),
    /// ln|x|; derivative 1/x.
    LnAbs(usize),
}

struct Node<S> {
    op: Op,
    val: S,
}

/// Differentiation tape. Nodes are appended in topological order.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, val: S) -> Var {
        self.nodes.push(Node { op, val });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, v: S) -> Var {
        self.push(Op::Leaf, v)
    }

    pub fn value(&self, v: Var) -> S {
        self.nodes[v.0].val
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(Op::Neg(a.0), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln_abs(&mut self, a: Var) -> Var {
        let v = self.value(a).abs().ln();
        self.push(Op::LnAbs(a.0), v)
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.leaf(crate::scalar::s::<S>(v))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn dot(&mut self, a: &[Var], b: &[Var]) -> Var {
        assert_eq!(a.len(), b.len());
        let mut acc = self.constant(0.0);
        for (x, y) in a.iter().zip(b.iter()) {
            let p = self.mul(*x, *y);
            acc = self.add(acc, p);
        }
        acc
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = self.constant(0.0);
        for x in xs {
            acc = self.add(acc, *x);
        }
        acc
    }

    /// Reverse pass from `y`, emitting adjoints as new differentiable nodes.
    /// Returns (d y / d x) for each x; zero-valued leaves where y does not
    /// depend on x.
    pub fn grad(&mut self, y: Var, xs: &[Var]) -> Vec<Var> {
        let n = y.0 + 1;
        let mut adj: Vec<Option<Var>> = vec![None; n];
        let one = self.leaf(S::one());
        adj[y.0] = Some(one);
        for i in (0..n).rev() {
            let Some(a) = adj[i] else { continue };
            let op = self.nodes[i].op;
            match op {
                Op::Leaf => {}
                Op::Add(p, q) => {
                    self.accumulate(&mut adj, p, a);
                    self.accumulate(&mut adj, q, a);
                }
                Op::Sub(p, q) => {
                    self.accumulate(&mut adj, p, a);
                    let na = self.neg(a);
                    self.accumulate(&mut adj, q, na);
                }
                Op::Mul(p, q) => {
                    let gp = self.mul(a, Var(q));
                    self.accumulate(&mut adj, p, gp);
                    let gq = self.mul(a, Var(p));
                    self.accumulate(&mut adj, q, gq);
                }
                Op::Div(p, q) => {
                    // d(p/q)/dp = 1/q ; d(p/q)/dq = -p/q^2
                    let gp = self.div(a, Var(q));
                    self.accumulate(&mut adj, p, gp);
                    let q2 = self.mul(Var(q), Var(q));
                    let pq2 = self.div(Var(p), q2);
                    let neg = self.neg(pq2);
                    let gq = self.mul(a, neg);
                    self.accumulate(&mut adj, q, gq);
                }
                Op::Neg(p) => {
                    let g = self.neg(a);
                    self.accumulate(&mut adj, p, g);
                }
                Op::Tanh(p) => {
                    // d tanh = 1 - tanh^2, referencing the forward node Var(i)
                    let t2 = self.mul(Var(i), Var(i));
                    let one = self.leaf(S::one());
                    let d = self.sub(one, t2);
                    let g = self.mul(a, d);
                    self.accumulate(&mut adj, p, g);
                }
                Op::Exp(p) => {
                    let g = self.mul(a, Var(i));
                    self.accumulate(&mut adj, p, g);
                }
                Op::LnAbs(p) => {
                    let g = self.div(a, Var(p));
                    self.accumulate(&mut adj, p, g);
                }
            }
        }
        xs.iter()
            .map(|x| {
                if x.0 < n {
                    adj[x.0].unwrap_or_else(|| self.leaf(S::zero()))
                } else {
                    self.leaf(S::zero())
                }
            })
            .collect()
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], idx: usize, g: Var) {
        adj[idx] = Some(match adj[idx] {
            None => g,
            Some(prev) => self.add(prev, g),
        });
    }

    /// ln |det M| of a square matrix of vars via LU with partial pivoting.
    /// Errors (None) when a pivot magnitude falls below `min_pivot`.
    pub fn logdet_abs(&mut self, m: &[Vec<Var>], min_pivot: f64) -> Option<Var> {
        let n = m.len();
        let mut a: Vec<Vec<Var>> = m.to_vec();
        let mut logdet = self.constant(0.0);
        for k in 0..n {
            // pivot by value magnitude
            let (mut best, mut best_abs) = (k, self.value(a[k][k]).abs().as_f64());
            for r in k + 1..n {
                let v = self.value(a[r][k]).abs().as_f64();
                if v > best_abs {
                    best = r;
                    best_abs = v;
                }
            }
            if best_abs < min_pivot {
                return None;
            }
            a.swap(k, best);
            let piv = a[k][k];
            let l = self.ln_abs(piv);
            logdet = self.add(logdet, l);
            for r in k + 1..n {
                let f = self.div(a[r][k], piv);
                for c in k + 1..n {
                    let prod = self.mul(f, a[k][c]);
                    a[r][c] = self.sub(a[r][c], prod);
                }
            }
        }
        Some(logdet)
    }
}
