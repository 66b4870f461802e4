//! Reverse-mode differentiation on an append-only tape.
//!
//! The tape records exactly the primitives the purchase strategies need:
//! arithmetic, `exp`/`ln`, `max`/`min`, ReLU, the logistic function, constant
//! affine rescaling and a fused affine row (dot product plus bias) for
//! network layers. Values are computed eagerly on append, so the node order
//! is already topological; the adjoint pass walks the tape once in reverse.
//!
//! Subgradient conventions at kinks: `relu'(0) = 0`, and ties in `max`/`min`
//! route the full gradient to the first argument.

use crate::EngineError;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy)]
enum Op {
    /// Non-differentiable input.
    Const,
    /// Differentiable input; gradients are read back from leaves.
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Exp(u32),
    Ln(u32),
    Max(u32, u32),
    Min(u32, u32),
    Relu(u32),
    Logistic(u32),
    /// `a * x + b` with constant `a`, `b`.
    ScaleShift { x: u32, a: f64 },
    /// Dot product of (weight, input) node pairs plus a bias node; the pair
    /// list lives in the side arena.
    Affine { start: u32, pairs: u32, bias: u32 },
}

/// Extent of a [`Tape`] at some point in time; restored by [`Tape::truncate`].
#[derive(Debug, Clone, Copy)]
pub struct TapeMark {
    nodes: usize,
    arena: usize,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    adjoints: Vec<f64>,
    /// Interleaved (weight, input) node ids referenced by affine nodes.
    arena: Vec<u32>,
    first_invalid: Option<u32>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Removes every node, keeping allocated capacity.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.adjoints.clear();
        self.arena.clear();
        self.first_invalid = None;
    }

    /// Snapshot of the current tape extent, for [`Tape::truncate`].
    pub fn mark(&self) -> TapeMark {
        TapeMark { nodes: self.ops.len(), arena: self.arena.len() }
    }

    /// Rolls the tape back to a previous [`Tape::mark`]. Used to keep
    /// parameter leaves alive while re-recording per-path graphs.
    pub fn truncate(&mut self, mark: TapeMark) {
        assert!(mark.nodes <= self.ops.len() && mark.arena <= self.arena.len());
        self.ops.truncate(mark.nodes);
        self.values.truncate(mark.nodes);
        self.arena.truncate(mark.arena);
        if self.first_invalid.map_or(false, |i| i as usize >= mark.nodes) {
            self.first_invalid = None;
        }
    }

    /// Value of a node as computed on append.
    pub fn value(&self, id: NodeId) -> f64 {
        self.values[id.0 as usize]
    }

    /// Adjoint (d root / d node) after [`Tape::backward`].
    pub fn adjoint(&self, id: NodeId) -> f64 {
        self.adjoints[id.0 as usize]
    }

    /// First node whose value came out non-finite, if any.
    pub fn first_invalid(&self) -> Option<(NodeId, f64)> {
        self.first_invalid.map(|i| (NodeId(i), self.values[i as usize]))
    }

    fn push(&mut self, op: Op, value: f64) -> NodeId {
        let id = self.ops.len() as u32;
        if !value.is_finite() && self.first_invalid.is_none() {
            self.first_invalid = Some(id);
        }
        self.ops.push(op);
        self.values.push(value);
        NodeId(id)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, v)
    }

    pub fn leaf(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0 as usize] + self.values[b.0 as usize];
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0 as usize] - self.values[b.0 as usize];
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0 as usize] * self.values[b.0 as usize];
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0 as usize] / self.values[b.0 as usize];
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0 as usize].exp();
        self.push(Op::Exp(x.0), v)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x.0 as usize].ln();
        self.push(Op::Ln(x.0), v)
    }

    /// Maximum; a tie sends the whole gradient to `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.values[a.0 as usize], self.values[b.0 as usize]);
        let v = if va >= vb { va } else { vb };
        self.push(Op::Max(a.0, b.0), v)
    }

    /// Minimum; a tie sends the whole gradient to `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.values[a.0 as usize], self.values[b.0 as usize]);
        let v = if va <= vb { va } else { vb };
        self.push(Op::Min(a.0, b.0), v)
    }

    /// Rectifier with subgradient 0 at the kink.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = self.values[x.0 as usize];
        let v = if vx > 0.0 { vx } else { 0.0 };
        self.push(Op::Relu(x.0), v)
    }

    pub fn logistic(&mut self, x: NodeId) -> NodeId {
        let v = 1.0 / (1.0 + (-self.values[x.0 as usize]).exp());
        self.push(Op::Logistic(x.0), v)
    }

    /// `a * x + b` with constants `a`, `b`.
    pub fn scale_shift(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let v = a * self.values[x.0 as usize] + b;
        self.push(Op::ScaleShift { x: x.0, a }, v)
    }

    /// One affine row: `sum_i w_i * x_i + bias` over (weight, input) pairs.
    pub fn affine(&mut self, pairs: &[(NodeId, NodeId)], bias: NodeId) -> NodeId {
        let start = self.arena.len() as u32;
        let mut v = self.values[bias.0 as usize];
        for (w, x) in pairs {
            self.arena.push(w.0);
            self.arena.push(x.0);
            v += self.values[w.0 as usize] * self.values[x.0 as usize];
        }
        self.push(Op::Affine { start, pairs: pairs.len() as u32, bias: bias.0 }, v)
    }

    /// Seeds `d root / d root = 1` and accumulates adjoints for every node
    /// up to `root` in one reverse sweep.
    pub fn backward(&mut self, root: NodeId) -> Result<(), EngineError> {
        let r = root.0 as usize;
        if r >= self.ops.len() {
            return Err(EngineError::State(format!(
                "backward called for node {r} on a tape of {} nodes",
                self.ops.len()
            )));
        }
        self.adjoints.clear();
        self.adjoints.resize(self.ops.len(), 0.0);
        self.adjoints[r] = 1.0;
        for i in (0..=r).rev() {
            let dz = self.adjoints[i];
            if dz == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Const | Op::Leaf => {}
                Op::Add(a, b) => {
                    self.adjoints[a as usize] += dz;
                    self.adjoints[b as usize] += dz;
                }
                Op::Sub(a, b) => {
                    self.adjoints[a as usize] += dz;
                    self.adjoints[b as usize] -= dz;
                }
                Op::Mul(a, b) => {
                    self.adjoints[a as usize] += dz * self.values[b as usize];
                    self.adjoints[b as usize] += dz * self.values[a as usize];
                }
                Op::Div(a, b) => {
                    let vb = self.values[b as usize];
                    self.adjoints[a as usize] += dz / vb;
                    self.adjoints[b as usize] -= dz * self.values[i] / vb;
                }
                Op::Exp(x) => self.adjoints[x as usize] += dz * self.values[i],
                Op::Ln(x) => self.adjoints[x as usize] += dz / self.values[x as usize],
                Op::Max(a, b) => {
                    let target = if self.values[a as usize] >= self.values[b as usize] { a } else { b };
                    self.adjoints[target as usize] += dz;
                }
                Op::Min(a, b) => {
                    let target = if self.values[a as usize] <= self.values[b as usize] { a } else { b };
                    self.adjoints[target as usize] += dz;
                }
                Op::Relu(x) => {
                    if self.values[x as usize] > 0.0 {
                        self.adjoints[x as usize] += dz;
                    }
                }
                Op::Logistic(x) => {
                    let s = self.values[i];
                    self.adjoints[x as usize] += dz * s * (1.0 - s);
                }
                Op::ScaleShift { x, a, .. } => self.adjoints[x as usize] += dz * a,
                Op::Affine { start, pairs, bias } => {
                    let s = start as usize;
                    for p in 0..pairs as usize {
                        let w = self.arena[s + 2 * p] as usize;
                        let x = self.arena[s + 2 * p + 1] as usize;
                        self.adjoints[w] += dz * self.values[x];
                        self.adjoints[x] += dz * self.values[w];
                    }
                    self.adjoints[bias as usize] += dz;
                }
            }
        }
        Ok(())
    }
}

/// Central finite-difference gradient of `f` at `theta`, with per-coordinate
/// step `h = h_scale * max(1, |theta_i|)`. Test utility for validating tape
/// gradients.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    theta: &[f64],
    h_scale: f64,
) -> Vec<f64> {
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = h_scale * theta[i].abs().max(1.0);
        work[i] = theta[i] + h;
        let up = f(&work);
        work[i] = theta[i] - h;
        let down = f(&work);
        work[i] = theta[i];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}
