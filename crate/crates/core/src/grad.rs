//! Reverse-mode gradients over tensors of `f64`.
//!
//! A [`Tape`] records primitive applications in execution order. Every node
//! holds a row-major `rows x cols` value; vectors are `1 x n` and scalars
//! `1 x 1`. [`Tape::backward`] walks the record in reverse and applies each
//! primitive's vector-Jacobian product.
//!
//! The geometry primitives (Möbius addition, distance, exponential map,
//! gyromidpoint, scalar gyromultiplication, conformal factor, projection)
//! carry closed-form adjoints, as do the encoder primitives (affine map,
//! shifted softplus, row-wise max-pool) and the reductions used by the
//! losses.
//!
//! ```
//! use hyperipc::grad::Tape;
//!
//! let mut t = Tape::new();
//! let x = t.leaf_vec(vec![3.0, -1.0]);
//! let y = t.mul(x, x);
//! let loss = t.sum_all(y);
//! let g = t.backward(loss).unwrap();
//! assert_eq!(g.get(x), vec![6.0, -2.0]);
//! ```

use ndarray::{ArrayView2, ArrayViewMut2};
use thiserror::Error;

use crate::geometry::raw;
use crate::geometry::ATANH_CLAMP;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("no adjoint registered for primitive `{0}`")]
    Unregistered(String),
    #[error("loss node must be scalar, found {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("seed for node {node} has length {got}, expected {expected}")]
    SeedShape {
        node: usize,
        got: usize,
        expected: usize,
    },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Custom(String, Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulScalar(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    Stack(Vec<Var>),
    Slice {
        x: Var,
        offset: usize,
    },
    Sigmoid(Var),
    LogSumExp(Var),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Softplus(Var),
    MaxPoolRows(Var),
    ConformalFactor {
        x: Var,
        c: f64,
    },
    MobiusAdd {
        x: Var,
        y: Var,
        c: f64,
    },
    MobiusScalarMul {
        x: Var,
        r: f64,
        c: f64,
    },
    HypDistance {
        x: Var,
        y: Var,
        c: f64,
    },
    ExpMap {
        x: Var,
        v: Var,
        c: f64,
    },
    Gyromidpoint {
        points: Vec<Var>,
        c: f64,
    },
    Project {
        x: Var,
        c: f64,
    },
}

/// Names of every primitive that carries an adjoint.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "neg",
    "scale",
    "mul",
    "mul_scalar",
    "sum_all",
    "mean_all",
    "stack",
    "slice",
    "sigmoid",
    "log_sum_exp",
    "affine",
    "softplus",
    "max_pool",
    "conformal_factor",
    "mobius_add",
    "mobius_scalar_mul",
    "hyp_distance",
    "exp_map",
    "gyromidpoint",
    "project",
];

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Custom(name, _) => name,
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::MulScalar(..) => "mul_scalar",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::Stack(..) => "stack",
            Op::Slice { .. } => "slice",
            Op::Sigmoid(..) => "sigmoid",
            Op::LogSumExp(..) => "log_sum_exp",
            Op::Affine { .. } => "affine",
            Op::Softplus(..) => "softplus",
            Op::MaxPoolRows(..) => "max_pool",
            Op::ConformalFactor { .. } => "conformal_factor",
            Op::MobiusAdd { .. } => "mobius_add",
            Op::MobiusScalarMul { .. } => "mobius_scalar_mul",
            Op::HypDistance { .. } => "hyp_distance",
            Op::ExpMap { .. } => "exp_map",
            Op::Gyromidpoint { .. } => "gyromidpoint",
            Op::Project { .. } => "project",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Custom(_, xs) | Op::Stack(xs) => xs.clone(),
            Op::Gyromidpoint { points, .. } => points.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Sigmoid(a)
            | Op::LogSumExp(a)
            | Op::Softplus(a)
            | Op::MaxPoolRows(a) => vec![*a],
            Op::Slice { x, .. }
            | Op::ConformalFactor { x, .. }
            | Op::MobiusScalarMul { x, .. }
            | Op::Project { x, .. } => vec![*x],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::MobiusAdd { x, y, .. } | Op::HypDistance { x, y, .. } => vec![*x, *y],
            Op::ExpMap { x, v, .. } => vec![*x, *v],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
    argmax: Vec<usize>,
}

/// Ordered record of primitive applications.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by a backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.adj[v.0].as_deref()
    }

    /// Adjoint of `v`, zero-filled when no gradient reached it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.adj[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.lens[v.0]])
    }
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t) - ln 2`: a smooth ramp that vanishes at zero.
pub fn shifted_softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op) -> Var {
        let (value, rows, cols, argmax) = self.eval(&op);
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
            argmax,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_value(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        assert_eq!(value.len(), rows * cols, "value length does not match shape");
        let needs_grad = matches!(op, Op::Leaf);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
            argmax: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push_value(value, rows, cols, Op::Leaf)
    }

    pub fn leaf_vec(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.leaf(value, 1, n)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push_value(value, rows, cols, Op::Constant)
    }

    pub fn constant_vec(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.constant(value, 1, n)
    }

    /// Copies the value of `x` as a constant; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (v, r, c) = (n.value.clone(), n.rows, n.cols);
        self.constant(v, r, c)
    }

    /// Records a forward-only primitive. Backpropagating through it fails
    /// with [`GradError::Unregistered`].
    pub fn custom(
        &mut self,
        name: &str,
        inputs: &[Var],
        value: Vec<f64>,
        rows: usize,
        cols: usize,
    ) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let v = self.push_value(value, rows, cols, Op::Custom(name.to_string(), inputs.to_vec()));
        self.nodes[v.0].needs_grad = needs_grad;
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Scale(a, k))
    }

    /// Elementwise product of equally shaped nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    /// Product of a node with a scalar node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        self.push(Op::MulScalar(a, s))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        self.push(Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.push(Op::MeanAll(a))
    }

    /// Stacks equally sized nodes as the rows of a matrix (scalars become a
    /// row vector).
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        self.push(Op::Stack(xs.to_vec()))
    }

    /// Contiguous range of `rows * cols` elements reinterpreted as a matrix.
    pub fn slice(&mut self, x: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let src = &self.nodes[x.0].value;
        assert!(offset + rows * cols <= src.len(), "slice out of range");
        let value = src[offset..offset + rows * cols].to_vec();
        let needs_grad = self.nodes[x.0].needs_grad;
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op: Op::Slice { x, offset },
            needs_grad,
            argmax: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        self.slice(x, i, 1, 1)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }

    /// `log(sum(exp(a)))` over all elements.
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        self.push(Op::LogSumExp(a))
    }

    /// `x w + b` with `x: r x i`, `w: i x o`, `b: 1 x o`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        self.push(Op::Affine { x, w, b })
    }

    /// Elementwise [`shifted_softplus`].
    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }

    /// Column-wise maximum over the rows of a matrix.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        self.push(Op::MaxPoolRows(a))
    }

    pub fn conformal_factor(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::ConformalFactor { x, c })
    }

    pub fn mobius_add(&mut self, x: Var, y: Var, c: f64) -> Var {
        self.push(Op::MobiusAdd { x, y, c })
    }

    pub fn mobius_scalar_mul(&mut self, x: Var, r: f64, c: f64) -> Var {
        self.push(Op::MobiusScalarMul { x, r, c })
    }

    pub fn hyp_distance(&mut self, x: Var, y: Var, c: f64) -> Var {
        self.push(Op::HypDistance { x, y, c })
    }

    pub fn exp_map(&mut self, x: Var, v: Var, c: f64) -> Var {
        self.push(Op::ExpMap { x, v, c })
    }

    pub fn gyromidpoint(&mut self, points: &[Var], c: f64) -> Var {
        assert!(!points.is_empty(), "gyromidpoint of an empty set");
        self.push(Op::Gyromidpoint {
            points: points.to_vec(),
            c,
        })
    }

    pub fn project(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::Project { x, c })
    }

    fn val(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    fn eval(&self, op: &Op) -> (Vec<f64>, usize, usize, Vec<usize>) {
        let like = |v: Var, value: Vec<f64>| {
            let (r, c) = self.dims(v);
            (value, r, c, Vec::new())
        };
        let vector = |value: Vec<f64>| {
            let n = value.len();
            (value, 1, n, Vec::new())
        };
        let scalar = |s: f64| (vec![s], 1, 1, Vec::new());
        match op {
            Op::Leaf | Op::Constant | Op::Custom(..) => {
                unreachable!("inputs are stored, not evaluated")
            }
            Op::Slice { .. } => unreachable!("slices are materialised on record"),
            Op::Add(a, b) => {
                assert_eq!(self.dims(*a), self.dims(*b), "add: shape mismatch");
                let v = self.val(*a).iter().zip(self.val(*b)).map(|(x, y)| x + y).collect();
                like(*a, v)
            }
            Op::Sub(a, b) => {
                assert_eq!(self.dims(*a), self.dims(*b), "sub: shape mismatch");
                let v = self.val(*a).iter().zip(self.val(*b)).map(|(x, y)| x - y).collect();
                like(*a, v)
            }
            Op::Neg(a) => like(*a, self.val(*a).iter().map(|x| -x).collect()),
            Op::Scale(a, k) => like(*a, self.val(*a).iter().map(|x| k * x).collect()),
            Op::Mul(a, b) => {
                assert_eq!(self.dims(*a), self.dims(*b), "mul: shape mismatch");
                let v = self.val(*a).iter().zip(self.val(*b)).map(|(x, y)| x * y).collect();
                like(*a, v)
            }
            Op::MulScalar(a, s) => {
                let k = self.val(*s)[0];
                like(*a, self.val(*a).iter().map(|x| k * x).collect())
            }
            Op::SumAll(a) => scalar(self.val(*a).iter().sum()),
            Op::MeanAll(a) => {
                let v = self.val(*a);
                scalar(v.iter().sum::<f64>() / v.len() as f64)
            }
            Op::Stack(xs) => {
                let cols = self.val(xs[0]).len();
                let mut v = Vec::with_capacity(cols * xs.len());
                for x in xs {
                    assert_eq!(self.val(*x).len(), cols, "stack: length mismatch");
                    v.extend_from_slice(self.val(*x));
                }
                if cols == 1 {
                    (v, 1, xs.len(), Vec::new())
                } else {
                    (v, xs.len(), cols, Vec::new())
                }
            }
            Op::Sigmoid(a) => like(*a, self.val(*a).iter().map(|&t| logistic(t)).collect()),
            Op::LogSumExp(a) => {
                let v = self.val(*a);
                let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                scalar(m + v.iter().map(|t| (t - m).exp()).sum::<f64>().ln())
            }
            Op::Affine { x, w, b } => {
                let (r, i) = self.dims(*x);
                let (wi, o) = self.dims(*w);
                assert_eq!(i, wi, "affine: input width mismatch");
                assert_eq!(self.val(*b).len(), o, "affine: bias width mismatch");
                let xv = ArrayView2::from_shape((r, i), self.val(*x)).unwrap();
                let wv = ArrayView2::from_shape((i, o), self.val(*w)).unwrap();
                let mut out = Vec::with_capacity(r * o);
                let bias = self.val(*b);
                for _ in 0..r {
                    out.extend_from_slice(bias);
                }
                let mut ov = ArrayViewMut2::from_shape((r, o), &mut out).unwrap();
                ndarray::linalg::general_mat_mul(1.0, &xv, &wv, 1.0, &mut ov);
                (out, r, o, Vec::new())
            }
            Op::Softplus(a) => like(*a, self.val(*a).iter().map(|&t| shifted_softplus(t)).collect()),
            Op::MaxPoolRows(a) => {
                let (r, c) = self.dims(*a);
                let v = self.val(*a);
                let mut best = v[..c].to_vec();
                let mut arg = vec![0usize; c];
                for i in 1..r {
                    let row = &v[i * c..(i + 1) * c];
                    for j in 0..c {
                        if row[j] > best[j] {
                            best[j] = row[j];
                            arg[j] = i;
                        }
                    }
                }
                (best, 1, c, arg)
            }
            Op::ConformalFactor { x, c } => scalar(raw::conformal_factor(self.val(*x), *c)),
            Op::MobiusAdd { x, y, c } => {
                let mut out = raw::mobius_add(self.val(*x), self.val(*y), *c);
                raw::project_in_place(&mut out, *c);
                vector(out)
            }
            Op::MobiusScalarMul { x, r, c } => {
                let mut out = raw::mobius_scalar_mul(*r, self.val(*x), *c);
                raw::project_in_place(&mut out, *c);
                vector(out)
            }
            Op::HypDistance { x, y, c } => scalar(raw::dist(self.val(*x), self.val(*y), *c)),
            Op::ExpMap { x, v, c } => vector(raw::exp_map(self.val(*x), self.val(*v), *c)),
            Op::Gyromidpoint { points, c } => {
                let rows: Vec<&[f64]> = points.iter().map(|p| self.val(*p)).collect();
                let mut out = raw::gyromidpoint(&rows, *c);
                raw::project_in_place(&mut out, *c);
                vector(out)
            }
            Op::Project { x, c } => {
                let mut out = self.val(*x).to_vec();
                raw::project_in_place(&mut out, *c);
                like(*x, out)
            }
        }
    }

    /// Re-evaluates every recorded primitive from its stored inputs and
    /// returns the recomputed node values.
    pub fn replay(&self) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Leaf | Op::Constant | Op::Custom(..) => n.value.clone(),
                Op::Slice { x, offset } => {
                    self.nodes[x.0].value[*offset..*offset + n.value.len()].to_vec()
                }
                op => self.eval(op).0,
            })
            .collect()
    }

    /// Recorded node values, in record order.
    pub fn recorded(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| n.value.clone()).collect()
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(GradError::NonScalarLoss(r, c));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Backward pass starting from explicit output adjoints.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients, GradError> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            let expected = self.nodes[v.0].value.len();
            if g.len() != expected {
                return Err(GradError::SeedShape {
                    node: v.0,
                    got: g.len(),
                    expected,
                });
            }
            accumulate(&mut adj[v.0], g);
            start = start.max(v.0 + 1);
        }
        for i in (0..start).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { adj, lens })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<(), GradError> {
        let node = &self.nodes[i];
        let mut send = |v: Var, grad: &[f64], this: &Self| {
            if this.wants(v) {
                accumulate(&mut adj[v.0], grad);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Custom(name, _) => return Err(GradError::Unregistered(name.clone())),
            Op::Add(a, b) => {
                send(*a, g, self);
                send(*b, g, self);
            }
            Op::Sub(a, b) => {
                send(*a, g, self);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, &neg, self);
            }
            Op::Neg(a) => {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*a, &neg, self);
            }
            Op::Scale(a, k) => {
                let s: Vec<f64> = g.iter().map(|v| k * v).collect();
                send(*a, &s, self);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(self.val(*b)).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.val(*a)).map(|(x, y)| x * y).collect();
                send(*a, &ga, self);
                send(*b, &gb, self);
            }
            Op::MulScalar(a, s) => {
                let k = self.val(*s)[0];
                let ga: Vec<f64> = g.iter().map(|v| k * v).collect();
                let gs = raw::dot(g, self.val(*a));
                send(*a, &ga, self);
                send(*s, &[gs], self);
            }
            Op::SumAll(a) => {
                let n = self.val(*a).len();
                send(*a, &vec![g[0]; n], self);
            }
            Op::MeanAll(a) => {
                let n = self.val(*a).len();
                send(*a, &vec![g[0] / n as f64; n], self);
            }
            Op::Stack(xs) => {
                let w = self.val(xs[0]).len();
                for (k, x) in xs.iter().enumerate() {
                    send(*x, &g[k * w..(k + 1) * w], self);
                }
            }
            Op::Slice { x, offset } => {
                if self.wants(*x) {
                    let slot = adj[x.0].get_or_insert_with(|| vec![0.0; self.val(*x).len()]);
                    for (dst, src) in slot[*offset..*offset + g.len()].iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(&node.value).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                send(*a, &ga, self);
            }
            Op::LogSumExp(a) => {
                let out = node.value[0];
                let ga: Vec<f64> = self.val(*a).iter().map(|t| g[0] * (t - out).exp()).collect();
                send(*a, &ga, self);
            }
            Op::Affine { x, w, b } => {
                let (r, inw) = self.dims(*x);
                let o = node.cols;
                let gv = ArrayView2::from_shape((r, o), g).unwrap();
                if self.wants(*x) {
                    let wv = ArrayView2::from_shape((inw, o), self.val(*w)).unwrap();
                    let mut gx = vec![0.0; r * inw];
                    let mut gxv = ArrayViewMut2::from_shape((r, inw), &mut gx).unwrap();
                    ndarray::linalg::general_mat_mul(1.0, &gv, &wv.t(), 0.0, &mut gxv);
                    send(*x, &gx, self);
                }
                if self.wants(*w) {
                    let xv = ArrayView2::from_shape((r, inw), self.val(*x)).unwrap();
                    let mut gw = vec![0.0; inw * o];
                    let mut gwv = ArrayViewMut2::from_shape((inw, o), &mut gw).unwrap();
                    ndarray::linalg::general_mat_mul(1.0, &xv.t(), &gv, 0.0, &mut gwv);
                    send(*w, &gw, self);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks_exact(o) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*b, &gb, self);
                }
            }
            Op::Softplus(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.val(*a))
                    .map(|(gi, t)| gi * logistic(*t))
                    .collect();
                send(*a, &ga, self);
            }
            Op::MaxPoolRows(a) => {
                let (r, c) = self.dims(*a);
                let mut ga = vec![0.0; r * c];
                for (j, &row) in node.argmax.iter().enumerate() {
                    ga[row * c + j] = g[j];
                }
                send(*a, &ga, self);
            }
            Op::ConformalFactor { x, c } => {
                let xv = self.val(*x);
                let lam = node.value[0];
                let k = g[0] * lam * lam * c;
                let gx: Vec<f64> = xv.iter().map(|v| k * v).collect();
                send(*x, &gx, self);
            }
            Op::MobiusAdd { x, y, c } => {
                let (xv, yv) = (self.val(*x), self.val(*y));
                let rawv = raw::mobius_add(xv, yv, *c);
                let g_raw = project_vjp(&rawv, *c, g);
                let (gx, gy) = mobius_add_vjp(xv, yv, *c, &g_raw);
                send(*x, &gx, self);
                send(*y, &gy, self);
            }
            Op::MobiusScalarMul { x, r, c } => {
                let xv = self.val(*x);
                let rawv = raw::mobius_scalar_mul(*r, xv, *c);
                let g_raw = project_vjp(&rawv, *c, g);
                send(*x, &scalar_mul_vjp(*r, xv, *c, &g_raw), self);
            }
            Op::HypDistance { x, y, c } => {
                let (gx, gy) = distance_vjp(self.val(*x), self.val(*y), *c, g[0]);
                send(*x, &gx, self);
                send(*y, &gy, self);
            }
            Op::ExpMap { x, v, c } => {
                let (gx, gv) = exp_map_vjp(self.val(*x), self.val(*v), *c, g);
                send(*x, &gx, self);
                send(*v, &gv, self);
            }
            Op::Gyromidpoint { points, c } => {
                let rows: Vec<&[f64]> = points.iter().map(|p| self.val(*p)).collect();
                let grads = gyromidpoint_vjp(&rows, *c, g);
                for (p, gp) in points.iter().zip(grads) {
                    send(*p, &gp, self);
                }
            }
            Op::Project { x, c } => {
                send(*x, &project_vjp(self.val(*x), *c, g), self);
            }
        }
        Ok(())
    }

    /// Names of the primitives recorded on this tape, in order.
    pub fn primitive_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Adjoint of the ball projection, evaluated at the unprojected input.
fn project_vjp(x: &[f64], c: f64, g: &[f64]) -> Vec<f64> {
    let max_norm = (1.0 - crate::geometry::BALL_EPS) / c.sqrt();
    let n = raw::norm(x);
    if n >= max_norm && n > 0.0 {
        let gx = raw::dot(g, x) / (n * n);
        let k = max_norm / n;
        g.iter().zip(x).map(|(gi, xi)| k * (gi - gx * xi)).collect()
    } else {
        g.to_vec()
    }
}

fn mobius_add_vjp(x: &[f64], y: &[f64], c: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (xy, x2, y2) = (raw::dot(x, y), raw::norm_sq(x), raw::norm_sq(y));
    let (a, b, d) = raw::mobius_coefs(xy, x2, y2, c);
    let gx_dot = raw::dot(g, x);
    let gy_dot = raw::dot(g, y);
    // <g, out> with out = (a x + b y) / d
    let g_out = (a * gx_dot + b * gy_dot) / d;
    let ga = gx_dot / d;
    let gb = gy_dot / d;
    let gd = -g_out / d;
    let gx = (0..x.len())
        .map(|i| {
            a / d * g[i] + ga * 2.0 * c * y[i] - gb * 2.0 * c * x[i]
                + gd * (2.0 * c * y[i] + 2.0 * c * c * y2 * x[i])
        })
        .collect();
    let gy = (0..x.len())
        .map(|i| {
            b / d * g[i]
                + ga * (2.0 * c * x[i] + 2.0 * c * y[i])
                + gd * (2.0 * c * x[i] + 2.0 * c * c * x2 * y[i])
        })
        .collect();
    (gx, gy)
}

fn scalar_mul_vjp(r: f64, x: &[f64], c: f64, g: &[f64]) -> Vec<f64> {
    let n = raw::norm(x);
    if n == 0.0 {
        return g.iter().map(|v| r * v).collect();
    }
    let s = c.sqrt();
    let arg = s * n;
    let t = (r * raw::atanh_clamped(arg)).tanh();
    let psi = t / (s * n);
    let dt_dn = if arg < ATANH_CLAMP {
        (1.0 - t * t) * r * s / (1.0 - c * n * n)
    } else {
        0.0
    };
    let dpsi_dn = dt_dn / (s * n) - t / (s * n * n);
    let k = raw::dot(g, x) / n * dpsi_dn;
    g.iter().zip(x).map(|(gi, xi)| psi * gi + k * xi).collect()
}

fn distance_vjp(x: &[f64], y: &[f64], c: f64, g: f64) -> (Vec<f64>, Vec<f64>) {
    let neg_x: Vec<f64> = x.iter().map(|v| -v).collect();
    let u = raw::mobius_add_neg(x, y, c);
    let n = raw::norm(&u);
    let s = c.sqrt();
    if n == 0.0 || s * n >= ATANH_CLAMP {
        return (vec![0.0; x.len()], vec![0.0; y.len()]);
    }
    let k = g * 2.0 / (1.0 - c * n * n) / n;
    let gu: Vec<f64> = u.iter().map(|v| k * v).collect();
    let (gnx, gy) = mobius_add_vjp(&neg_x, y, c, &gu);
    (gnx.into_iter().map(|v| -v).collect(), gy)
}

fn exp_map_vjp(x: &[f64], v: &[f64], c: f64, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = raw::norm(v);
    if n == 0.0 {
        // exp_x(0) = project(x), and the lift has Jacobian lambda/2 in v.
        let gx = project_vjp(x, c, g);
        let half_lam = raw::conformal_factor(x, c) / 2.0;
        let (gx_add, gw) = mobius_add_vjp(x, &vec![0.0; x.len()], c, &gx);
        let gv = gw.iter().map(|w| half_lam * w).collect();
        return (gx_add, gv);
    }
    let s = c.sqrt();
    let lam = raw::conformal_factor(x, c);
    let t = (s * lam * n / 2.0).tanh();
    let phi = t / (s * n);
    let w: Vec<f64> = v.iter().map(|vi| phi * vi).collect();
    let rawv = raw::mobius_add(x, &w, c);
    let g_raw = project_vjp(&rawv, c, g);
    let (mut gx, gw) = mobius_add_vjp(x, &w, c, &g_raw);
    let gw_v = raw::dot(&gw, v);
    let dphi_dn = (1.0 - t * t) * lam / (2.0 * n) - t / (s * n * n);
    let dphi_dlam = (1.0 - t * t) / 2.0;
    let gv = gw
        .iter()
        .zip(v)
        .map(|(gi, vi)| phi * gi + gw_v * dphi_dn * vi / n)
        .collect();
    let kx = gw_v * dphi_dlam * lam * lam * c;
    gx.iter_mut().zip(x).for_each(|(a, xi)| *a += kx * xi);
    (gx, gv)
}

fn gyromidpoint_vjp(points: &[&[f64]], c: f64, g: &[f64]) -> Vec<Vec<f64>> {
    let (agg, lambdas, den) = raw::midpoint_aggregate(points, c);
    let rawv = raw::mobius_scalar_mul(0.5, &agg, c);
    let g_raw = project_vjp(&rawv, c, g);
    let g_agg = scalar_mul_vjp(0.5, &agg, c, &g_raw);
    let g_num: Vec<f64> = g_agg.iter().map(|v| v / den).collect();
    let g_den = -raw::dot(&g_agg, &agg) / den;
    points
        .iter()
        .zip(&lambdas)
        .map(|(z, &lam)| {
            let k = (raw::dot(&g_num, z) + g_den) * lam * lam * c;
            g_num.iter().zip(z.iter()).map(|(gn, zi)| lam * gn + k * zi).collect()
        })
        .collect()
}

/// Agreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub label: String,
    /// Largest `|a - f| / max(|a|, |f|, 1e-8)` over input components.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub step: f64,
    pub inputs: usize,
}

impl GradientReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Compares `backward()` against central differences of `f` at `point`.
///
/// `f` records a scalar function of a single `1 x n` leaf on a fresh tape.
pub fn finite_diff_check<F>(label: &str, f: F, point: &[f64], step: f64) -> Result<GradientReport, GradError>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    compare_gradients(label, &f, &f, point, step)
}

/// Like [`finite_diff_check`], but differences `numeric` instead of the
/// function whose adjoint is checked. Used where the analytic gradient
/// deliberately holds part of the graph constant.
pub fn compare_gradients<F, G>(label: &str, analytic: F, numeric: G, point: &[f64], step: f64) -> Result<GradientReport, GradError>
where
    F: Fn(&mut Tape, Var) -> Var,
    G: Fn(&mut Tape, Var) -> Var,
{
    let eval = |p: &[f64]| {
        let mut t = Tape::new();
        let x = t.leaf_vec(p.to_vec());
        let y = numeric(&mut t, x);
        t.scalar(y)
    };
    let mut t = Tape::new();
    let x = t.leaf_vec(point.to_vec());
    let y = analytic(&mut t, x);
    let grad = t.backward(y)?.get(x);
    let mut worst = (0.0, 0usize);
    let mut p = point.to_vec();
    for i in 0..point.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = eval(&p);
        p[i] = orig - step;
        let down = eval(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * step);
        let e = relative_error(grad[i], fd);
        if !(e <= worst.0) {
            worst = (e, i);
        }
    }
    Ok(GradientReport {
        label: label.to_string(),
        max_rel_error: worst.0,
        worst_index: worst.1,
        step,
        inputs: point.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ball_sample(rng: &mut ChaCha8Rng, dim: usize, c: f64, max_scaled: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = raw::norm(&v);
        let r = rng.random_range(0.05..max_scaled) / c.sqrt();
        v.iter().map(|x| x * r / n).collect()
    }

    /// Splits a flat leaf into `k` vectors of length `dim`.
    fn split(t: &mut Tape, x: Var, k: usize, dim: usize) -> Vec<Var> {
        (0..k).map(|i| t.slice(x, i * dim, 1, dim)).collect()
    }

    fn weights(t: &mut Tape, seed: u64, n: usize) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        t.constant_vec(w)
    }

    fn check<F: Fn(&mut Tape, Var) -> Var>(label: &str, f: F, point: &[f64]) {
        let r = finite_diff_check(label, f, point, FD_STEP).unwrap();
        assert!(r.passes(1e-4), "{label}: {r:?}");
    }

    #[test]
    fn quadratic_is_exact() {
        let r = finite_diff_check(
            "quadratic",
            |t, x| {
                let sq = t.mul(x, x);
                let s = t.scale(sq, 0.5);
                t.sum_all(s)
            },
            &[1.5, -2.0, 0.25],
            FD_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn geometry_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &c in &[0.1, 1.0, 2.5] {
            for &dim in &[2usize, 5] {
                let x = ball_sample(&mut rng, dim, c, 0.8);
                let y = ball_sample(&mut rng, dim, c, 0.8);
                let xy = [x.clone(), y.clone()].concat();
                check(
                    "mobius_add",
                    |t, p| {
                        let v = split(t, p, 2, dim);
                        let m = t.mobius_add(v[0], v[1], c);
                        let w = weights(t, 1, dim);
                        let s = t.mul(m, w);
                        t.sum_all(s)
                    },
                    &xy,
                );
                check("hyp_distance", |t, p| {
                    let v = split(t, p, 2, dim);
                    t.hyp_distance(v[0], v[1], c)
                }, &xy);
                check("conformal_factor", |t, p| t.conformal_factor(p, c), &x);
                for &r in &[0.5, 2.0, -0.7] {
                    check(
                        "mobius_scalar_mul",
                        |t, p| {
                            let m = t.mobius_scalar_mul(p, r, c);
                            let w = weights(t, 2, dim);
                            let s = t.mul(m, w);
                            t.sum_all(s)
                        },
                        &x,
                    );
                }
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                check(
                    "exp_map",
                    |t, p| {
                        let parts = split(t, p, 2, dim);
                        let e = t.exp_map(parts[0], parts[1], c);
                        let w = weights(t, 3, dim);
                        let s = t.mul(e, w);
                        t.sum_all(s)
                    },
                    &[x.clone(), v].concat(),
                );
                let pts: Vec<f64> = (0..4).flat_map(|_| ball_sample(&mut rng, dim, c, 0.8)).collect();
                check(
                    "gyromidpoint",
                    |t, p| {
                        let v = split(t, p, 4, dim);
                        let m = t.gyromidpoint(&v, c);
                        let w = weights(t, 4, dim);
                        let s = t.mul(m, w);
                        t.sum_all(s)
                    },
                    &pts,
                );
            }
        }
    }

    #[test]
    fn projection_seam_adjoint() {
        // Outside the clamp radius the projection is a smooth rescaling.
        let c = 1.0;
        check(
            "project",
            |t, p| {
                let q = t.project(p, c);
                let w = weights(t, 9, 3);
                let s = t.mul(q, w);
                t.sum_all(s)
            },
            &[1.2, -0.4, 0.9],
        );
    }

    #[test]
    fn encoder_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (r, i, o) = (5, 3, 4);
        let n = r * i + i * o + o;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        check(
            "affine+softplus+max_pool",
            |t, p| {
                let x = t.slice(p, 0, r, i);
                let w = t.slice(p, r * i, i, o);
                let b = t.slice(p, r * i + i * o, 1, o);
                let h = t.affine(x, w, b);
                let h = t.softplus(h);
                let m = t.max_pool_rows(h);
                let wt = weights(t, 5, o);
                let s = t.mul(m, wt);
                t.sum_all(s)
            },
            &p,
        );
        check(
            "sigmoid+log_sum_exp",
            |t, p| {
                let s = t.sigmoid(p);
                let l = t.log_sum_exp(p);
                let a = t.sum_all(s);
                let b = t.mul_scalar(a, l);
                t.mean_all(b)
            },
            &p[..6],
        );
    }

    #[test]
    fn stationary_points_have_zero_gradient() {
        let c = 0.5;
        let x0 = vec![0.3, -0.4, 0.2];
        let mut t = Tape::new();
        let x = t.leaf_vec(x0.clone());
        let fixed = t.constant_vec(x0);
        let d = t.hyp_distance(x, fixed, c);
        let d2 = t.mul(d, d);
        assert_eq!(t.backward(d2).unwrap().get(x), vec![0.0; 3]);

        let mut t = Tape::new();
        let v = t.leaf_vec(vec![0.0; 3]);
        let o = t.constant_vec(vec![0.0; 3]);
        let e = t.exp_map(o, v, c);
        let sq = t.mul(e, e);
        let l = t.sum_all(sq);
        assert_eq!(t.backward(l).unwrap().get(v), vec![0.0; 3]);
    }

    #[test]
    fn zero_tangent_gradient_is_half_conformal_factor() {
        let c = 1.0;
        check(
            "exp_map at v=0",
            |t, p| {
                let x = t.constant_vec(vec![0.3, 0.1]);
                let e = t.exp_map(x, p, c);
                let w = weights(t, 6, 2);
                let s = t.mul(e, w);
                t.sum_all(s)
            },
            &[0.0, 0.0],
        );
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let c = 0.3;
        let a = vec![0.2, 0.5, -0.1];
        let b = vec![-0.4, 0.1, 0.3];
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf_vec(a.clone());
            let y = t.constant_vec(b.clone());
            let d = t.hyp_distance(x, y, c);
            let lam = t.conformal_factor(x, c);
            let out = match which {
                0 => d,
                1 => lam,
                _ => t.add(d, lam),
            };
            t.backward(out).unwrap().get(x)
        };
        let (g0, g1, g2) = (grad_of(0), grad_of(1), grad_of(2));
        for k in 0..3 {
            assert!((g0[k] + g1[k] - g2[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn replay_and_repeat_backward_are_bitwise_stable() {
        let c = 0.1;
        let mut t = Tape::new();
        let x = t.leaf(vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6], 2, 3);
        let w = t.leaf(vec![0.5, -0.2, 0.3, 0.1, 0.7, -0.4], 3, 2);
        let b = t.leaf_vec(vec![0.01, -0.02]);
        let h = t.affine(x, w, b);
        let h = t.softplus(h);
        let m = t.max_pool_rows(h);
        let o = t.constant_vec(vec![0.0, 0.0]);
        let z = t.exp_map(o, m, c);
        let r = t.hyp_distance(z, o, c);
        assert_eq!(t.replay(), t.recorded());
        let g1 = t.backward(r).unwrap();
        let g2 = t.backward(r).unwrap();
        assert_eq!(g1.get(w), g2.get(w));
        assert_eq!(g1.get(x), g2.get(x));
    }

    #[test]
    fn custom_primitive_without_adjoint_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf_vec(vec![1.0, 2.0]);
        let y = t.custom("mystery", &[x], vec![3.0], 1, 1);
        assert_eq!(
            t.backward(y).unwrap_err(),
            GradError::Unregistered("mystery".into())
        );
        let v = t.leaf_vec(vec![1.0, 2.0]);
        assert!(matches!(t.backward(v), Err(GradError::NonScalarLoss(1, 2))));
    }
}
