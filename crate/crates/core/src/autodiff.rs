//! Tape-based reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] is an arena of nodes. Every builder method evaluates its
//! primitive eagerly, stores the result and returns a copyable [`Var`]
//! handle, so nodes are recorded in topological order by construction.
//! [`Tape::backward`] walks the arena once in reverse and accumulates
//! adjoints.
//!
//! Binary elementwise primitives broadcast along any axis of length one
//! (a `1×1` tensor acts as a scalar). Shape errors in builder methods are
//! programming errors and panic, like the underlying ndarray kernels.
//!
//! Primitives that are not built in (the clearing projections, for
//! example) are supplied through a [`Registry`] of [`CustomPrimitive`]s and
//! invoked by name with [`Tape::call`]. Their backward rule replaces the
//! default chain rule for that node.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use thiserror::Error;

use crate::oracles;
use crate::scalar::Real;

pub type Tensor<T> = Array2<T>;

/// Backward rule of a custom node: upstream adjoint in, one adjoint per
/// input out (each shaped like the corresponding input).
pub type VjpFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("primitive `{0}` is not registered on this tape")]
    UnregisteredPrimitive(String),
    #[error("primitive `{name}` failed: {reason}")]
    PrimitiveFailed { name: String, reason: String },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Result of a custom primitive's forward pass.
pub struct CustomOutput<T> {
    pub value: Tensor<T>,
    pub backward: VjpFn<T>,
}

/// A primitive whose forward and vector-Jacobian product are supplied by
/// the caller.
pub trait CustomPrimitive<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<CustomOutput<T>, AutodiffError>;
}

/// Named custom primitives available to a tape.
pub struct Registry<T: Real> {
    prims: HashMap<String, Arc<dyn CustomPrimitive<T>>>,
}

impl<T: Real> Default for Registry<T> {
    fn default() -> Self {
        Self {
            prims: HashMap::new(),
        }
    }
}

impl<T: Real> Registry<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, prim: Arc<dyn CustomPrimitive<T>>) {
        self.prims.insert(prim.name().to_string(), prim);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn CustomPrimitive<T>>> {
        self.prims.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.prims.contains_key(name)
    }
}

impl<T: Real> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.prims.keys().collect();
        names.sort();
        f.debug_struct("Registry").field("prims", &names).finish()
    }
}

enum Op<T: Real> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Max(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddScalar(Var, T),
    MaxScalar(Var, T),
    MatMul(Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Powf(Var, T),
    Reciprocal(Var),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    Broadcast(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    Custom(Vec<Var>, VjpFn<T>),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Max(..) => "max",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MaxScalar(..) => "max_scalar",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Powf(..) => "powf",
            Op::Reciprocal(..) => "reciprocal",
            Op::Sum(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::SumRows(..) => "sum_rows",
            Op::Broadcast(..) => "broadcast",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::Custom(..) => "custom",
        }
    }
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recorded computation graph.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    registry: Arc<Registry<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("registry", &self.registry)
            .finish()
    }
}

/// Adjoints of every node after a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    adjoints: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.adjoints[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0]),
        }
    }

    /// Moves the adjoint out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.adjoints[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible broadcast shapes {a:?} and {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

/// Sums `g` down to `shape` along broadcast axes.
fn unbroadcast<T: Real>(g: &Tensor<T>, shape: (usize, usize)) -> Tensor<T> {
    let mut out = g.clone();
    if shape.0 == 1 && out.nrows() != 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && out.ncols() != 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    out
}

fn zip_broadcast<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast lhs");
    let bv = b.broadcast(shape).expect("broadcast rhs");
    let mut out = Tensor::zeros(shape);
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_registry(Arc::new(Registry::new()))
    }

    pub fn with_registry(registry: Arc<Registry<T>>) -> Self {
        Self {
            nodes: Vec::new(),
            registry,
        }
    }

    pub fn registry(&self) -> &Arc<Registry<T>> {
        &self.registry
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded non-input nodes.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf | Op::Constant))
            .count()
    }

    /// Primitive names in recording order, inputs included.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.dim(), (1, 1), "scalar() on non-scalar node");
        t[[0, 0]]
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn leaf_scalar(&mut self, x: T) -> Var {
        self.leaf(Tensor::from_elem((1, 1), x))
    }

    /// Input that receives no adjoint.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn constant_scalar(&mut self, x: T) -> Var {
        self.constant(Tensor::from_elem((1, 1), x))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros((rows, cols)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    /// Elementwise maximum; ties send the adjoint to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| if x >= y { x } else { y });
        self.push(Op::Max(a, b), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push(Op::Neg(a), v)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(Op::AddScalar(a, c), v)
    }

    /// `max(a, c)` elementwise; at a tie the adjoint flows to `a`.
    pub fn max_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| if x >= c { x } else { c });
        self.push(Op::MaxScalar(a, c), v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul shape mismatch {:?} x {:?}",
            av.dim(),
            bv.dim()
        );
        let v = av.dot(bv);
        self.push(Op::MatMul(a, b), v)
    }

    /// `max(x, 0)` with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), v)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        self.push(Op::Softplus(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.ln());
        self.push(Op::Log(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sqrt());
        self.push(Op::Sqrt(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let v = self.value(a).mapv(|x| x.powf(p));
        self.push(Op::Powf(a, p), v)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.recip());
        self.push(Op::Reciprocal(a), v)
    }

    /// Sum of all elements, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Per-row sums (`n×m → n×1`).
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols(a), v)
    }

    /// Per-column sums (`n×m → 1×m`).
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::SumRows(a), v)
    }

    /// Explicit broadcast to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let v = self
            .value(a)
            .broadcast(shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(a), shape))
            .to_owned();
        self.push(Op::Broadcast(a), v)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols(a, start), v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows(a, start), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    /// Selects rows by index (repeats allowed); adjoints scatter-add back.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), idx);
        self.push(Op::GatherRows(a, idx.to_vec()), v)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select(Axis(1), idx);
        self.push(Op::GatherCols(a, idx.to_vec()), v)
    }

    /// Invokes the registered primitive `name`.
    pub fn call(&mut self, name: &str, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let prim = self
            .registry
            .get(name)
            .cloned()
            .ok_or_else(|| AutodiffError::UnregisteredPrimitive(name.to_string()))?;
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = prim.forward(&values)?;
        Ok(self.push(Op::Custom(inputs.to_vec(), out.backward), out.value))
    }

    /// Runs an unregistered custom primitive directly.
    pub fn apply(
        &mut self,
        prim: &dyn CustomPrimitive<T>,
        inputs: &[Var],
    ) -> Result<Var, AutodiffError> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = prim.forward(&values)?;
        Ok(self.push(Op::Custom(inputs.to_vec(), out.backward), out.value))
    }

    /// Reverse sweep seeded with `seed` times a tensor of ones at `output`.
    pub fn backward(&self, output: Var, seed: T) -> Gradients<T> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        adj[output.0] = Some(Tensor::from_elem(self.shape(output), seed));

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Constant => {
                    adj[i] = Some(g);
                    continue;
                }
                _ => {}
            }
            for (input, contrib) in self.vjp(node, &g) {
                accumulate(&mut adj[input.0], contrib);
            }
            adj[i] = Some(g);
        }

        // Only inputs keep adjoints; constants never carry one.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                adj[i] = None;
            }
        }
        Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }

    /// Like [`Tape::backward`] but keeps adjoints of intermediate nodes.
    pub fn backward_all(&self, output: Var, seed: T) -> Gradients<T> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        adj[output.0] = Some(Tensor::from_elem(self.shape(output), seed));
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf | Op::Constant) {
                for (input, contrib) in self.vjp(node, &g) {
                    accumulate(&mut adj[input.0], contrib);
                }
            }
            adj[i] = Some(g);
        }
        Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.dim()).collect(),
        }
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![
                (*a, unbroadcast(g, val(*a).dim())),
                (*b, unbroadcast(g, val(*b).dim())),
            ],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(g, val(*a).dim())),
                (*b, unbroadcast(&g.mapv(|x| -x), val(*b).dim())),
            ],
            Op::Mul(a, b) => {
                let ga = zip_broadcast(g, val(*b), |x, y| x * y);
                let gb = zip_broadcast(g, val(*a), |x, y| x * y);
                vec![
                    (*a, unbroadcast(&ga, val(*a).dim())),
                    (*b, unbroadcast(&gb, val(*b).dim())),
                ]
            }
            Op::Div(a, b) => {
                let ga = zip_broadcast(g, val(*b), |x, y| x / y);
                // d(a/b)/db = -(a/b)/b
                let q = zip_broadcast(&node.value, val(*b), |o, y| -o / y);
                let gb = &q * g;
                vec![
                    (*a, unbroadcast(&ga, val(*a).dim())),
                    (*b, unbroadcast(&gb, val(*b).dim())),
                ]
            }
            Op::Max(a, b) => {
                let shape = node.value.dim();
                let av = val(*a).broadcast(shape).unwrap();
                let bv = val(*b).broadcast(shape).unwrap();
                let mut ga = Tensor::zeros(shape);
                let mut gb = Tensor::zeros(shape);
                Zip::from(&mut ga)
                    .and(&mut gb)
                    .and(g)
                    .and(&av)
                    .and(&bv)
                    .for_each(|ga, gb, &gi, &x, &y| {
                        if x >= y {
                            *ga = gi
                        } else {
                            *gb = gi
                        }
                    });
                vec![
                    (*a, unbroadcast(&ga, val(*a).dim())),
                    (*b, unbroadcast(&gb, val(*b).dim())),
                ]
            }
            Op::Neg(a) => vec![(*a, g.mapv(|x| -x))],
            Op::Scale(a, c) => {
                let c = *c;
                vec![(*a, g.mapv(|x| x * c))]
            }
            Op::AddScalar(a, _) => vec![(*a, g.clone())],
            Op::MaxScalar(a, c) => {
                let c = *c;
                let mut out = g.clone();
                Zip::from(&mut out).and(val(*a)).for_each(|o, &x| {
                    if x < c {
                        *o = T::zero()
                    }
                });
                vec![(*a, out)]
            }
            Op::MatMul(a, b) => {
                let ga = g.dot(&val(*b).t());
                let gb = val(*a).t().dot(g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(a) => {
                let mut out = g.clone();
                Zip::from(&mut out).and(val(*a)).for_each(|o, &x| {
                    if x <= T::zero() {
                        *o = T::zero()
                    }
                });
                vec![(*a, out)]
            }
            Op::Softplus(a) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(val(*a))
                    .for_each(|o, &x| *o = *o * sigmoid(x));
                vec![(*a, out)]
            }
            Op::Exp(a) => vec![(*a, g * &node.value)],
            Op::Log(a) => vec![(*a, g / val(*a))],
            Op::Sqrt(a) => {
                let half = T::lit(0.5);
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(&node.value)
                    .for_each(|o, &r| *o = *o * half / r);
                vec![(*a, out)]
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(val(*a))
                    .for_each(|o, &x| *o = *o * two * x);
                vec![(*a, out)]
            }
            Op::Powf(a, p) => {
                let p = *p;
                let pm1 = p - T::one();
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(val(*a))
                    .for_each(|o, &x| *o = *o * p * x.powf(pm1));
                vec![(*a, out)]
            }
            Op::Reciprocal(a) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(&node.value)
                    .for_each(|o, &r| *o = -*o * r * r);
                vec![(*a, out)]
            }
            Op::Sum(a) => vec![(*a, Tensor::from_elem(val(*a).dim(), g[[0, 0]]))],
            Op::SumCols(a) => {
                let shape = val(*a).dim();
                vec![(*a, g.broadcast(shape).unwrap().to_owned())]
            }
            Op::SumRows(a) => {
                let shape = val(*a).dim();
                vec![(*a, g.broadcast(shape).unwrap().to_owned())]
            }
            Op::Broadcast(a) => vec![(*a, unbroadcast(g, val(*a).dim()))],
            Op::SliceCols(a, start) => {
                let mut out = Tensor::zeros(val(*a).dim());
                out.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                vec![(*a, out)]
            }
            Op::SliceRows(a, start) => {
                let mut out = Tensor::zeros(val(*a).dim());
                out.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                vec![(*a, out)]
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).ncols();
                        let piece = g.slice(s![.., off..off + w]).to_owned();
                        off += w;
                        (p, piece)
                    })
                    .collect()
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let h = val(p).nrows();
                        let piece = g.slice(s![off..off + h, ..]).to_owned();
                        off += h;
                        (p, piece)
                    })
                    .collect()
            }
            Op::GatherRows(a, idx) => {
                let mut out = Tensor::zeros(val(*a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    out.row_mut(src).zip_mut_with(&g.row(r), |d, &x| *d = *d + x);
                }
                vec![(*a, out)]
            }
            Op::GatherCols(a, idx) => {
                let mut out = Tensor::zeros(val(*a).dim());
                for (c, &src) in idx.iter().enumerate() {
                    out.column_mut(src).zip_mut_with(&g.column(c), |d, &x| *d = *d + x);
                }
                vec![(*a, out)]
            }
            Op::Custom(inputs, backward) => {
                let grads = backward(g);
                assert_eq!(grads.len(), inputs.len(), "custom vjp arity");
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, contrib: Tensor<T>) {
    match slot {
        Some(acc) => acc.zip_mut_with(&contrib, |a, &x| *a = *a + x),
        None => *slot = Some(contrib),
    }
}

/// Records `program` on a fresh tape with every input as a leaf.
pub fn record_and_eval<T, F>(program: F, inputs: &[Tensor<T>]) -> (Tensor<T>, Tape<T>, Vec<Var>, Var)
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = program(&mut tape, &vars);
    (tape.value(out).clone(), tape, vars, out)
}

/// Outcome of a successful [`gradcheck`].
#[derive(Debug, Clone)]
pub struct GradcheckReport<T> {
    pub max_rel_err: T,
    /// (input index, flat element index) of the worst component.
    pub worst: (usize, usize),
    pub analytic: T,
    pub numeric: T,
    pub components: usize,
}

#[derive(Debug, Error)]
#[error(
    "gradient check failed: rel err {max_rel_err} > {tolerance} at input {input} element {element} \
     (analytic {analytic}, numeric {numeric})"
)]
pub struct GradcheckFailure<T: fmt::Display + fmt::Debug> {
    pub max_rel_err: T,
    pub tolerance: T,
    pub input: usize,
    pub element: usize,
    pub analytic: T,
    pub numeric: T,
}

/// Compares reverse-mode gradients of a scalar program against central
/// finite differences.
///
/// The relative error of component `i` is
/// `|g_i - d_i| / max(|g_i|, |d_i|, 1e-4 * scale)` where `scale` is the
/// largest magnitude of either gradient, so components many orders below
/// the gradient's size are judged on an absolute basis.
pub fn gradcheck<T, F>(
    program: F,
    inputs: &[Tensor<T>],
    step: T,
    tolerance: T,
) -> Result<GradcheckReport<T>, GradcheckFailure<T>>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Var,
{
    assert!(step > T::zero(), "gradcheck step must be positive");
    let (_, tape, vars, out) = record_and_eval(&program, inputs);
    let grads = tape.backward(out, T::one());
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get(v)).collect();

    let numeric = oracles::fd_gradient(
        |pt: &[Tensor<T>]| {
            let (val, ..) = record_and_eval(&program, pt);
            val.sum()
        },
        inputs,
        step,
    );

    let mut scale = T::zero();
    for (a, d) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.iter().zip(d.iter()) {
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    let floor = (T::lit(1e-4) * scale).max(T::min_positive_value());

    let mut report = GradcheckReport {
        max_rel_err: T::zero(),
        worst: (0, 0),
        analytic: T::zero(),
        numeric: T::zero(),
        components: 0,
    };
    for (k, (a, d)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&x, &y)) in a.iter().zip(d.iter()).enumerate() {
            report.components += 1;
            let denom = x.abs().max(y.abs()).max(floor);
            let rel = (x - y).abs() / denom;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = (k, j);
                report.analytic = x;
                report.numeric = y;
            }
        }
    }
    if report.max_rel_err > tolerance || report.max_rel_err.is_nan() {
        return Err(GradcheckFailure {
            max_rel_err: report.max_rel_err,
            tolerance,
            input: report.worst.0,
            element: report.worst.1,
            analytic: report.analytic,
            numeric: report.numeric,
        });
    }
    Ok(report)
}
