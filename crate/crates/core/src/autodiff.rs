//! Define-by-run reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a new
//! node holding its value and the ids of its inputs, so node order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use haad::autodiff::Graph;
//! use ndarray::array;
//!
//! let mut g = Graph::new();
//! let x = g.variable(array![[3.0]]);
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap()[[0, 0]], 6.0);
//! ```
//!
//! Parameters live outside the graph in a [`ParamStore`]; a fresh graph is
//! built for every step and the store is bound into it with
//! [`Graph::bind`].

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("duplicate parameter {0}")]
    DuplicateParameter(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Prelu { x: NodeId, slope: NodeId },
    Sum(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    SliceRows { x: NodeId, start: usize },
    DiagEmbed(NodeId),
    /// `Q·X` with `Q = H_1 H_2 ... H_k`; `stash[j]` is the input to reflection `j`.
    Householder {
        vs: NodeId,
        x: NodeId,
        stash: Vec<Array2<f64>>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ConcatCols(..) => "concat_cols",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Prelu { .. } => "prelu",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::DiagEmbed(..) => "diag_embed",
            Op::Householder { .. } => "householder",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::DiagEmbed(a) => vec![*a],
            Op::SliceRows { x, .. } => vec![*x],
            Op::Prelu { x, slope } => vec![*x, *slope],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Householder { vs, x, .. } => vec![*vs, *x],
        }
    }
}

/// One value in the computation graph.
#[derive(Debug, Clone)]
pub struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Array2<f64> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Array2<f64>> {
        self.grad.as_ref()
    }

    pub fn op_tag(&self) -> &'static str {
        self.op.tag()
    }

    pub fn parents(&self) -> Vec<NodeId> {
        self.op.parents()
    }
}

#[cfg(test)]
thread_local! {
    static FAULTY_TANH_ADJOINT: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    a.dim()
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        let value = standard(value);
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ncols() != vb.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let v = va.dot(vb);
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (shape(&self.nodes[a.0].value), shape(&self.nodes[b.0].value));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(AutodiffError::ShapeMismatch {
            op: "concat_cols",
            lhs: (0, 0),
            rhs: (0, 0),
        })?;
        let rows = self.nodes[first.0].value.nrows();
        for p in parts {
            let s = shape(&self.nodes[p.0].value);
            if s.0 != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: shape(&self.nodes[first.0].value),
                    rhs: s,
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if src.len() != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: shape(src),
                rhs: (rows, cols),
            });
        }
        let flat: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("length checked");
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn flatten(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        self.reshape(a, 1, n).expect("same length")
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// `x` where `x >= 0`, `slope * x` elsewhere; `slope` is a 1x1 node.
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let s = shape(&self.nodes[slope.0].value);
        if s != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "prelu",
                lhs: shape(&self.nodes[x.0].value),
                rhs: s,
            });
        }
        let a = self.nodes[slope.0].value[[0, 0]];
        let v = self.nodes[x.0]
            .value
            .mapv(|t| if t >= 0.0 { t } else { a * t });
        Ok(self.push(v, Op::Prelu { x, slope }))
    }

    /// Total sum as a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a))
    }

    /// Sum along each row, giving a column `rows x 1`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumRows(a))
    }

    /// Sum down each column, giving a row `1 x cols`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumCols(a))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let src = &self.nodes[x.0].value;
        if start >= end || end > src.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_rows",
                lhs: shape(src),
                rhs: (start, end),
            });
        }
        let v = src.slice(s![start..end, ..]).to_owned();
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    /// Square diagonal matrix from a `d x 1` column.
    pub fn diag_embed(&mut self, a: NodeId) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if src.ncols() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "diag_embed",
                lhs: shape(src),
                rhs: (src.nrows(), 1),
            });
        }
        let d = src.nrows();
        let mut v = Array2::zeros((d, d));
        for i in 0..d {
            v[[i, i]] = src[[i, 0]];
        }
        Ok(self.push(v, Op::DiagEmbed(a)))
    }

    /// Applies the orthogonal product `H_1 H_2 ... H_k` to `x`, where row `j`
    /// of `vs` defines `H_j = I - 2 v vᵀ / (vᵀv)`.
    pub fn householder(&mut self, vs: NodeId, x: NodeId) -> Result<NodeId> {
        let (vv, xv) = (&self.nodes[vs.0].value, &self.nodes[x.0].value);
        if vv.ncols() != xv.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "householder",
                lhs: shape(vv),
                rhs: shape(xv),
            });
        }
        let k = vv.nrows();
        let keep = self.nodes[vs.0].requires_grad || self.nodes[x.0].requires_grad;
        let mut cur = xv.clone();
        let mut stash = vec![Array2::zeros((0, 0)); if keep { k } else { 0 }];
        for j in (0..k).rev() {
            let v = vv.row(j);
            let norm2 = v.dot(&v);
            let w = v.dot(&cur); // 1 x n
            let next = &cur - &(outer(v, &w) * (2.0 / norm2));
            let prev = std::mem::replace(&mut cur, next);
            if keep {
                stash[j] = prev;
            }
        }
        Ok(self.push(cur, Op::Householder { vs, x, stash }))
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every node that depends on a variable,
    /// adding into the stored gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let s = shape(&self.nodes[loss.0].value);
        if s != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(s));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; n];
        adj[loss.0] = Some(Array2::ones((1, 1)));

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => *acc += &g,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let mut send = |id: NodeId, delta: Array2<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(standard(delta)),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    send(*a, g.dot(&self.nodes[b.0].value.t()));
                }
                if needs(b) {
                    send(*b, self.nodes[a.0].value.t().dot(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    send(*a, g * &self.nodes[b.0].value);
                }
                if needs(b) {
                    send(*b, g * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, c) => send(*a, g * *c),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    if needs(p) {
                        send(*p, g.slice(s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.nodes[a.0].value.dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                send(*a, Array2::from_shape_vec((r, c), flat).expect("same length"));
            }
            Op::Transpose(a) => send(*a, g.t().to_owned()),
            Op::Tanh(a) => {
                let y = &node.value;
                #[cfg(test)]
                if FAULTY_TANH_ADJOINT.with(|f| f.get()) {
                    send(*a, g * &y.mapv(|t| 1.0 + t * t));
                    return;
                }
                send(*a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::Exp(a) => send(*a, g * &node.value),
            Op::Ln(a) => send(*a, g / &self.nodes[a.0].value),
            Op::Prelu { x, slope } => {
                let xv = &self.nodes[x.0].value;
                let a = self.nodes[slope.0].value[[0, 0]];
                if needs(x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(xv, |d, &t| {
                        if t < 0.0 {
                            *d *= a
                        }
                    });
                    send(*x, dx);
                }
                if needs(slope) {
                    let ds: f64 = g
                        .iter()
                        .zip(xv.iter())
                        .filter(|(_, &t)| t < 0.0)
                        .map(|(d, t)| d * t)
                        .sum();
                    send(*slope, Array2::from_elem((1, 1), ds));
                }
            }
            Op::Sum(a) => {
                let dim = self.nodes[a.0].value.dim();
                send(*a, Array2::from_elem(dim, g[[0, 0]]));
            }
            Op::SumRows(a) => {
                let dim = self.nodes[a.0].value.dim();
                let col = g.column(0);
                send(*a, Array2::from_shape_fn(dim, |(r, _)| col[r]));
            }
            Op::SumCols(a) => {
                let dim = self.nodes[a.0].value.dim();
                let row = g.row(0);
                send(*a, Array2::from_shape_fn(dim, |(_, c)| row[c]));
            }
            Op::SliceRows { x, start } => {
                let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                send(*x, dx);
            }
            Op::DiagEmbed(a) => {
                let d = g.nrows();
                send(*a, Array2::from_shape_fn((d, 1), |(r, _)| g[[r, r]]));
            }
            Op::Householder { vs, x, stash } => {
                let vv = &self.nodes[vs.0].value;
                let mut gcur = g.clone();
                let mut dv = Array2::zeros(vv.dim());
                for (j, xin) in stash.iter().enumerate() {
                    let v = vv.row(j);
                    let norm2 = v.dot(&v);
                    let w = v.dot(xin); // vᵀX
                    let gtv = gcur.t().dot(&v); // Gᵀv
                    if needs(vs) {
                        // -(2/s)(G wᵀ + X Gᵀv) + (4/s²)(vᵀ G wᵀ) v
                        let g_w = gcur.dot(&w);
                        let x_gtv = xin.dot(&gtv);
                        let vgw = v.dot(&g_w);
                        let mut row = dv.row_mut(j);
                        for r in 0..row.len() {
                            row[r] = -(2.0 / norm2) * (g_w[r] + x_gtv[r])
                                + (4.0 / (norm2 * norm2)) * vgw * v[r];
                        }
                    }
                    // H is symmetric: adjoint of X_j is H_j G.
                    gcur = &gcur - &(outer(v, &gtv) * (2.0 / norm2));
                }
                if needs(vs) {
                    send(*vs, dv);
                }
                if needs(x) {
                    send(*x, gcur);
                }
            }
        }
    }

    /// Creates one variable per stored parameter, in name order.
    pub fn bind(&mut self, store: &ParamStore) -> Binding {
        let ids = store
            .iter()
            .map(|(name, value)| (name.to_string(), self.variable(value.clone())))
            .collect();
        Binding { ids }
    }

    /// Like [`Graph::bind`] but as constants, for forward-only evaluation.
    pub fn bind_frozen(&mut self, store: &ParamStore) -> Binding {
        let ids = store
            .iter()
            .map(|(name, value)| (name.to_string(), self.constant(value.clone())))
            .collect();
        Binding { ids }
    }

    /// Signs of every PReLU input in the graph, in node order. A change in this
    /// signature between two evaluations means a kink was crossed.
    pub fn prelu_signature(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Prelu { x, .. } => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.iter().map(|&t| t < 0.0))
            .collect()
    }
}

fn outer(col: ndarray::ArrayView1<f64>, row: &ndarray::Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((col.len(), row.len()), |(i, j)| col[i] * row[j])
}

/// Row-major copy if `a` is not already row-major, so flat indices are logical.
fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Named trainable matrices, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.params
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }
}

/// Parameter name to graph node, produced by [`Graph::bind`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))
    }

    /// Gradients of every bound parameter; zeros for parameters the loss
    /// does not reach.
    pub fn grads(&self, graph: &Graph) -> BTreeMap<String, Array2<f64>> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let g = graph
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(graph.value(id).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a PReLU kink.
    pub skipped: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// The error per coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F, E>(
    store: &ParamStore,
    f: F,
    h: f64,
    tol: f64,
) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph, &Binding) -> std::result::Result<NodeId, E>,
    E: From<AutodiffError>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut g = Graph::new();
    let b = g.bind(store);
    let loss = f(&mut g, &b)?;
    g.backward(loss)?;
    let analytic = b.grads(&g);

    let eval = |s: &ParamStore| -> std::result::Result<(f64, Vec<bool>), E> {
        let mut g = Graph::new();
        let b = g.bind(s);
        let l = f(&mut g, &b)?;
        Ok((g.scalar(l), g.prelu_signature()))
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let n = store.get(&name)?.len();
        for idx in 0..n {
            let orig = *store.get(&name)?.iter().nth(idx).expect("in range");
            set_flat(&mut work, &name, idx, orig + h);
            let (fp, sp) = eval(&work)?;
            set_flat(&mut work, &name, idx, orig - h);
            let (fm, sm) = eval(&work)?;
            set_flat(&mut work, &name, idx, orig);
            if sp != sm {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = *analytic[&name].iter().nth(idx).expect("in range");
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.checked += 1;
            if err > report.max_rel_err || err.is_nan() {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    report.passed = report.max_rel_err <= tol && !report.max_rel_err.is_nan();
    Ok(report)
}

fn set_flat(store: &mut ParamStore, name: &str, idx: usize, value: f64) {
    let p = store.get_mut(name).expect("known parameter");
    *p.iter_mut().nth(idx).expect("in range") = value;
}
