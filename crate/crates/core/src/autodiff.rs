//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Parameters live in a [`ParamStore`] between steps. Each training step builds
//! a fresh [`Graph`] (the tape), pulls parameters in as leaves, and runs
//! [`Graph::backward`] from a scalar root. The resulting [`Gradients`] are then
//! folded into the store with a per-role multiplier, which is what the game
//! strategies use to flip or mask the gradient of a loss term for one player.
//!
//! Everything is `f64`. Tensors are at most two-dimensional inside the graph;
//! a rank-1 tensor of length `n` is viewed as a `1 x n` row.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied inside [`Graph::ln`].
pub const LOG_EPS: f64 = 1e-12;

/// Norm floor used by [`Graph::normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    pub requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros with positive dims")
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows of the 2-D view.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Columns of the 2-D view.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    /// Adds `scale * g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64], scale: f64) {
        debug_assert_eq!(g.len(), self.values.len());
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += scale * v;
        }
    }
}

/// Which player or sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Encoder(usize),
    Fusion,
    UniHead(usize),
    Recon,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Encoder(m) => write!(f, "encoder-{}", m + 1),
            Role::Fusion => write!(f, "fusion"),
            Role::UniHead(m) => write!(f, "uni-head-{}", m + 1),
            Role::Recon => write!(f, "recon-head"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named set of parameters owned by one role.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub role: Role,
    pub params: Vec<ParamId>,
    /// Multiplier on the optimizer learning rate for this group.
    pub lr_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    roles: Vec<Role>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, tensor: Tensor) -> ParamId {
        let id = ParamId(self.tensors.len());
        self.tensors.push(tensor.trainable());
        self.names.push(name.into());
        self.roles.push(role);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn role(&self, id: ParamId) -> Role {
        self.roles[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// One group per distinct role, in role order. Every parameter appears in
    /// exactly one group.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut by_role: BTreeMap<Role, Vec<ParamId>> = BTreeMap::new();
        for (i, role) in self.roles.iter().enumerate() {
            by_role.entry(*role).or_default().push(ParamId(i));
        }
        by_role
            .into_iter()
            .map(|(role, params)| ParamGroup {
                name: role.to_string(),
                role,
                params,
                lr_scale: 1.0,
            })
            .collect()
    }

    pub fn set_requires_grad(&mut self, role: Role, flag: bool) {
        for (t, r) in self.tensors.iter_mut().zip(&self.roles) {
            if *r == role {
                t.requires_grad = flag;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Folds graph gradients into parameter buffers. `scale` maps a role to
    /// the multiplier for this backward pass; a zero multiplier skips the
    /// parameter entirely.
    pub fn accumulate(&mut self, grads: &Gradients, scale: impl Fn(Role) -> f64) {
        for (id, g) in grads.params() {
            let role = self.roles[id.0];
            let k = scale(role);
            let t = &mut self.tensors[id.0];
            if k != 0.0 && t.requires_grad {
                t.accumulate_grad(g, k);
            }
        }
    }

    /// Flat copy of every parameter value, in id order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| t.values.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Vec<f64>]) {
        for (t, v) in self.tensors.iter_mut().zip(snap) {
            t.values.copy_from_slice(v);
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    PermuteRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    NormalizeRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::SumRows(_) => "sum_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::PermuteRows(..) => "permute_rows",
            Op::PickCols(..) => "pick_cols",
            Op::NormalizeRows(_) => "normalize_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// The tape. Built per step, consumed by [`Graph::backward`], then dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_of: BTreeMap<ParamId, Var>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copies a node out as a tensor (no gradient attached).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if rows * cols != value.len() || rows == 0 || cols == 0 {
            return Err(shape_err(
                "constant",
                format!("{rows}x{cols} vs {} values", value.len()),
            ));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Var {
        self.push(
            t.rows(),
            t.cols(),
            t.values().to_vec(),
            Op::Leaf,
            false,
        )
    }

    /// A differentiable leaf not tied to any stored parameter.
    pub fn variable(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        let v = self.constant(rows, cols, value)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    /// Gradient-stopped copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (r, c, val) = (n.rows, n.cols, n.value.clone());
        self.push(r, c, val, Op::Leaf, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// reuse accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.leaf_of.get(&id) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(
            t.rows(),
            t.cols(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad,
        );
        self.leaf_of.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(shape_err("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; ar * bc];
        for i in 0..ar {
            let orow = &mut out[i * bc..(i + 1) * bc];
            for k in 0..ac {
                let x = av[i * ac + k];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[k * bc..(k + 1) * bc];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(ar, bc, out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let av = &self.nodes[a.0].value;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        let ng = self.ng(a);
        self.push(c, r, out, Op::Transpose(a), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(
                op,
                format!("{}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            ));
        }
        Ok(sa)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(op.name(), a, b)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a + 1 * row` where `row` is `1 x cols` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(row);
        if br != 1 || bc != c {
            return Err(shape_err("add_row", format!("{r}x{c} + {br}x{bc}")));
        }
        let bv = self.nodes[row.0].value.clone();
        let out = self.nodes[a.0]
            .value
            .chunks(c)
            .flat_map(|ch| ch.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow(a, row), ng))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let ng = self.ng(a);
        self.push(r, c, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Natural log of `max(x, LOG_EPS)`; zero gradient where clamped.
    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), |x| x.max(LOG_EPS).ln())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::MeanAll(a), ng)
    }

    /// Per-row sum, `r x c -> r x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0]
            .value
            .chunks(c)
            .map(|ch| ch.iter().sum())
            .collect();
        let ng = self.ng(a);
        self.push(r, 1, out, Op::SumRows(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs".into()));
        };
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if r != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row counts {rows} vs {r}"),
                ));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let n = &self.nodes[p.0];
                out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(shape_err(
                "slice_cols",
                format!("{start}+{len} of {c} columns"),
            ));
        }
        let out = self.nodes[a.0]
            .value
            .chunks(c)
            .flat_map(|ch| ch[start..start + len].to_vec())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(r, len, out, Op::SliceCols(a, start), ng))
    }

    /// Output row `i` is input row `sigma[i]`.
    pub fn permute_rows(&mut self, a: Var, sigma: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        check_permutation(sigma, r)?;
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * c);
        for &s in sigma {
            out.extend_from_slice(&av[s * c..(s + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::PermuteRows(a, sigma.to_vec()), ng))
    }

    /// Picks column `idx[i]` from row `i`, `r x c -> r x 1`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r {
            return Err(shape_err(
                "pick_cols",
                format!("{} indices for {r} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&k| k >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let av = &self.nodes[a.0].value;
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &k)| av[i * c + k])
            .collect();
        let ng = self.ng(a);
        Ok(self.push(r, 1, out, Op::PickCols(a, idx.to_vec()), ng))
    }

    /// Scales each row to unit L2 norm (norm floored at `NORM_EPS`). Rows at
    /// or below the floor pass no gradient.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        let ng = self.ng(a);
        self.push(r, c, out, Op::NormalizeRows(a), ng)
    }

    /// Reverse pass from a `1 x 1` root. Gradients of shared nodes add up.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let (r, c) = self.shape(root);
        if r * c != 1 {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let op_name = node.op.name();
            let send =
                |grads: &mut Vec<Option<Vec<f64>>>, to: Var, contrib: Vec<f64>| -> Result<()> {
                    if !self.nodes[to.0].needs_grad {
                        return Ok(());
                    }
                    if contrib.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFiniteGradient { op: op_name });
                    }
                    match &mut grads[to.0] {
                        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(contrib),
                    }
                    Ok(())
                };
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ar, ac) = self.shape(*a);
                    let bc = cols;
                    if self.ng(*a) {
                        let bv = self.value(*b);
                        let mut da = vec![0.0; ar * ac];
                        for i in 0..ar {
                            let grow = &g[i * bc..(i + 1) * bc];
                            for k in 0..ac {
                                let brow = &bv[k * bc..(k + 1) * bc];
                                da[i * ac + k] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        send(&mut grads, *a, da)?;
                    }
                    if self.ng(*b) {
                        let av = self.value(*a);
                        let mut db = vec![0.0; ac * bc];
                        for i in 0..ar {
                            let grow = &g[i * bc..(i + 1) * bc];
                            for k in 0..ac {
                                let x = av[i * ac + k];
                                if x == 0.0 {
                                    continue;
                                }
                                for (d, y) in db[k * bc..(k + 1) * bc].iter_mut().zip(grow) {
                                    *d += x * y;
                                }
                            }
                        }
                        send(&mut grads, *b, db)?;
                    }
                }
                Op::Transpose(a) => {
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[j * rows + i] = g[i * cols + j];
                        }
                    }
                    send(&mut grads, *a, da)?;
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone())?;
                    send(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, g.clone())?;
                    send(&mut grads, *b, g.iter().map(|x| -x).collect())?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        send(
                            &mut grads,
                            *a,
                            g.iter().zip(bv).map(|(x, y)| x * y).collect(),
                        )?;
                    }
                    if self.ng(*b) {
                        send(
                            &mut grads,
                            *b,
                            g.iter().zip(av).map(|(x, y)| x * y).collect(),
                        )?;
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        let mut db = vec![0.0; cols];
                        for ch in g.chunks(cols) {
                            db.iter_mut().zip(ch).for_each(|(d, x)| *d += x);
                        }
                        send(&mut grads, *b, db)?;
                    }
                    send(&mut grads, *a, g)?;
                }
                Op::Scale(a, k) => send(&mut grads, *a, g.iter().map(|x| k * x).collect())?,
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let d = g
                        .iter()
                        .zip(av)
                        .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                        .collect();
                    send(&mut grads, *a, d)?;
                }
                Op::Tanh(a) => {
                    let d = g
                        .iter()
                        .zip(&node.value)
                        .map(|(x, y)| x * (1.0 - y * y))
                        .collect();
                    send(&mut grads, *a, d)?;
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(&node.value).map(|(x, y)| x * y).collect();
                    send(&mut grads, *a, d)?;
                }
                Op::Ln(a) => {
                    let av = self.value(*a);
                    let d = g
                        .iter()
                        .zip(av)
                        .map(|(x, v)| if *v > LOG_EPS { x / v } else { 0.0 })
                        .collect();
                    send(&mut grads, *a, d)?;
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    send(
                        &mut grads,
                        *a,
                        g.iter().zip(av).map(|(x, v)| 2.0 * v * x).collect(),
                    )?;
                }
                Op::SoftmaxRows(a) => {
                    let mut d = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gy = &g[i * cols..(i + 1) * cols];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[i * cols + j] = y[j] * (gy[j] - dot);
                        }
                    }
                    send(&mut grads, *a, d)?;
                }
                Op::LogSoftmaxRows(a) => {
                    let mut d = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gy = &g[i * cols..(i + 1) * cols];
                        let gs: f64 = gy.iter().sum();
                        for j in 0..cols {
                            d[i * cols + j] = gy[j] - y[j].exp() * gs;
                        }
                    }
                    send(&mut grads, *a, d)?;
                }
                Op::SumAll(a) => {
                    let n = self.value(*a).len();
                    send(&mut grads, *a, vec![g[0]; n])?;
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len();
                    send(&mut grads, *a, vec![g[0] / n as f64; n])?;
                }
                Op::SumRows(a) => {
                    let (_, ac) = self.shape(*a);
                    let d = g.iter().flat_map(|x| std::iter::repeat_n(*x, ac)).collect();
                    send(&mut grads, *a, d)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (_, pc) = self.shape(*p);
                        if self.ng(*p) {
                            let d = g
                                .chunks(cols)
                                .flat_map(|ch| ch[offset..offset + pc].to_vec())
                                .collect();
                            send(&mut grads, *p, d)?;
                        }
                        offset += pc;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.shape(*a);
                    let mut d = vec![0.0; ar * ac];
                    for i in 0..ar {
                        d[i * ac + start..i * ac + start + cols]
                            .copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    send(&mut grads, *a, d)?;
                }
                Op::PermuteRows(a, sigma) => {
                    let mut d = vec![0.0; rows * cols];
                    for (i, &s) in sigma.iter().enumerate() {
                        d[s * cols..(s + 1) * cols].copy_from_slice(&g[i * cols..(i + 1) * cols]);
                    }
                    send(&mut grads, *a, d)?;
                }
                Op::PickCols(a, idx) => {
                    let (_, ac) = self.shape(*a);
                    let mut d = vec![0.0; rows * ac];
                    for (i, &k) in idx.iter().enumerate() {
                        d[i * ac + k] = g[i];
                    }
                    send(&mut grads, *a, d)?;
                }
                Op::NormalizeRows(a) => {
                    let av = self.value(*a);
                    let mut d = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let x = &av[i * cols..(i + 1) * cols];
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gy = &g[i * cols..(i + 1) * cols];
                        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > NORM_EPS {
                            let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                d[i * cols + j] = (gy[j] - y[j] * dot) / norm;
                            }
                        }
                    }
                    send(&mut grads, *a, d)?;
                }
            }
        }

        let mut params = Vec::new();
        for (id, v) in &self.leaf_of {
            if let Some(g) = grads[..].get(v.0).and_then(|g| g.as_ref()) {
                params.push((*id, g.clone()));
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

/// Result of one reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the root with respect to a leaf created by
    /// [`Graph::variable`] or [`Graph::param`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

pub fn check_permutation(sigma: &[usize], len: usize) -> Result<()> {
    if sigma.len() != len {
        return Err(Error::InvalidPermutation {
            len,
            detail: format!("length {}", sigma.len()),
        });
    }
    let mut seen = vec![false; len];
    for &s in sigma {
        if s >= len || seen[s] {
            return Err(Error::InvalidPermutation {
                len,
                detail: format!("entry {s} out of range or repeated"),
            });
        }
        seen[s] = true;
    }
    Ok(())
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

/// Plain SGD with optional momentum and L2 weight decay.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, weight_decay: f64, momentum: f64) -> Self {
        Self {
            lr,
            weight_decay,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter in `groups`, then clears their
    /// gradients. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore, groups: &[ParamGroup]) -> Result<()> {
        for group in groups {
            for &id in &group.params {
                let t = store.get(id);
                if t.requires_grad && t.grad().is_none() {
                    return Err(Error::MissingGradient {
                        name: store.name(id).to_string(),
                    });
                }
            }
        }
        for group in groups {
            let lr = self.lr * group.lr_scale;
            for &id in &group.params {
                let t = store.get_mut(id);
                if !t.requires_grad {
                    continue;
                }
                let g = t.grad.take().expect("checked above");
                if self.momentum != 0.0 {
                    let v = self
                        .velocity
                        .entry(id)
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for ((vi, gi), p) in v.iter_mut().zip(&g).zip(&t.values) {
                        *vi = self.momentum * *vi + gi + self.weight_decay * p;
                    }
                    for (p, vi) in t.values.iter_mut().zip(v.iter()) {
                        *p -= lr * vi;
                    }
                } else {
                    for (p, gi) in t.values.iter_mut().zip(&g) {
                        *p -= lr * (gi + self.weight_decay * *p);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One momentum-free SGD update over `groups`.
pub fn sgd_step(
    store: &mut ParamStore,
    groups: &[ParamGroup],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    Sgd::new(lr, weight_decay, 0.0).step(store, groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_grad() {
        let mut g = Graph::new();
        let x = g.variable(1, 1, vec![3.0]).unwrap();
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut g = Graph::new();
        let x = g.variable(1, 2, vec![0.0, 0.0]).unwrap();
        let ls = g.log_softmax_rows(x);
        let first = g.slice_cols(ls, 0, 1).unwrap();
        let s = g.sum(first);
        let grads = g.backward(s).unwrap();
        let d = grads.wrt(x).unwrap();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.variable(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn nan_gradient_names_op() {
        let mut g = Graph::new();
        let x = g.variable(1, 1, vec![f64::NAN]).unwrap();
        let y = g.square(x);
        match g.backward(y) {
            Err(Error::NonFiniteGradient { op }) => assert_eq!(op, "square"),
            other => panic!("expected NaN error, got {other:?}"),
        }
    }

    #[test]
    fn permute_identity_and_swap() {
        let mut g = Graph::new();
        let x = g.variable(2, 1, vec![1.0, 2.0]).unwrap();
        let id = g.permute_rows(x, &[0, 1]).unwrap();
        assert_eq!(g.value(id), &[1.0, 2.0]);
        let sw = g.permute_rows(x, &[1, 0]).unwrap();
        assert_eq!(g.value(sw), &[2.0, 1.0]);

        let w = g.constant(2, 1, vec![10.0, 20.0]).unwrap();
        let prod = g.mul(sw, w).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        // upstream (10, 20) lands swapped on the leaf
        assert_eq!(grads.wrt(x).unwrap(), &[20.0, 10.0]);
    }

    #[test]
    fn permute_rejects_non_bijection() {
        let mut g = Graph::new();
        let x = g.variable(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(g.permute_rows(x, &[0, 0, 1]).is_err());
        assert!(g.permute_rows(x, &[0, 1]).is_err());
        assert!(g.permute_rows(x, &[0, 1, 3]).is_err());
    }

    #[test]
    fn reuse_doubles_gradient() {
        let mut g = Graph::new();
        let x = g.variable(1, 2, vec![0.3, -1.2]).unwrap();
        let t = g.tanh(x);
        let s1 = g.sum(t);
        let once = g.backward(s1).unwrap().wrt(x).unwrap().to_vec();
        let s2 = g.add(s1, s1).unwrap();
        let twice = g.backward(s2).unwrap().wrt(x).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
    }

    fn one_param_store(v: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Role::Fusion, Tensor::scalar(v));
        (store, id)
    }

    #[test]
    fn sgd_plain_step() {
        let (mut store, id) = one_param_store(1.0);
        store.get_mut(id).accumulate_grad(&[0.5], 1.0);
        {
            let groups = store.groups();
            sgd_step(&mut store, &groups, 0.1, 0.0).unwrap()
        };
        assert!((store.get(id).values()[0] - 0.95).abs() < 1e-15);
        assert!(store.get(id).grad().is_none());
    }

    #[test]
    fn sgd_pure_decay() {
        let (mut store, id) = one_param_store(1.0);
        store.get_mut(id).accumulate_grad(&[0.0], 1.0);
        {
            let groups = store.groups();
            sgd_step(&mut store, &groups, 0.1, 1.0).unwrap()
        };
        assert!((store.get(id).values()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_scaled_group_unchanged() {
        let mut store = ParamStore::new();
        let a = store.add("a", Role::Encoder(0), Tensor::scalar(1.0));
        let b = store.add("b", Role::Encoder(1), Tensor::scalar(2.0));
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let s = g.add(va, vb).unwrap();
        let grads = g.backward(s).unwrap();
        store.accumulate(&grads, |r| if r == Role::Encoder(1) { 0.0 } else { 1.0 });
        store.get_mut(b).accumulate_grad(&[0.0], 1.0);
        {
            let groups = store.groups();
            sgd_step(&mut store, &groups, 0.5, 0.0).unwrap()
        };
        assert_eq!(store.get(a).values()[0], 0.5);
        assert_eq!(store.get(b).values()[0], 2.0);
    }

    #[test]
    fn sgd_missing_grad_errors() {
        let (mut store, _) = one_param_store(1.0);
        assert!(matches!(
            {
                let groups = store.groups();
                sgd_step(&mut store, &groups, 0.1, 0.0)
            },
            Err(Error::MissingGradient { .. })
        ));
    }

    #[test]
    fn groups_partition_params() {
        let mut store = ParamStore::new();
        store.add("e0", Role::Encoder(0), Tensor::scalar(0.0));
        store.add("f", Role::Fusion, Tensor::scalar(0.0));
        store.add("e0b", Role::Encoder(0), Tensor::scalar(0.0));
        let groups = store.groups();
        let mut all: Vec<_> = groups.iter().flat_map(|g| g.params.clone()).collect();
        all.sort();
        assert_eq!(all, vec![ParamId(0), ParamId(1), ParamId(2)]);
        assert_eq!(groups[0].name, "encoder-1");
    }

    #[test]
    fn normalize_zero_row_passes_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("z", Role::Fusion, Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let z = g.param(&store, id);
        let n = g.normalize_rows(z);
        let w = g.constant(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap();
        let p = g.mul(n, w).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        let d = grads.param(id).unwrap();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(d[2] != 0.0);
    }
}
