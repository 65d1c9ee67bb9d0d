//! Reverse-mode automatic differentiation over a per-example tape.
//!
//! A [`Tape`] borrows the model's [`ParamSet`] read-only and records every
//! operation in execution order, so the node list is already topologically
//! sorted. [`Tape::backward`] walks it once in reverse and returns the
//! parameter gradients; the caller folds them into the parameter store.
//! Tapes are cheap and are rebuilt for every sentence.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, ParamSet, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate backward-rule corruption, used to prove the gradient checker
/// can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// tanh backward uses `1 - y` instead of `1 - y^2`.
    TanhBackward,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh-backward" => Ok(Fault::TanhBackward),
            other => Err(Error::Config(format!("unknown fault {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Elementwise, Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSumExp { input: Var, axis: usize },
    MaxRows { input: Var, argmax: Vec<usize> },
    Sum(Var),
    Select { input: Var, index: Vec<usize> },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { input: Var, start: usize },
    SliceRows { input: Var, start: usize },
    Unfold { input: Var, k: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of every recorded node, indexed by [`Var`].
pub struct NodeGrads(Vec<Option<Vec<f64>>>);

impl NodeGrads {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn two_d(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Contract(format!(
            "{op} expects a matrix, got shape {shape:?}"
        ))),
    }
}

/// Treat a vector `[c]` as a single row `[1, c]`.
fn as_rows(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match *shape {
        [c] => Ok((1, c)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::Contract(format!(
            "{op} expects a vector or matrix, got shape {shape:?}"
        ))),
    }
}

/// Max-shifted log-sum-exp of a slice. Exact for a single element.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    if xs.len() == 1 {
        return xs[0];
    }
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Accumulation buffer of an input node, allocated on first use. `None`
/// when no gradient flows into that node.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copy a node's value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, what: &str) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(i) = value.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{what} produced {} at index {i}",
                value[i]
            )));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(id) | Op::Gather { param: id, .. } => self.params.get(*id).requires_grad(),
            _ => self.inputs_need_grad(&op),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_need_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf | Op::Param(_) | Op::Gather { .. } => false,
            Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::AddRow(a, b) | Op::AddCol(a, b) => {
                ng(a) || ng(b)
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Reshape(a) => ng(a),
            Op::LogSumExp { input, .. }
            | Op::MaxRows { input, .. }
            | Op::Select { input, .. }
            | Op::SliceCols { input, .. }
            | Op::SliceRows { input, .. }
            | Op::Unfold { input, .. } => ng(input),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(ng),
        }
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let node = Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            needs_grad: false,
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted (readable through [`NodeGrads`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Whole parameter tensor.
    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id);
        let (shape, value) = (t.shape().to_vec(), t.data().to_vec());
        self.push(shape, value, Op::Param(id), "param")
            .expect("parameters are finite")
    }

    /// Rows of a 2-D parameter (embedding lookup). Output `[rows.len(), cols]`.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let t = self.params.get(id);
        let (n, cols) = t.dims2()?;
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Vocabulary(format!(
                    "index {r} out of range for {} with {n} rows",
                    self.params.name(id)
                )));
            }
            value.extend_from_slice(t.row(r));
        }
        self.push(
            vec![rows.len(), cols],
            value,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
            "gather",
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = two_d(&sa, "matmul")?;
        let (k2, n) = two_d(&sb, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], value, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = two_d(self.shape(a), "transpose")?;
        let value = transpose_raw(self.value(a), r, c);
        self.push(vec![c, r], value, Op::Transpose(a), "transpose")
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("elementwise", self.shape(a), self.shape(b)));
        }
        let f: fn(f64, f64) -> f64 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
        };
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Binary(op, a, b), "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, s), "scale")
    }

    /// `m[i, j] + row[j]` for every row `i`.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let (r, c) = as_rows(&sm, "add_row")?;
        if self.value(row).len() != c {
            return Err(Error::dim("add_row", &sm, self.shape(row)));
        }
        let rv = self.value(row);
        let mut value = self.value(m).to_vec();
        for i in 0..r {
            for (o, b) in value[i * c..(i + 1) * c].iter_mut().zip(rv) {
                *o += b;
            }
        }
        self.push(sm, value, Op::AddRow(m, row), "add_row")
    }

    /// `m[i, j] + col[i]` for every column `j`.
    pub fn add_col(&mut self, m: Var, col: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let (r, c) = two_d(&sm, "add_col")?;
        if self.value(col).len() != r {
            return Err(Error::dim("add_col", &sm, self.shape(col)));
        }
        let cv = self.value(col);
        let mut value = self.value(m).to_vec();
        for i in 0..r {
            for o in &mut value[i * c..(i + 1) * c] {
                *o += cv[i];
            }
        }
        self.push(sm, value, Op::AddCol(m, col), "add_col")
    }

    /// `x @ w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        self.add_row(y, b)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Tanh(a), "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Sigmoid(a), "sigmoid")
    }

    /// Log-sum-exp along `axis`. A vector reduces to a scalar (`axis` 0);
    /// a matrix reduces over rows (`axis` 0, output `[cols]`) or over
    /// columns (`axis` 1, output `[rows]`).
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let x = self.value(a);
        let (out_shape, value) = match (shape.as_slice(), axis) {
            ([n], 0) => {
                if *n == 0 {
                    return Err(Error::Domain("logsumexp over an empty axis".into()));
                }
                (vec![], vec![logsumexp_slice(x)])
            }
            ([r, c], 0) => {
                if *r == 0 {
                    return Err(Error::Domain("logsumexp over an empty axis".into()));
                }
                let mut col = vec![0.0; *r];
                let value = (0..*c)
                    .map(|j| {
                        for i in 0..*r {
                            col[i] = x[i * c + j];
                        }
                        logsumexp_slice(&col)
                    })
                    .collect();
                (vec![*c], value)
            }
            ([r, c], 1) => {
                if *c == 0 {
                    return Err(Error::Domain("logsumexp over an empty axis".into()));
                }
                let value = (0..*r)
                    .map(|i| logsumexp_slice(&x[i * c..(i + 1) * c]))
                    .collect();
                (vec![*r], value)
            }
            _ => {
                return Err(Error::Contract(format!(
                    "logsumexp axis {axis} invalid for shape {shape:?}"
                )))
            }
        };
        self.push(
            out_shape,
            value,
            Op::LogSumExp { input: a, axis },
            "logsumexp",
        )
    }

    /// Columnwise maximum of `[p, f]`, output `[f]`. Ties go to the lowest row.
    pub fn max_over_rows(&mut self, a: Var) -> Result<(Var, Vec<usize>)> {
        let (p, f) = two_d(self.shape(a), "max_over_rows")?;
        if p == 0 {
            return Err(Error::Domain("max_over_rows on zero rows".into()));
        }
        let x = self.value(a);
        let mut argmax = vec![0usize; f];
        let mut value = x[..f].to_vec();
        for i in 1..p {
            for j in 0..f {
                let v = x[i * f + j];
                if v > value[j] {
                    value[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let var = self.push(
            vec![f],
            value,
            Op::MaxRows {
                input: a,
                argmax: argmax.clone(),
            },
            "max_over_rows",
        )?;
        Ok((var, argmax))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), "sum")
    }

    /// Gather flat (row-major) positions of `a` into a vector.
    pub fn select(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Contract(format!(
                "select index {bad} out of range for {} elements",
                x.len()
            )));
        }
        let value = index.iter().map(|&i| x[i]).collect();
        self.push(
            vec![index.len()],
            value,
            Op::Select {
                input: a,
                index: index.to_vec(),
            },
            "select",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        self.push(shape.to_vec(), value, Op::Reshape(a), "reshape")
    }

    /// Horizontal concatenation of matrices with equal row counts.
    /// Vectors count as single rows.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&v| as_rows(self.shape(v), "concat_cols"))
            .collect::<Result<Vec<_>>>()?;
        let Some(&(rows, _)) = dims.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        if let Some(i) = dims.iter().position(|d| d.0 != rows) {
            return Err(Error::dim(
                "concat_cols",
                self.shape(parts[0]),
                self.shape(parts[i]),
            ));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &(_, c)) in parts.iter().zip(&dims) {
                value.extend_from_slice(&self.value(v)[r * c..(r + 1) * c]);
            }
        }
        let shape = if rows == 1 && parts.iter().all(|&v| self.shape(v).len() == 1) {
            vec![total]
        } else {
            vec![rows, total]
        };
        self.push(shape, value, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Vertical concatenation. Vectors count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&v| as_rows(self.shape(v), "concat_rows"))
            .collect::<Result<Vec<_>>>()?;
        let Some(&(_, cols)) = dims.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        if let Some(i) = dims.iter().position(|d| d.1 != cols) {
            return Err(Error::dim(
                "concat_rows",
                self.shape(parts[0]),
                self.shape(parts[i]),
            ));
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for &v in parts {
            value.extend_from_slice(self.value(v));
        }
        self.push(
            vec![rows, cols],
            value,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (r, c) = as_rows(&sa, "slice_cols")?;
        if start + width > c {
            return Err(Error::dim("slice_cols", &sa, &[start, width]));
        }
        let x = self.value(a);
        let mut value = Vec::with_capacity(r * width);
        for i in 0..r {
            value.extend_from_slice(&x[i * c + start..i * c + start + width]);
        }
        let shape = if sa.len() == 1 {
            vec![width]
        } else {
            vec![r, width]
        };
        self.push(
            shape,
            value,
            Op::SliceCols { input: a, start },
            "slice_cols",
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (r, c) = two_d(&sa, "slice_rows")?;
        if start + count > r {
            return Err(Error::dim("slice_rows", &sa, &[start, count]));
        }
        let value = self.value(a)[start * c..(start + count) * c].to_vec();
        self.push(
            vec![count, c],
            value,
            Op::SliceRows { input: a, start },
            "slice_rows",
        )
    }

    /// Sliding windows of `k` consecutive rows, each flattened into one row:
    /// `[L, d]` becomes `[L - k + 1, k * d]`.
    pub fn unfold(&mut self, a: Var, k: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let (l, d) = two_d(&sa, "unfold")?;
        if k == 0 || k > l {
            return Err(Error::Domain(format!("unfold window {k} over {l} rows")));
        }
        let windows = l - k + 1;
        let x = self.value(a);
        let mut value = Vec::with_capacity(windows * k * d);
        for i in 0..windows {
            value.extend_from_slice(&x[i * d..(i + k) * d]);
        }
        self.push(
            vec![windows, k * d],
            value,
            Op::Unfold { input: a, k },
            "unfold",
        )
    }

    /// Parameter gradients of a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_nodes(loss).map(|(g, _)| g)
    }

    /// Parameter gradients plus the gradient of every recorded node.
    pub fn backward_with_nodes(&self, loss: Var) -> Result<(Gradients, NodeGrads)> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out = Gradients::new();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut out);
            grads[idx] = Some(g);
        }
        Ok((out, NodeGrads(grads)))
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let pg = out.entry(*id);
                match pg.dense.as_mut() {
                    Some(d) => d.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => pg.dense = Some(g.to_vec()),
                }
            }
            Op::Gather { param, rows } => {
                let cols = node.shape[1];
                let pg = out.entry(*param);
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g[i * cols..(i + 1) * cols];
                    let dst = pg.rows.entry(r).or_insert_with(|| vec![0.0; cols]);
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = G · B^T
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            ga[i * k + p] += s;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    // dB = A^T · G
                    for i in 0..m {
                        for p in 0..k {
                            let av = av[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                match kind {
                    Elementwise::Add | Elementwise::Sub => {
                        if let Some(ga) = slot(nodes, grads, *a) {
                            ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                        let sign = if *kind == Elementwise::Add { 1.0 } else { -1.0 };
                        if let Some(gb) = slot(nodes, grads, *b) {
                            gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                        }
                    }
                    Elementwise::Mul => {
                        if let Some(ga) = slot(nodes, grads, *a) {
                            for i in 0..g.len() {
                                ga[i] += g[i] * bv[i];
                            }
                        }
                        if let Some(gb) = slot(nodes, grads, *b) {
                            for i in 0..g.len() {
                                gb[i] += g[i] * av[i];
                            }
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddRow(m, row) => {
                let c = nodes[row.0].value.len();
                if let Some(gm) = slot(nodes, grads, *m) {
                    gm.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = slot(nodes, grads, *row) {
                    for (i, y) in g.iter().enumerate() {
                        gr[i % c] += y;
                    }
                }
            }
            Op::AddCol(m, col) => {
                let c = node.shape[1];
                if let Some(gm) = slot(nodes, grads, *m) {
                    gm.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gc) = slot(nodes, grads, *col) {
                    for (i, y) in g.iter().enumerate() {
                        gc[i / c] += y;
                    }
                }
            }
            Op::Tanh(a) => {
                let fault = self.fault == Some(Fault::TanhBackward);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, y) in node.value.iter().enumerate() {
                        let local = if fault { 1.0 - y } else { 1.0 - y * y };
                        ga[i] += g[i] * local;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, y) in node.value.iter().enumerate() {
                        ga[i] += g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::LogSumExp { input, axis } => {
                let x = &nodes[input.0].value;
                let shape = &nodes[input.0].shape;
                let lse = &node.value;
                if let Some(ga) = slot(nodes, grads, *input) {
                    match (shape.len(), axis) {
                        (1, _) => {
                            for (i, xi) in x.iter().enumerate() {
                                ga[i] += g[0] * (xi - lse[0]).exp();
                            }
                        }
                        (_, 0) => {
                            let c = shape[1];
                            for (i, xi) in x.iter().enumerate() {
                                let j = i % c;
                                ga[i] += g[j] * (xi - lse[j]).exp();
                            }
                        }
                        _ => {
                            let c = shape[1];
                            for (i, xi) in x.iter().enumerate() {
                                let r = i / c;
                                ga[i] += g[r] * (xi - lse[r]).exp();
                            }
                        }
                    }
                }
            }
            Op::MaxRows { input, argmax } => {
                let f = argmax.len();
                if let Some(ga) = slot(nodes, grads, *input) {
                    for (j, &r) in argmax.iter().enumerate() {
                        ga[r * f + j] += g[j];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Select { input, index } => {
                if let Some(ga) = slot(nodes, grads, *input) {
                    for (k, &i) in index.iter().enumerate() {
                        ga[i] += g[k];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatCols(parts) => {
                let total = *node.shape.last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let c = *nodes[p.0].shape.last().unwrap();
                    if let Some(gp) = slot(nodes, grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot(nodes, grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { input, start } => {
                let c = *nodes[input.0].shape.last().unwrap();
                let w = *node.shape.last().unwrap();
                if let Some(ga) = slot(nodes, grads, *input) {
                    for (r, chunk) in g.chunks(w).enumerate() {
                        ga[r * c + start..r * c + start + w]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceRows { input, start } => {
                let c = node.shape[1];
                if let Some(ga) = slot(nodes, grads, *input) {
                    ga[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Unfold { input, k } => {
                let d = nodes[input.0].shape[1];
                let width = k * d;
                if let Some(ga) = slot(nodes, grads, *input) {
                    for (i, window) in g.chunks(width).enumerate() {
                        ga[i * d..i * d + width]
                            .iter_mut()
                            .zip(window)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty() -> ParamSet {
        ParamSet::new()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let i = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = t.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 4.0]);

        let a = t.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let d = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(d), &[1, 1]);
        assert_eq!(t.value(d), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn elementwise_basics() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let z = t.constant(Tensor::scalar(0.0).unwrap());
        let th = t.tanh(z).unwrap();
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.scalar(th), 0.0);
        assert_eq!(t.scalar(sg), 0.5);
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s), &[4.0, 6.0]);
        let c = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(t.add(a, c), Err(Error::Dimension { .. })));
    }

    #[test]
    fn logsumexp_cases() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let one = t.constant(Tensor::vector(vec![5.0]).unwrap());
        let v = t.logsumexp(one, 0).unwrap();
        assert_eq!(t.scalar(v), 5.0);

        let zeros = t.constant(Tensor::vector(vec![0.0; 4]).unwrap());
        let v = t.logsumexp(zeros, 0).unwrap();
        assert!((t.scalar(v) - 1.3862943611198906).abs() < 1e-12);

        let big = t.constant(Tensor::vector(vec![1000.0, 1000.0]).unwrap());
        let v = t.logsumexp(big, 0).unwrap();
        assert!((t.scalar(v) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);

        let huge = t.constant(Tensor::vector(vec![1e6, -1e6, 1e6]).unwrap());
        let v = t.logsumexp(huge, 0).unwrap();
        assert!(t.scalar(v).is_finite());

        let empty = t.constant(Tensor::vector(vec![]).unwrap());
        assert!(matches!(t.logsumexp(empty, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn logsumexp_matrix_axes() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let m = t.constant(Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let r = t.logsumexp(m, 1).unwrap();
        assert_eq!(t.shape(r), &[2]);
        assert!((t.value(r)[0] - logsumexp_slice(&[0.0, 1.0, 2.0])).abs() < 1e-15);
        let c = t.logsumexp(m, 0).unwrap();
        assert_eq!(t.shape(c), &[3]);
        assert!((t.value(c)[2] - logsumexp_slice(&[2.0, 5.0])).abs() < 1e-15);
    }

    #[test]
    fn max_over_rows_cases() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let m = t.input(Tensor::matrix(2, 2, vec![1.0, 9.0, 3.0, 2.0]).unwrap());
        let (mx, arg) = t.max_over_rows(m).unwrap();
        assert_eq!(t.value(mx), &[3.0, 9.0]);
        assert_eq!(arg, vec![1, 0]);

        let row = t.constant(Tensor::matrix(1, 3, vec![4.0, -1.0, 2.0]).unwrap());
        let (mx1, _) = t.max_over_rows(row).unwrap();
        assert_eq!(t.value(mx1), &[4.0, -1.0, 2.0]);

        let s = t.sum(mx).unwrap();
        let (_, ng) = t.backward_with_nodes(s).unwrap();
        assert_eq!(ng.of(m).unwrap(), &[0.0, 1.0, 1.0, 0.0]);

        let none = t.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(t.max_over_rows(none), Err(Error::Domain(_))));
    }

    #[test]
    fn max_ties_route_to_lowest_row() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let m = t.input(Tensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).unwrap());
        let (mx, arg) = t.max_over_rows(m).unwrap();
        assert_eq!(arg, vec![0]);
        let s = t.sum(mx).unwrap();
        let (_, ng) = t.backward_with_nodes(s).unwrap();
        assert_eq!(ng.of(m).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut ps = ParamSet::new();
        let w = ps.insert("w", Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap());
        let t = {
            let mut t = Tape::new(&ps);
            let wv = t.param(w);
            let s = t.sum(wv).unwrap();
            t.backward(s).unwrap()
        };
        assert_eq!(t.dense_for(&ps, w), vec![1.0, 1.0, 1.0]);

        let g = {
            let mut t = Tape::new(&ps);
            let wv = t.param(w);
            let sq = t.mul(wv, wv).unwrap();
            let s = t.sum(sq).unwrap();
            t.backward(s).unwrap()
        };
        assert_eq!(g.dense_for(&ps, w), vec![1.0, -2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut ps = ParamSet::new();
        let w = ps.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        for _ in 0..2 {
            let g = {
                let mut t = Tape::new(&ps);
                let wv = t.param(w);
                let s = t.sum(wv).unwrap();
                t.backward(s).unwrap()
            };
            ps.accumulate(&g);
        }
        assert_eq!(ps.get(w).grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let v = t.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn gather_out_of_range() {
        let mut ps = ParamSet::new();
        let e = ps.insert("emb", Tensor::zeros(&[3, 2]));
        let mut t = Tape::new(&ps);
        assert!(matches!(t.gather(e, &[3]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn unfold_windows() {
        let ps = empty();
        let mut t = Tape::new(&ps);
        let x = t.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let u = t.unfold(x, 2).unwrap();
        assert_eq!(t.shape(u), &[2, 4]);
        assert_eq!(t.value(u), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
