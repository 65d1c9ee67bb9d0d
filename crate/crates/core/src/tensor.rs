//! Dense row-major `f64` tensors and the named parameter store.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
///
/// Tensors that take part in training carry a gradient buffer of the same
/// shape (`requires_grad`). Construction rejects non-finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Attach a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Value and gradient buffers at once, for optimizer updates.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Row and column counts of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        let cols = self.shape[1];
        self.data[r * cols + c]
    }
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors.
///
/// Insertion order is the serialization order and the order in which
/// optimizers walk the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a trainable parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.tensors
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Add a gradient collection into the per-parameter grad buffers.
    /// Frozen parameters (no grad buffer) are skipped.
    pub fn accumulate(&mut self, grads: &Gradients) {
        self.accumulate_scaled(grads, 1.0);
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients, scale: f64) {
        for (id, pg) in grads.iter() {
            let t = &mut self.tensors[id.0];
            let cols = *t.shape.last().unwrap_or(&1);
            let Some(buf) = t.grad.as_mut() else { continue };
            if let Some(dense) = &pg.dense {
                for (b, g) in buf.iter_mut().zip(dense) {
                    *b += scale * g;
                }
            }
            for (&row, vals) in &pg.rows {
                let dst = &mut buf[row * cols..(row + 1) * cols];
                for (b, g) in dst.iter_mut().zip(vals) {
                    *b += scale * g;
                }
            }
        }
    }
}

/// Gradient of one parameter: a dense part and/or a sparse set of rows
/// (embedding lookups only touch the rows they gather).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrad {
    pub dense: Option<Vec<f64>>,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl ParamGrad {
    /// Materialize as a dense buffer of `numel` entries with `cols` per row.
    pub fn to_dense(&self, numel: usize, cols: usize) -> Vec<f64> {
        let mut out = self.dense.clone().unwrap_or_else(|| vec![0.0; numel]);
        for (&row, vals) in &self.rows {
            for (o, v) in out[row * cols..(row + 1) * cols].iter_mut().zip(vals) {
                *o += v;
            }
        }
        out
    }

    fn add_assign(&mut self, other: &ParamGrad) {
        if let Some(d) = &other.dense {
            match self.dense.as_mut() {
                Some(mine) => mine.iter_mut().zip(d).for_each(|(a, b)| *a += b),
                None => self.dense = Some(d.clone()),
            }
        }
        for (&row, vals) in &other.rows {
            match self.rows.get_mut(&row) {
                Some(mine) => mine.iter_mut().zip(vals).for_each(|(a, b)| *a += b),
                None => {
                    self.rows.insert(row, vals.clone());
                }
            }
        }
    }

    fn scale(&mut self, s: f64) {
        if let Some(d) = self.dense.as_mut() {
            d.iter_mut().for_each(|v| *v *= s);
        }
        for vals in self.rows.values_mut() {
            vals.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Parameter gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    per_param: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.per_param.get(&id)
    }

    pub(crate) fn entry(&mut self, id: ParamId) -> &mut ParamGrad {
        self.per_param.entry(id).or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.per_param.iter().map(|(k, v)| (*k, v))
    }

    /// Elementwise sum; reduction order is the caller's responsibility.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (id, pg) in other.iter() {
            self.entry(id).add_assign(pg);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.per_param.values_mut().for_each(|pg| pg.scale(s));
    }

    /// Dense gradient for one parameter, zeros when untouched.
    pub fn dense_for(&self, params: &ParamSet, id: ParamId) -> Vec<f64> {
        let t = params.get(id);
        let cols = *t.shape().last().unwrap_or(&1);
        match self.get(id) {
            Some(pg) => pg.to_dense(t.numel(), cols),
            None => vec![0.0; t.numel()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let t = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap().with_grad();
        assert_eq!(t.grad().unwrap().len(), 6);
    }

    #[test]
    fn accumulate_sparse_rows() {
        let mut ps = ParamSet::new();
        let id = ps.insert("emb", Tensor::zeros(&[3, 2]));
        let mut g = Gradients::new();
        g.entry(id).rows.insert(1, vec![1.0, 2.0]);
        ps.accumulate(&g);
        ps.accumulate(&g);
        assert_eq!(ps.get(id).grad().unwrap(), &[0.0, 0.0, 2.0, 4.0, 0.0, 0.0]);
    }
}
