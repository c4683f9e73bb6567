use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
///
/// Only learnable tensors carry a gradient. Every operation in
/// [`Tape`](super::Tape) works on rank-2 tensors; a scalar is `[1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TensorRepr", try_from = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// On-disk form: values only, gradients are never stored.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            shape: t.shape,
            values: t.values,
        }
    }
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::new(r.shape, r.values)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                shapes: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                shapes: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    values.len()
                ),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: vec![rows.max(1), cols.max(1)],
            values: vec![0.0; rows.max(1) * cols.max(1)],
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut t = Self::zeros(rows, cols);
        t.values.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            values: vec![value],
            grad: None,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::ShapeMismatch {
                op: "from_rows",
                shapes: "rows differ in length".into(),
            });
        }
        let values = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::matrix(rows.len(), cols, values)
    }

    /// Attaches a zeroed gradient buffer, marking the tensor learnable.
    pub fn learnable(mut self) -> Self {
        self.grad = Some(vec![0.0; self.values.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row count of the rank-2 view.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Column count of the rank-2 view.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    pub fn is_learnable(&self) -> bool {
        self.grad.is_some()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub(crate) fn raw(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            shape,
            values,
            grad: None,
        }
    }
}

/// Named collection of learnable tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<NamedTensor>", try_from = "Vec<NamedTensor>")]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl From<ParamSet> for Vec<NamedTensor> {
    fn from(p: ParamSet) -> Self {
        p.entries
            .into_iter()
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape,
                values: t.values,
            })
            .collect()
    }
}

impl TryFrom<Vec<NamedTensor>> for ParamSet {
    type Error = Error;

    fn try_from(v: Vec<NamedTensor>) -> Result<Self> {
        let mut p = ParamSet::new();
        for n in v {
            p.push(n.name, Tensor::new(n.shape, n.values)?);
        }
        Ok(p)
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    /// Appends a tensor (made learnable) and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let tensor = if tensor.is_learnable() {
            tensor
        } else {
            tensor.learnable()
        };
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.entries[slot].1
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].1
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Largest absolute gradient entry over all tensors.
    pub fn max_abs_grad(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}
