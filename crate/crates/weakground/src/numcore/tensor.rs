//! Row-major f64 tensor and the named parameter store.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{NumError, NumResult};

/// Dense row-major tensor of 64-bit floats.
///
/// Shapes are arbitrary-rank, but the ops in this crate only ever build
/// scalars (`[1]`), vectors (`[n]`), and matrices (`[r, c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> NumResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(NumError::DataLength {
                shape,
                expected,
                got: values.len(),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    /// Builds an `[r, c]` matrix from `r * c` row-major values.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> NumResult<Self> {
        Tensor::new(vec![rows, cols], values)
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> NumResult<f64> {
        if self.is_scalar() {
            Ok(self.values[0])
        } else {
            Err(NumError::contract(
                "item",
                format!("expected scalar, got shape {:?}", self.shape),
            ))
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix (contract: 2-D).
    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    /// Column count of a matrix (contract: 2-D).
    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Adds `other` elementwise into `self` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor) -> NumResult<()> {
        if self.shape != other.shape {
            return Err(NumError::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }
}

/// Named parameters plus matching gradient accumulators.
///
/// Iteration order is the sorted parameter name order, which keeps optimizer
/// updates and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> NumResult<()> {
        if self.params.contains_key(name) {
            return Err(NumError::DuplicateParam(name.to_string()));
        }
        self.grads
            .insert(name.to_string(), Tensor::zeros(tensor.shape().to_vec()));
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> NumResult<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> NumResult<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> NumResult<&Tensor> {
        self.grads
            .get(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> NumResult<()> {
        let g = self
            .grads
            .get_mut(name)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))?;
        g.add_assign(delta)
    }

    /// Resets every gradient accumulator to exact zero.
    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.values_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Iterates `(name, param, grad)` in sorted name order.
    pub fn iter_with_grads(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.params
            .iter()
            .map(move |(n, p)| (n.as_str(), p, &self.grads[n]))
    }

    /// Applies `f(param_values, grad_values)` per parameter in sorted order.
    pub fn update_each(&mut self, mut f: impl FnMut(&str, &mut [f64], &[f64])) {
        for (name, p) in self.params.iter_mut() {
            let g = &self.grads[name];
            f(name, p.values_mut(), g.values());
        }
    }

    /// Snapshot of all gradients keyed by parameter name.
    pub fn grads_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.grads.clone()
    }

    /// SHA-256 digest over names, shapes, and little-endian value bytes.
    ///
    /// Two stores digest equal iff they hold bit-identical parameters, which
    /// is what determinism and supervision-firewall checks compare.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.values() {
                h.update(v.to_le_bytes());
            }
        }
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for byte in out {
            s.push_str(&format!("{byte:02x}"));
        }
        s
    }
}
