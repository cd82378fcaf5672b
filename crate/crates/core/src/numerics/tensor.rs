//! Dense row-major `f64` tensors and named parameter collections.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense n-dimensional value. Scalars use an empty shape.
///
/// `data.len()` always equals the product of `shape`; `grad`, when present,
/// has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {shape:?} (expects {numel})",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Matrix constructor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("from_rows needs at least one row".into()));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), width], data)
    }

    /// Seeded normal initialization with the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        // Box-Muller on the raw uniform stream keeps the output independent
        // of the rand_distr crate's sampler internals.
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            if data.len() < numel {
                data.push(r * theta.sin() * std);
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    /// Column count of a matrix.
    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.cols();
        &self.data[i * w..(i + 1) * w]
    }

    /// Elementwise sum with an identically shaped tensor.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * c).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stack 1-D tensors of equal width into a matrix.
    pub fn stack(rows: &[&Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Dimension("stack needs at least one row".into()));
        }
        let width = rows[0].numel();
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.numel() != width {
                return Err(Error::Dimension("stack width mismatch".into()));
            }
            data.extend_from_slice(r.data());
        }
        Tensor::new(vec![rows.len(), width], data)
    }

    /// Concatenate matrices along rows.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows needs input".into()));
        }
        let width = parts[0].cols();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if !p.is_matrix() || p.cols() != width {
                return Err(Error::Dimension("concat_rows width mismatch".into()));
            }
            data.extend_from_slice(p.data());
            n += p.rows();
        }
        Tensor::new(vec![n, width], data)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Named mapping of trainable tensors with deterministic (lexicographic)
/// iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; `requires_grad` is forced on. Duplicate names are
    /// rejected so checkpoints stay unambiguous.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter {name:?}")));
        }
        tensor.requires_grad = true;
        self.params.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }
}
