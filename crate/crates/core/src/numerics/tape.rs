//! Define-by-run reverse-mode gradient tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes and
//! return lightweight [`Value`] handles; [`Tape::backward`] walks the nodes in
//! reverse creation order (which is already a topological order) and
//! accumulates gradients. Constants and everything derived only from
//! constants carry no backward closures, so frozen subgraphs cost nothing at
//! backward time and provably receive no gradient.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParameterSet, Tensor};

/// Additive offset inside logarithms; prevents -inf on exact zeros without
/// visibly biasing losses at desk scale.
pub const LOG_EPS: f64 = 1e-12;

/// Guard threshold under which an L2 normalization is refused.
pub const NORM_GUARD: f64 = 1e-12;

/// Layer-normalization variance offset.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

type Grads = Vec<Option<Vec<f64>>>;
type GradFn = Box<dyn Fn(&[f64], &mut Grads)>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

fn slot<'a>(grads: &'a mut Grads, id: usize, len: usize) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

// Raw matrix kernels. `a` is m×k throughout; the suffix says which operands
// are transposed.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a[m×k] · b[n×k]ᵀ -> m×n
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for t in 0..k {
                s += arow[t] * brow[t];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// a[k×m]ᵀ · b[k×n] -> m×n
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Value>,
    grads: Grads,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, grad_fn: Option<GradFn>) -> Value {
        let needs_grad = grad_fn.is_some();
        self.nodes.push(Node {
            shape,
            data,
            grad_fn,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, v: Value) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Value) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone())
            .expect("tape nodes are internally consistent")
    }

    fn numel(&self, v: Value) -> usize {
        self.nodes[v.0].data.len()
    }

    fn rows(&self, v: Value) -> usize {
        self.nodes[v.0].shape[0]
    }

    fn cols(&self, v: Value) -> usize {
        self.nodes[v.0].shape[1]
    }

    fn is_matrix(&self, v: Value) -> bool {
        self.nodes[v.0].shape.len() == 2
    }

    fn is_vector(&self, v: Value) -> bool {
        self.nodes[v.0].shape.len() == 1
    }

    fn is_scalar(&self, v: Value) -> bool {
        self.nodes[v.0].data.len() == 1 && self.nodes[v.0].shape.len() <= 1
    }

    /// Number of distinct trainable parameters registered on this tape.
    pub fn trainable_param_count(&self) -> usize {
        self.params.len()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Insert a non-trainable value. Frozen weights and data enter here.
    pub fn constant(&mut self, t: &Tensor) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec(), None)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Value {
        self.push(vec![], vec![x], None)
    }

    /// Insert (or fetch, when already inserted) a trainable leaf for the
    /// named parameter. Repeated calls with one name share a single node, so
    /// gradient contributions from every use site accumulate together.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Value> {
        if let Some(&v) = self.params.get(name) {
            if self.nodes[v.0].shape != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name:?} re-registered with shape {:?} (tape has {:?})",
                    t.shape(),
                    self.nodes[v.0].shape
                )));
            }
            return Ok(v);
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), None);
        self.nodes[v.0].needs_grad = true;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Register every tensor of a [`ParameterSet`] on the tape.
    pub fn params(&mut self, set: &ParameterSet) -> Result<BTreeMap<String, Value>> {
        let mut out = BTreeMap::new();
        for (name, t) in set.iter() {
            out.insert(name.clone(), self.param(name, t)?);
        }
        Ok(out)
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (na, nb) = (self.needs(a), self.needs(b));
        let len = data.len();
        let grad_fn: Option<GradFn> = if na || nb {
            Some(Box::new(move |g, grads| {
                if na {
                    let s = slot(grads, a.0, len);
                    for (d, gi) in s.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if nb {
                    let s = slot(grads, b.0, len);
                    for (d, gi) in s.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), data, grad_fn))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a).to_vec();
        let bv = self.value(b).to_vec();
        let data: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();
        let (na, nb) = (self.needs(a), self.needs(b));
        let len = data.len();
        let grad_fn: Option<GradFn> = if na || nb {
            Some(Box::new(move |g, grads| {
                if na {
                    let s = slot(grads, a.0, len);
                    for i in 0..len {
                        s[i] += g[i] * bv[i];
                    }
                }
                if nb {
                    let s = slot(grads, b.0, len);
                    for i in 0..len {
                        s[i] += g[i] * av[i];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), data, grad_fn))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Value {
        let data: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let na = self.needs(a);
        let len = data.len();
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, len);
                for i in 0..len {
                    s[i] += g[i] * c;
                }
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), data, grad_fn)
    }

    /// Multiply every element of `a` by a scalar-valued node.
    pub fn scalar_mul(&mut self, s: Value, a: Value) -> Result<Value> {
        if !self.is_scalar(s) {
            return Err(Error::Dimension("scalar_mul needs a scalar".into()));
        }
        let sv = self.value(s)[0];
        let av = self.value(a).to_vec();
        let data: Vec<f64> = av.iter().map(|x| x * sv).collect();
        let (ns, na) = (self.needs(s), self.needs(a));
        let len = data.len();
        let grad_fn: Option<GradFn> = if ns || na {
            Some(Box::new(move |g, grads| {
                if ns {
                    let acc: f64 = g.iter().zip(&av).map(|(gi, ai)| gi * ai).sum();
                    slot(grads, s.0, 1)[0] += acc;
                }
                if na {
                    let sl = slot(grads, a.0, len);
                    for i in 0..len {
                        sl[i] += g[i] * sv;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(self.nodes[a.0].shape.clone(), data, grad_fn))
    }

    pub fn exp(&mut self, a: Value) -> Value {
        let data: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        let na = self.needs(a);
        let out = data.clone();
        let len = data.len();
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, len);
                for i in 0..len {
                    s[i] += g[i] * out[i];
                }
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), data, grad_fn)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Value) -> Value {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let av = self.value(a).to_vec();
        let data: Vec<f64> = av
            .iter()
            .map(|&x| {
                let u = C * (x + K * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let na = self.needs(a);
        let len = data.len();
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, len);
                for i in 0..len {
                    let x = av[i];
                    let u = C * (x + K * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * K * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    s[i] += g[i] * d;
                }
            }))
        } else {
            None
        };
        self.push(self.nodes[a.0].shape.clone(), data, grad_fn)
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let total: f64 = self.value(a).iter().sum();
        let na = self.needs(a);
        let len = self.numel(a);
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, len);
                for d in s.iter_mut() {
                    *d += g[0];
                }
            }))
        } else {
            None
        };
        self.push(vec![], vec![total], grad_fn)
    }

    pub fn dot(&mut self, a: Value, b: Value) -> Result<Value> {
        if !self.is_vector(a) || !self.is_vector(b) || self.numel(a) != self.numel(b) {
            return Err(Error::Dimension(format!(
                "dot needs equal-length vectors, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = self.value(a).to_vec();
        let bv = self.value(b).to_vec();
        let total: f64 = av.iter().zip(&bv).map(|(x, y)| x * y).sum();
        let (na, nb) = (self.needs(a), self.needs(b));
        let len = av.len();
        let grad_fn: Option<GradFn> = if na || nb {
            Some(Box::new(move |g, grads| {
                if na {
                    let s = slot(grads, a.0, len);
                    for i in 0..len {
                        s[i] += g[0] * bv[i];
                    }
                }
                if nb {
                    let s = slot(grads, b.0, len);
                    for i in 0..len {
                        s[i] += g[0] * av[i];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![], vec![total], grad_fn))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape(a)
            )));
        }
        let na = self.needs(a);
        let len = numel;
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, len);
                for i in 0..len {
                    s[i] += g[i];
                }
            }))
        } else {
            None
        };
        let data = self.value(a).to_vec();
        Ok(self.push(shape, data, grad_fn))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        if !self.is_matrix(a) {
            return Err(Error::Dimension("transpose needs a matrix".into()));
        }
        let (m, n) = (self.rows(a), self.cols(a));
        let av = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        let na = self.needs(a);
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, m * n);
                for i in 0..m {
                    for j in 0..n {
                        s[i * n + j] += g[j * m + i];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![n, m], data, grad_fn))
    }

    pub fn slice_rows(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        if !self.is_matrix(a) || start > end || end > self.rows(a) {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{end} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        let w = self.cols(a);
        let data = self.value(a)[start * w..end * w].to_vec();
        let na = self.needs(a);
        let total = self.numel(a);
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, total);
                for (i, gi) in g.iter().enumerate() {
                    s[start * w + i] += gi;
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![end - start, w], data, grad_fn))
    }

    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        if !self.is_matrix(a) || start > end || end > self.cols(a) {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{end} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        let (m, w) = (self.rows(a), self.cols(a));
        let nw = end - start;
        let av = self.value(a);
        let mut data = vec![0.0; m * nw];
        for i in 0..m {
            data[i * nw..(i + 1) * nw].copy_from_slice(&av[i * w + start..i * w + end]);
        }
        let na = self.needs(a);
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, m * w);
                for i in 0..m {
                    for j in 0..nw {
                        s[i * w + start + j] += g[i * nw + j];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, nw], data, grad_fn))
    }

    /// Extract row `i` of a matrix as a 1-D vector.
    pub fn row(&mut self, a: Value, i: usize) -> Result<Value> {
        if !self.is_matrix(a) || i >= self.rows(a) {
            return Err(Error::Dimension(format!(
                "row {i} out of range for shape {:?}",
                self.shape(a)
            )));
        }
        let w = self.cols(a);
        let data = self.value(a)[i * w..(i + 1) * w].to_vec();
        let na = self.needs(a);
        let total = self.numel(a);
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, total);
                for (j, gj) in g.iter().enumerate() {
                    s[i * w + j] += gj;
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![w], data, grad_fn))
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows needs at least one part".into()));
        }
        let w = if self.is_matrix(parts[0]) {
            self.cols(parts[0])
        } else {
            return Err(Error::Dimension("concat_rows needs matrices".into()));
        };
        let mut data = Vec::new();
        let mut meta = Vec::new(); // (id, rows, needs)
        let mut n = 0;
        for &p in parts {
            if !self.is_matrix(p) || self.cols(p) != w {
                return Err(Error::Dimension(format!(
                    "concat_rows width mismatch: {:?} (expects width {w})",
                    self.shape(p)
                )));
            }
            data.extend_from_slice(self.value(p));
            meta.push((p.0, self.rows(p), self.needs(p)));
            n += self.rows(p);
        }
        let any = meta.iter().any(|&(_, _, nd)| nd);
        let grad_fn: Option<GradFn> = if any {
            Some(Box::new(move |g, grads| {
                let mut offset = 0;
                for &(id, rows, nd) in &meta {
                    let len = rows * w;
                    if nd {
                        let s = slot(grads, id, len);
                        for i in 0..len {
                            s[i] += g[offset + i];
                        }
                    }
                    offset += len;
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![n, w], data, grad_fn))
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols needs at least one part".into()));
        }
        let m = self.rows(parts[0]);
        let mut widths = Vec::new();
        let mut total_w = 0;
        for &p in parts {
            if !self.is_matrix(p) || self.rows(p) != m {
                return Err(Error::Dimension("concat_cols row mismatch".into()));
            }
            widths.push((p.0, self.cols(p), self.needs(p)));
            total_w += self.cols(p);
        }
        let mut data = vec![0.0; m * total_w];
        let mut offset = 0;
        for &p in parts {
            let w = self.cols(p);
            let pv = self.value(p);
            for i in 0..m {
                data[i * total_w + offset..i * total_w + offset + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let any = widths.iter().any(|&(_, _, nd)| nd);
        let grad_fn: Option<GradFn> = if any {
            Some(Box::new(move |g, grads| {
                let mut offset = 0;
                for &(id, w, nd) in &widths {
                    if nd {
                        let s = slot(grads, id, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                s[i * w + j] += g[i * total_w + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, total_w], data, grad_fn))
    }

    /// Stack 1-D vectors of equal width into a matrix.
    pub fn stack_rows(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack_rows needs at least one part".into()));
        }
        let w = self.numel(parts[0]);
        let mut data = Vec::with_capacity(parts.len() * w);
        let mut meta = Vec::new();
        for &p in parts {
            if !self.is_vector(p) || self.numel(p) != w {
                return Err(Error::Dimension("stack_rows width mismatch".into()));
            }
            data.extend_from_slice(self.value(p));
            meta.push((p.0, self.needs(p)));
        }
        let any = meta.iter().any(|&(_, nd)| nd);
        let grad_fn: Option<GradFn> = if any {
            Some(Box::new(move |g, grads| {
                for (i, &(id, nd)) in meta.iter().enumerate() {
                    if nd {
                        let s = slot(grads, id, w);
                        for j in 0..w {
                            s[j] += g[i * w + j];
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![parts.len(), w], data, grad_fn))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        if !self.is_matrix(a) || !self.is_matrix(b) || self.cols(a) != self.rows(b) {
            return Err(Error::Dimension(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (m, k, n) = (self.rows(a), self.cols(a), self.cols(b));
        let av = self.value(a).to_vec();
        let bv = self.value(b).to_vec();
        let data = mm_nn(&av, &bv, m, k, n);
        let (na, nb) = (self.needs(a), self.needs(b));
        let grad_fn: Option<GradFn> = if na || nb {
            Some(Box::new(move |g, grads| {
                if na {
                    let da = mm_nt(g, &bv, m, n, k);
                    let s = slot(grads, a.0, m * k);
                    for i in 0..m * k {
                        s[i] += da[i];
                    }
                }
                if nb {
                    let db = mm_tn(&av, g, k, m, n);
                    let s = slot(grads, b.0, k * n);
                    for i in 0..k * n {
                        s[i] += db[i];
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, n], data, grad_fn))
    }

    /// Add a 1-D bias row to every row of a matrix.
    pub fn add_row_broadcast(&mut self, mat: Value, bias: Value) -> Result<Value> {
        if !self.is_matrix(mat) || !self.is_vector(bias) || self.cols(mat) != self.numel(bias) {
            return Err(Error::Dimension(format!(
                "add_row_broadcast shape mismatch: {:?} + {:?}",
                self.shape(mat),
                self.shape(bias)
            )));
        }
        let (m, w) = (self.rows(mat), self.cols(mat));
        let bv = self.value(bias).to_vec();
        let data: Vec<f64> = self
            .value(mat)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % w])
            .collect();
        let (nm, nb) = (self.needs(mat), self.needs(bias));
        let grad_fn: Option<GradFn> = if nm || nb {
            Some(Box::new(move |g, grads| {
                if nm {
                    let s = slot(grads, mat.0, m * w);
                    for i in 0..m * w {
                        s[i] += g[i];
                    }
                }
                if nb {
                    let s = slot(grads, bias.0, w);
                    for i in 0..m {
                        for j in 0..w {
                            s[j] += g[i * w + j];
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, w], data, grad_fn))
    }

    pub fn mean_rows(&mut self, a: Value) -> Result<Value> {
        if !self.is_matrix(a) {
            return Err(Error::Dimension("mean_rows needs a matrix".into()));
        }
        let (m, w) = (self.rows(a), self.cols(a));
        let av = self.value(a);
        let mut data = vec![0.0; w];
        for i in 0..m {
            for j in 0..w {
                data[j] += av[i * w + j];
            }
        }
        for d in data.iter_mut() {
            *d /= m as f64;
        }
        let na = self.needs(a);
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, a.0, m * w);
                let inv = 1.0 / m as f64;
                for i in 0..m {
                    for j in 0..w {
                        s[i * w + j] += g[j] * inv;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![w], data, grad_fn))
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm_rows(&mut self, x: Value, gamma: Value, beta: Value) -> Result<Value> {
        if !self.is_matrix(x) {
            return Err(Error::Dimension("layer_norm_rows needs a matrix".into()));
        }
        let (m, w) = (self.rows(x), self.cols(x));
        if self.numel(gamma) != w || self.numel(beta) != w {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias width {} / {} does not match {w}",
                self.numel(gamma),
                self.numel(beta)
            )));
        }
        let xv = self.value(x).to_vec();
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut data = vec![0.0; m * w];
        let mut xhat = vec![0.0; m * w];
        let mut inv_sigma = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * w..(i + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_sigma[i] = inv;
            for j in 0..w {
                let xh = (row[j] - mean) * inv;
                xhat[i * w + j] = xh;
                data[i * w + j] = gv[j] * xh + bv[j];
            }
        }
        let (nx, ng, nb) = (self.needs(x), self.needs(gamma), self.needs(beta));
        let grad_fn: Option<GradFn> = if nx || ng || nb {
            Some(Box::new(move |g, grads| {
                if ng {
                    let s = slot(grads, gamma.0, w);
                    for i in 0..m {
                        for j in 0..w {
                            s[j] += g[i * w + j] * xhat[i * w + j];
                        }
                    }
                }
                if nb {
                    let s = slot(grads, beta.0, w);
                    for i in 0..m {
                        for j in 0..w {
                            s[j] += g[i * w + j];
                        }
                    }
                }
                if nx {
                    let s = slot(grads, x.0, m * w);
                    for i in 0..m {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..w {
                            let dxh = g[i * w + j] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * w + j];
                        }
                        mean_dxhat /= w as f64;
                        mean_dxhat_xhat /= w as f64;
                        for j in 0..w {
                            let dxh = g[i * w + j] * gv[j];
                            s[i * w + j] += (dxh
                                - mean_dxhat
                                - xhat[i * w + j] * mean_dxhat_xhat)
                                * inv_sigma[i];
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![m, w], data, grad_fn))
    }

    /// Unit-normalize a vector; refuses near-zero norms instead of dividing
    /// by zero.
    pub fn l2_normalize(&mut self, a: Value) -> Result<Value> {
        if !self.is_vector(a) {
            return Err(Error::Dimension("l2_normalize needs a vector".into()));
        }
        let av = self.value(a).to_vec();
        let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < NORM_GUARD {
            return Err(Error::NumericDomain(format!(
                "l2_normalize norm {norm:.3e} below guard {NORM_GUARD:.0e}"
            )));
        }
        let y: Vec<f64> = av.iter().map(|x| x / norm).collect();
        let na = self.needs(a);
        let len = av.len();
        let yc = y.clone();
        let grad_fn: Option<GradFn> = if na {
            Some(Box::new(move |g, grads| {
                let gy: f64 = g.iter().zip(&yc).map(|(gi, yi)| gi * yi).sum();
                let s = slot(grads, a.0, len);
                for i in 0..len {
                    s[i] += (g[i] - gy * yc[i]) / norm;
                }
            }))
        } else {
            None
        };
        Ok(self.push(vec![len], y, grad_fn))
    }

    /// Cosine of the angle between two vectors (composition of normalize and
    /// dot, so it inherits their gradients).
    pub fn cosine_similarity(&mut self, a: Value, b: Value) -> Result<Value> {
        let an = self.l2_normalize(a)?;
        let bn = self.l2_normalize(b)?;
        self.dot(an, bn)
    }

    // ── Softmax family ──────────────────────────────────────────────────

    fn softmax_kernel(&mut self, scores: Value, bias: Option<Value>, scale: f64) -> Value {
        let (m, w) = (self.rows(scores), self.cols(scores));
        let sv = self.value(scores);
        let bv = bias.map(|b| self.value(b).to_vec());
        let mut logits = sv.to_vec();
        if let Some(b) = &bv {
            for i in 0..m * w {
                logits[i] += b[i];
            }
        }
        for l in logits.iter_mut() {
            *l /= scale;
        }
        let mut probs = vec![0.0; m * w];
        for i in 0..m {
            let row = &logits[i * w..(i + 1) * w];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..w {
                let e = (row[j] - max).exp();
                probs[i * w + j] = e;
                z += e;
            }
            for j in 0..w {
                probs[i * w + j] /= z;
            }
        }
        let ns = self.needs(scores);
        let nb = bias.map(|b| self.needs(b)).unwrap_or(false);
        let pc = probs.clone();
        let grad_fn: Option<GradFn> = if ns || nb {
            Some(Box::new(move |g, grads| {
                // dL/dlogit = p .* (g - <g, p>) per row; logit = (s+b)/scale
                let mut dl = vec![0.0; m * w];
                for i in 0..m {
                    let mut gp = 0.0;
                    for j in 0..w {
                        gp += g[i * w + j] * pc[i * w + j];
                    }
                    for j in 0..w {
                        dl[i * w + j] = pc[i * w + j] * (g[i * w + j] - gp) / scale;
                    }
                }
                if ns {
                    let s = slot(grads, scores.0, m * w);
                    for i in 0..m * w {
                        s[i] += dl[i];
                    }
                }
                if nb {
                    let b = bias.expect("nb implies bias present");
                    let s = slot(grads, b.0, m * w);
                    for i in 0..m * w {
                        s[i] += dl[i];
                    }
                }
            }))
        } else {
            None
        };
        self.push(vec![m, w], probs, grad_fn)
    }

    /// Row-wise `softmax((scores + bias) / scale)` over square matrices; the
    /// bias is added before the scale division.
    pub fn softmax_with_bias(&mut self, scores: Value, bias: Value, scale: f64) -> Result<Value> {
        if !self.is_matrix(scores) || self.rows(scores) != self.cols(scores) {
            return Err(Error::Dimension(format!(
                "softmax_with_bias needs a square matrix, got {:?}",
                self.shape(scores)
            )));
        }
        if self.shape(scores) != self.shape(bias) {
            return Err(Error::Dimension(format!(
                "softmax_with_bias shape mismatch: scores {:?} vs bias {:?}",
                self.shape(scores),
                self.shape(bias)
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::NumericDomain(format!(
                "softmax scale must be positive, got {scale}"
            )));
        }
        if self.value(scores).iter().any(|x| !x.is_finite())
            || self.value(bias).iter().any(|x| !x.is_finite())
        {
            return Err(Error::NumericDomain(
                "softmax_with_bias received non-finite input".into(),
            ));
        }
        Ok(self.softmax_kernel(scores, Some(bias), scale))
    }

    /// Row-wise scaled softmax without a bias term (same kernel as
    /// [`Tape::softmax_with_bias`], skipping the add).
    pub fn softmax_rows(&mut self, scores: Value, scale: f64) -> Result<Value> {
        if !self.is_matrix(scores) {
            return Err(Error::Dimension("softmax_rows needs a matrix".into()));
        }
        if !(scale > 0.0) {
            return Err(Error::NumericDomain(format!(
                "softmax scale must be positive, got {scale}"
            )));
        }
        if self.value(scores).iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericDomain(
                "softmax_rows received non-finite input".into(),
            ));
        }
        Ok(self.softmax_kernel(scores, None, scale))
    }

    /// Softmax over a 1-D vector of logits.
    pub fn softmax_vec(&mut self, logits: Value) -> Result<Value> {
        if !self.is_vector(logits) {
            return Err(Error::Dimension("softmax_vec needs a vector".into()));
        }
        let n = self.numel(logits);
        let m = self.reshape(logits, vec![1, n])?;
        let p = self.softmax_rows(m, 1.0)?;
        self.reshape(p, vec![n])
    }

    /// Negative log-likelihood of `label` under a probability vector:
    /// `-ln(probs[label] + 1e-12)`.
    pub fn cross_entropy(&mut self, probs: Value, label: usize) -> Result<Value> {
        if !self.is_vector(probs) {
            return Err(Error::Dimension("cross_entropy needs a vector".into()));
        }
        let n = self.numel(probs);
        if label >= n {
            return Err(Error::Index(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let pv = self.value(probs);
        let total: f64 = pv.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::NumericDomain(format!(
                "cross_entropy input sums to {total}, expected 1"
            )));
        }
        let p = pv[label];
        let out = -(p + LOG_EPS).ln();
        let np = self.needs(probs);
        let grad_fn: Option<GradFn> = if np {
            Some(Box::new(move |g, grads| {
                let s = slot(grads, probs.0, n);
                s[label] += -g[0] / (p + LOG_EPS);
            }))
        } else {
            None
        };
        Ok(self.push(vec![], vec![out], grad_fn))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients for every node that needs
    /// them are retained on the tape until the next backward call.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Grads = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(f) = &self.nodes[id].grad_fn {
                let g = grads[id].take().expect("checked above");
                f(&g, &mut grads);
                grads[id] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. a node, if one reached it.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulate gradients of the last backward pass into the parameter
    /// set's grad buffers. Parameters the loss never reached receive zeros.
    pub fn write_grads(&self, set: &mut ParameterSet) -> Result<()> {
        for (name, &v) in &self.params {
            let tensor = set.get_mut(name).ok_or_else(|| {
                Error::Argument(format!("parameter {name:?} missing from set"))
            })?;
            if tensor.numel() != self.numel(v) {
                return Err(Error::Dimension(format!(
                    "parameter {name:?} size changed between registration and write"
                )));
            }
            let numel = tensor.numel();
            let buf = tensor.grad.get_or_insert_with(|| vec![0.0; numel]);
            if let Some(g) = self.grad(v) {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
        }
        Ok(())
    }
}
