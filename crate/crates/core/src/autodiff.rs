//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Leaves
//! are either constants or named parameters pulled from a [`ParameterStore`];
//! [`Graph::backward`] accumulates `∂loss/∂θ` into the store, and
//! [`ParameterStore::adam_step`] applies the update. All tensors are 2-D
//! (column vectors are `n × 1`, scalars `1 × 1`).

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

pub type Matrix = DMatrix<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    SumSquares(Var),
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Computation graph. With recording disabled it evaluates the same arithmetic
/// without keeping parent links.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    params: HashMap<String, Var>,
    /// Poisons one primitive's backward rule; used for negative-control tests.
    #[cfg(test)]
    corrupt_sigmoid: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            params: HashMap::new(),
            #[cfg(test)]
            corrupt_sigmoid: false,
        }
    }

    /// Graph that evaluates values only.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.recording && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that takes part in differentiation but is not tied to a store.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to the named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa.1 == sb.0, Argument, "matmul: shapes {sa:?} and {sb:?} do not conform");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(sa == sb, Argument, "{name}: shapes {sa:?} and {sb:?} differ");
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).component_mul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a + 1 ⊗ row`: adds a `1 × k` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        ensure!(
            sr.0 == 1 && sr.1 == sa.1,
            Argument,
            "add_row: cannot broadcast {sr:?} over {sa:?}"
        );
        let mut value = self.value(a).clone();
        let r = self.value(row);
        for (j, mut col) in value.column_iter_mut().enumerate() {
            col.add_scalar_mut(r[(0, j)]);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Concatenates along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Argument, "concat: no operands");
        let rows = self.shape(parts[0]).0;
        ensure!(
            parts.iter().all(|p| self.shape(*p).0 == rows),
            Argument,
            "concat: operands have differing row counts {:?}",
            parts.iter().map(|p| self.shape(*p)).collect::<Vec<_>>()
        );
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut at = 0;
        for p in parts {
            let v = self.value(*p);
            value.columns_mut(at, v.ncols()).copy_from(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        ensure!(
            start + len <= sa.1 && len > 0,
            Argument,
            "slice: columns {start}..{} out of range for {sa:?}",
            start + len
        );
        let value = self.value(a).columns(start, len).into_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Column-major reinterpretation as `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let sa = self.shape(a);
        ensure!(
            sa.0 * sa.1 == rows * cols,
            Argument,
            "reshape: cannot view {sa:?} as ({rows}, {cols})"
        );
        let value = Matrix::from_column_slice(rows, cols, self.value(a).as_slice());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::from_element(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::from_element(1, 1, self.value(a).norm_squared());
        let rg = self.rg(a);
        self.push(value, Op::SumSquares(a), rg)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let value = Matrix::from_element(1, 1, (self.value(a) - self.value(b)).norm_squared() / n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    /// Smallest `|x|` over all recorded ReLU inputs. Finite differences with a
    /// step well below this value never straddle a kink.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Relu(a) => Some(self.value(a).iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Back-propagates from a scalar and adds `∂loss/∂θ` into `store`.
    ///
    /// Every parameter in the store ends up with a gradient; those not reached
    /// from `loss` get zeros.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, var) in &self.params {
            if let Some(g) = &grads[var.0] {
                store.accumulate(name, g)?;
            }
        }
        store.fill_missing_grads();
        Ok(())
    }

    /// Gradient of `loss` with respect to every node (None where unreachable).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Matrix>>> {
        ensure!(
            self.shape(loss) == (1, 1),
            Argument,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::from_element(1, 1, 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        let send = |v: Var, delta: Matrix, grads: &mut [Option<Matrix>]| {
            if !self.rg(v) {
                return;
            }
            if v.0 >= id {
                // Parents always precede children.
                unreachable!("graph cycle");
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g * self.value(*b).transpose(), grads);
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).tr_mul(g), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                send(*b, -g, grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.component_mul(self.value(*b)), grads);
                }
                if self.rg(*b) {
                    send(*b, g.component_mul(self.value(*a)), grads);
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone(), grads);
                if self.rg(*row) {
                    let sums = Matrix::from_fn(1, g.ncols(), |_, j| g.column(j).sum());
                    send(*row, sums, grads);
                }
            }
            Op::Scale(a, s) => send(*a, g * *s, grads),
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        send(*p, g.columns(at, w).into_owned(), grads);
                    }
                    at += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut full = Matrix::zeros(r, c);
                full.columns_mut(*start, g.ncols()).copy_from(g);
                send(*a, full, grads);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Matrix::from_column_slice(r, c, g.as_slice()), grads);
            }
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                send(*a, d, grads);
            }
            Op::Sigmoid(a) => {
                #[cfg(test)]
                let k = if self.corrupt_sigmoid { 1.5 } else { 1.0 };
                #[cfg(not(test))]
                let k = 1.0;
                let d = g.zip_map(&node.value, |g, y| k * g * y * (1.0 - y));
                send(*a, d, grads);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |g, y| g * (1.0 - y * y));
                send(*a, d, grads);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send(*a, Matrix::from_element(r, c, g[(0, 0)]), grads);
            }
            Op::SumSquares(a) => send(*a, self.value(*a) * (2.0 * g[(0, 0)]), grads),
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let d = (self.value(*a) - self.value(*b)) * (2.0 * g[(0, 0)] / n);
                if self.rg(*b) {
                    send(*b, -&d, grads);
                }
                send(*a, d, grads);
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Option<Matrix>,
    /// Adam first moment.
    pub m: Matrix,
    /// Adam second moment.
    pub v: Matrix,
    pub steps: u64,
}

/// Named trainable tensors with their optimizer state, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> Result<()> {
        ensure!(!self.index.contains_key(name), Argument, "parameter `{name}` registered twice");
        let (r, c) = shape(&value);
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            steps: 0,
        });
        Ok(())
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shape `fan_in × fan_out`.
    pub fn insert_glorot<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..=limit));
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.insert(name, Matrix::zeros(rows, cols))
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).and_then(|&i| self.params[i].grad.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Scalar count over parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    fn accumulate(&mut self, name: &str, g: &Matrix) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        let p = &mut self.params[i];
        ensure!(
            shape(g) == shape(&p.value),
            State,
            "gradient shape {:?} does not match parameter `{name}` {:?}",
            shape(g),
            shape(&p.value)
        );
        match &mut p.grad {
            Some(acc) => *acc += g,
            None => p.grad = Some(g.clone()),
        }
        Ok(())
    }

    fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Matrix::zeros(p.value.nrows(), p.value.ncols()));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Multiplies every stored gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                *g *= s;
            }
        }
    }

    /// Bias-corrected Adam update; clears the gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        ensure!(cfg.lr > 0.0, Argument, "learning rate must be positive");
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::State(format!("parameter `{}` has no gradient", p.name)));
        }
        for p in &mut self.params {
            let g = p.grad.take().expect("checked above");
            p.steps += 1;
            let t = p.steps as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            p.m.zip_apply(&g, |m, g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            p.v.zip_apply(&g, |v, g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let step = p.m.zip_map(&p.v, |m, v| cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps));
            p.value -= step;
        }
        Ok(())
    }

    /// Values only, without optimizer state.
    pub fn values_only(&self) -> ParameterStore {
        let mut out = ParameterStore::new();
        for p in &self.params {
            out.insert(&p.name, p.value.clone()).expect("names are unique");
        }
        out
    }

    /// Copies values (not optimizer state) from `other` for every shared name.
    pub fn load_values(&mut self, other: &ParameterStore) -> Result<()> {
        for p in &mut self.params {
            let v = other
                .get(&p.name)
                .ok_or_else(|| Error::Validation(format!("missing parameter `{}`", p.name)))?;
            ensure!(
                shape(v) == shape(&p.value),
                Validation,
                "parameter `{}` has shape {:?}, expected {:?}",
                p.name,
                shape(v),
                shape(&p.value)
            );
            p.value.copy_from(v);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Relative errors use `max(|a|, |b|, GRAD_CHECK_FLOOR)` as the denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares reverse-mode gradients of `f` with central differences at
/// `h = step`. Entries where `(f(x+h) − f(x−h)) / 2h` misses the tolerance are
/// re-estimated with the fourth-order stencil
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
pub fn gradient_check<F>(store: &ParameterStore, tol: f64, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    ensure!(tol > 0.0 && step > 0.0, Argument, "tolerance and step must be positive");
    let mut analytic_store = store.values_only();
    let mut g = Graph::new();
    let loss = f(&mut g, &analytic_store)?;
    ensure!(g.scalar(loss).is_finite(), Evaluation, "loss is {}", g.scalar(loss));
    g.backward(loss, &mut analytic_store)?;

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::no_grad();
        let loss = f(&mut g, s)?;
        let v = g.scalar(loss);
        ensure!(v.is_finite(), Evaluation, "loss is {v}");
        Ok(v)
    };

    let mut probe = store.values_only();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        passed: true,
    };
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in &names {
        let grad = analytic_store.grad(name).expect("filled by backward").clone();
        let len = grad.len();
        for k in 0..len {
            let orig = probe.get(name).expect("present")[k];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(name).expect("present")[k] = x;
                eval(&probe)
            };
            let a = grad[k];
            let rel = |b: f64| (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR);
            let near = at(orig + step)? - at(orig - step)?;
            let mut numeric = near / (2.0 * step);
            let mut err = rel(numeric);
            if err >= tol {
                let far = at(orig + 2.0 * step)? - at(orig - 2.0 * step)?;
                numeric = (8.0 * near - far) / (12.0 * step);
                err = rel(numeric);
            }
            probe.get_mut(name).expect("present")[k] = orig;
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
