//! Tape-based reverse-mode differentiation over dense float64 matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Param(String),
    ParamRows(String, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    SqDist(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    LayerNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward sweep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    params: BTreeMap<String, Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    /// Zero gradients for every named parameter of `params`.
    pub fn zeros_for<'a>(params: &ParameterSet, names: impl IntoIterator<Item = &'a String>) -> Result<Self> {
        let mut out = Gradients::default();
        for name in names {
            let t = params.get(name)?;
            out.params.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        Ok(out)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.params {
            match self.params.get_mut(name) {
                Some(existing) => existing.add_assign(g),
                None => {
                    self.params.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            g.scale_assign(factor);
        }
    }

    pub fn retain_prefixes(&mut self, prefixes: &[String]) {
        self.params.retain(|k, _| prefixes.iter().any(|p| k.starts_with(p.as_str())));
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.params.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }
}

/// Recording tape bound to one parameter snapshot.
pub struct Graph<'p> {
    params: &'p ParameterSet,
    frozen: Vec<String>,
    nodes: Vec<Node>,
    param_nodes: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Graph {
            params,
            frozen: Vec::new(),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Parameters whose path starts with any of `prefixes` enter the tape as
    /// constants and never receive gradients.
    pub fn with_frozen(params: &'p ParameterSet, prefixes: &[&str]) -> Self {
        let mut g = Graph::new(params);
        g.frozen = prefixes.iter().map(|s| s.to_string()).collect();
        g
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    fn push(&mut self, value: Tensor, op: Op, primitive: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { primitive });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Differentiable leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, "input")
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Constant, "constant")
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(name) {
            return Ok(v);
        }
        let value = self.params.get(name)?.clone();
        let op = if self.is_frozen(name) {
            Op::Constant
        } else {
            Op::Param(name.to_string())
        };
        let v = self.push(value, op, "param")?;
        self.param_nodes.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gathers rows of a parameter table without materialising the table.
    pub fn param_rows(&mut self, name: &str, rows: &[usize]) -> Result<Var> {
        let table = self.params.get(name)?;
        let cols = table.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::dim(format!(
                    "row {r} out of range for `{name}` with {} rows",
                    table.rows()
                )));
            }
            data.extend_from_slice(table.row_slice(r));
        }
        if rows.is_empty() {
            return Err(Error::EmptyInput(format!("gather from `{name}` with no rows")));
        }
        let value = Tensor::matrix(rows.len(), cols, data)?;
        let op = if self.is_frozen(name) {
            Op::Constant
        } else {
            Op::ParamRows(name.to_string(), rows.to_vec())
        };
        self.push(value, op, "param_rows")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul ({m}x{k}) x ({k2}x{n})")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (n, k2) = self.shape2(b);
        if k != k2 {
            return Err(Error::dim(format!("matmul_t ({m}x{k}) x ({n}x{k2})^T")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &bv[j * k..(j + 1) * k];
                out[i * n + j] = dot(ar, br);
            }
        }
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), "matmul")
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "mul {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), "scale")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyInput("concat_cols of nothing".into()));
        };
        let rows = self.shape2(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape2(p);
            if r != rows {
                return Err(Error::dim(format!("concat_cols row mismatch {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec()), "concat")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::EmptyInput("concat_rows of nothing".into()));
        };
        let cols = self.shape2(first).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.shape2(p);
            if c != cols {
                return Err(Error::dim(format!("concat_rows column mismatch {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), "concat")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.shape2(a);
        if width == 0 || start + width > cols {
            return Err(Error::dim(format!("slice [{start}, {}) of {cols} columns", start + width)));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&v.row_slice(r)[start..start + width]);
        }
        self.push(Tensor::matrix(rows, width, data)?, Op::SliceCols(a, start), "slice")
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.shape2(a);
        if rows.is_empty() {
            return Err(Error::EmptyInput("select_rows with no rows".into()));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::dim(format!("row {r} of {n}")));
            }
            data.extend_from_slice(v.row_slice(r));
        }
        self.push(Tensor::matrix(rows.len(), cols, data)?, Op::SelectRows(a, rows.to_vec()), "select")
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.select_rows(a, &[r])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape2(a);
        let v = self.value(a).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = v[i * n + j];
            }
        }
        self.push(Tensor::matrix(n, m, data)?, Op::Transpose(a), "transpose")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        self.push(out, Op::Softmax(a), "softmax")
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.push(out, Op::LogSoftmax(a), "log_softmax")
    }

    /// Sum of all entries as a `1 x 1` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::row(vec![s]), Op::Sum(a), "sum")
    }

    /// Squared Euclidean distance between equally shaped tensors.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != self.value(b).numel() {
            return Err(Error::dim(format!(
                "sq_dist {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::row(vec![s]), Op::SqDist(a, b), "squared_l2")
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape2(logits);
        if targets.len() != rows {
            return Err(Error::dim(format!("{} targets for {rows} rows", targets.len())));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::dim(format!("class {t} of {cols}")));
            }
            let row = v.row_slice(r);
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::row(vec![total / rows as f64]);
        self.push(value, Op::CrossEntropy(logits, targets.to_vec()), "cross_entropy")
    }

    /// Row-wise standardisation (zero mean, unit variance), no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        self.push(out, Op::LayerNorm(a), "layer_norm")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        Tensor::new(v.shape().to_vec(), data).expect("same shape")
    }

    fn broadcast_binary(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.numel() == bv.numel() && av.cols() == bv.cols() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(av.shape().to_vec(), data);
        }
        if bv.rows() == 1 && bv.cols() == av.cols() {
            let cols = av.cols();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % cols]))
                .collect();
            return Tensor::new(av.shape().to_vec(), data);
        }
        Err(Error::dim(format!("{what} {:?} vs {:?}", av.shape(), bv.shape())))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Input => {
                    out.inputs.insert(Var(idx), Tensor::new(y.shape().to_vec(), dy)?);
                }
                Op::Param(name) => {
                    let g = Tensor::new(y.shape().to_vec(), dy)?;
                    match out.params.get_mut(name) {
                        Some(existing) => existing.add_assign(&g),
                        None => {
                            out.params.insert(name.clone(), g);
                        }
                    }
                }
                Op::ParamRows(name, rows) => {
                    let table = self.params.get(name)?;
                    let entry = out
                        .params
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(table.shape()));
                    let cols = table.cols();
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = entry.row_slice_mut(r);
                        for (d, s) in dst.iter_mut().zip(&dy[i * cols..(i + 1) * cols]) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape2(*a);
                    let n = self.shape2(*b).1;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    // dA = dY B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = dot(&dy[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                    // dB = A^T dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, g) in row.iter_mut().zip(&dy[i * n..(i + 1) * n]) {
                                *d += aip * g;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.shape2(*a);
                    let n = self.shape2(*b).0;
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    // dA = dY B, dB = dY^T A
                    let da = matmul_raw(&dy, bv, m, n, k);
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            let row = &mut db[j * k..(j + 1) * k];
                            for (d, x) in row.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                *d += g * x;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let bv = self.value(*b);
                    let db = if bv.numel() == dy.len() {
                        dy.iter().map(|g| sign * g).collect()
                    } else {
                        let cols = bv.cols();
                        let mut s = vec![0.0; cols];
                        for (i, g) in dy.iter().enumerate() {
                            s[i % cols] += sign * g;
                        }
                        s
                    };
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da = dy.iter().zip(bv).map(|(g, x)| g * x).collect();
                    let db = dy.iter().zip(av).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, f) => {
                    let da = dy.iter().map(|g| g * f).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let rows = y.rows();
                    let total = y.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape2(p).1;
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&dy[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        accumulate(&mut grads, p, dy[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape2(*a);
                    let w = y.cols();
                    let mut da = vec![0.0; rows * cols];
                    for r in 0..rows {
                        da[r * cols + start..r * cols + start + w].copy_from_slice(&dy[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::SelectRows(a, rows) => {
                    let (n, cols) = self.shape2(*a);
                    let mut da = vec![0.0; n * cols];
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            da[r * cols + c] += dy[i * cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Transpose(a) => {
                    let (m, n) = self.shape2(*a);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = dy[j * m + i];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    let da = dy.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = dy.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = dy.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    let da = dy.iter().zip(x).map(|(g, v)| g / v).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = dy.iter().zip(y.data()).map(|(g, e)| g * e).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    let cols = y.cols();
                    let mut da = vec![0.0; dy.len()];
                    for r in 0..y.rows() {
                        let s = &y.data()[r * cols..(r + 1) * cols];
                        let g = &dy[r * cols..(r + 1) * cols];
                        let inner = dot(s, g);
                        for c in 0..cols {
                            da[r * cols + c] = s[c] * (g[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmax(a) => {
                    let cols = y.cols();
                    let mut da = vec![0.0; dy.len()];
                    for r in 0..y.rows() {
                        let ls = &y.data()[r * cols..(r + 1) * cols];
                        let g = &dy[r * cols..(r + 1) * cols];
                        let total: f64 = g.iter().sum();
                        for c in 0..cols {
                            da[r * cols + c] = g[c] - ls[c].exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads, *a, vec![dy[0]; n]);
                }
                Op::SqDist(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da: Vec<f64> = av.iter().zip(bv).map(|(x, z)| 2.0 * (x - z) * dy[0]).collect();
                    let db = da.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::CrossEntropy(logits, targets) => {
                    let v = self.value(*logits);
                    let cols = v.cols();
                    let rows = v.rows();
                    let mut da = v.data().to_vec();
                    for r in 0..rows {
                        let row = &mut da[r * cols..(r + 1) * cols];
                        softmax_in_place(row);
                        row[targets[r]] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= dy[0] / rows as f64);
                    }
                    accumulate(&mut grads, *logits, da);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let cols = x.cols();
                    let mut da = vec![0.0; dy.len()];
                    for r in 0..x.rows() {
                        let xr = x.row_slice(r);
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let yr = y.row_slice(r);
                        let g = &dy[r * cols..(r + 1) * cols];
                        let mean_g = g.iter().sum::<f64>() / cols as f64;
                        let mean_gy = dot(g, yr) / cols as f64;
                        for c in 0..cols {
                            da[r * cols + c] = inv * (g[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, x) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * x;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    xs.iter_mut().for_each(|x| *x /= total);
}

/// Softmax of a plain slice.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}
