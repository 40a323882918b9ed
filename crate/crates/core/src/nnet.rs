//! Small reverse-mode autodiff over dense 2-D tensors, plus the layers the
//! agent needs: dense, layer norm, multi-head self-attention with a learned
//! summary token, and a normalized-exponential head.
//!
//! A [`Graph`] is a tape. Every operation appends a node holding its value;
//! [`Graph::backward`] walks the tape in reverse. Parameters live in a
//! [`ParamStore`] outside the graph and enter it through [`Graph::param`],
//! so one graph can mix several networks and gradients are returned per
//! store.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NN_MAGIC: &[u8; 4] = b"NN1\0";
const NN_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loss must be a 1x1 tensor, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("empty token set")]
    EmptyInput,
    #[error("bad parameter checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(v: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::row(vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `a (n x k) * b (k x m)`.
fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: n,
        cols: m,
        data: out,
    }
}

/// `a^T (k x n)^T * b (n x m)` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b.data[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        rows: k,
        cols: m,
        data: out,
    }
}

/// `a (n x m) * b^T` where `b` is `k x m`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m, k) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a.data[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b.data[j * m..(j + 1) * m];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor {
        rows: n,
        cols: k,
        data: out,
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one network.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: fresh_uid(),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: fresh_uid(),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform fan-in initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(name, Tensor { rows, cols, data })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|t| t.data.len()).sum()
    }

    fn check_like(&self, other: &[Tensor]) -> Result<(), NnError> {
        if self.values.len() != other.len()
            || self.values.iter().zip(other).any(|(a, b)| !a.same_shape(b))
        {
            return Err(NnError::DimensionMismatch(
                "parameter sets differ in layout".into(),
            ));
        }
        Ok(())
    }

    /// `params <- params - lr * grads`.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<(), NnError> {
        self.check_like(grads)?;
        for (p, g) in self.values.iter_mut().zip(grads) {
            for (w, d) in p.data.iter_mut().zip(&g.data) {
                *w -= lr * d;
            }
        }
        Ok(())
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn polyak_update(&mut self, online: &ParamStore, tau: f64) -> Result<(), NnError> {
        self.check_like(&online.values)?;
        for (t, o) in self.values.iter_mut().zip(&online.values) {
            for (w, v) in t.data.iter_mut().zip(&o.data) {
                *w = tau * v + (1.0 - tau) * *w;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NN_MAGIC);
        out.extend_from_slice(&NN_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.values) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut cur = Cursor::new(bytes);
        Self::read_from(&mut cur)
    }

    pub(crate) fn read_from(cur: &mut Cursor<&[u8]>) -> Result<Self, NnError> {
        let bad = |m: &str| NnError::BadCheckpoint(m.to_string());
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != NN_MAGIC {
            return Err(bad("wrong magic"));
        }
        let u32_at = |cur: &mut Cursor<&[u8]>| -> Result<u32, NnError> {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b))
        };
        if u32_at(cur)? != NN_VERSION {
            return Err(bad("unsupported version"));
        }
        let n = u32_at(cur)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = u32_at(cur)? as usize;
            let mut name = vec![0u8; len];
            cur.read_exact(&mut name)
                .map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not utf-8"))?;
            if u32_at(cur)? != 2 {
                return Err(bad("only rank-2 tensors are stored"));
            }
            let rows = u32_at(cur)? as usize;
            let cols = u32_at(cur)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let mut b = [0u8; 8];
                cur.read_exact(&mut b).map_err(|_| bad("truncated data"))?;
                data.push(f64::from_le_bytes(b));
            }
            store.add(name, Tensor { rows, cols, data });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies values from a store with the same layout.
    pub fn assign(&mut self, other: &ParamStore) -> Result<(), NnError> {
        self.check_like(&other.values)?;
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    RepeatRows(Var),
    Min(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<(u64, usize), Var>,
}

impl Gradients {
    /// Gradient of a leaf (constant or parameter); interior nodes are not kept.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter of `store`, zero where the parameter was
    /// not reached.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .values
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.params
                    .get(&(store.uid, i))
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols))
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

macro_rules! shape_check {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(NnError::DimensionMismatch(format!($($msg)*)));
        }
    };
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid, id.0);
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = self.push(store.values[id.0].clone(), Op::Leaf);
        self.params.insert(key, v);
        v
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        shape_check!(sa.1 == sb.0, "matmul {sa:?} x {sb:?}");
        let v = matmul(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        shape_check!(sa.1 == sb.1, "matmul_nt {sa:?} x {sb:?}^T");
        let v = matmul_nt(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        shape_check!(sb.0 == 1 && sa.1 == sb.1, "add_row {sa:?} + {sb:?}");
        let mut v = self.value(a).clone();
        let bias = &self.nodes[b.0].value.data;
        for row in v.data.chunks_mut(sa.1) {
            for (x, y) in row.iter_mut().zip(bias) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, b)))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        shape_check!(sa == sb, "{name} {sa:?} vs {sb:?}");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(
            Tensor {
                rows: sa.0,
                cols: sa.1,
                data,
            },
            op,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary(a, b, "min", f64::min, Op::Min(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Stacks `n` copies of a `1 x m` row.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, NnError> {
        let s = self.shape(a);
        shape_check!(s.0 == 1, "repeat_rows needs a row, got {s:?}");
        let row = &self.value(a).data;
        let data = (0..n).flat_map(|_| row.iter().copied()).collect();
        Ok(self.push(
            Tensor {
                rows: n,
                cols: s.1,
                data,
            },
            Op::RepeatRows(a),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.shape(parts[0]).0;
        shape_check!(
            parts.iter().all(|p| self.shape(*p).0 == rows),
            "concat_cols row counts differ"
        );
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = self.shape(parts[0]).1;
        shape_check!(
            parts.iter().all(|p| self.shape(*p).1 == cols),
            "concat_rows column counts differ"
        );
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&self.value(*p).data);
        }
        let rows = data.len() / cols.max(1);
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.shape(a);
        shape_check!(start + len <= s.1, "slice_cols {start}+{len} of {s:?}");
        let t = self.value(a);
        let mut data = Vec::with_capacity(s.0 * len);
        for r in 0..s.0 {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        Ok(self.push(
            Tensor {
                rows: s.0,
                cols: len,
                data,
            },
            Op::SliceCols(a, start),
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let s = self.shape(a);
        shape_check!(start + len <= s.0, "slice_rows {start}+{len} of {s:?}");
        let data = self.value(a).data[start * s.1..(start + len) * s.1].to_vec();
        Ok(self.push(
            Tensor {
                rows: len,
                cols: s.1,
                data,
            },
            Op::SliceRows(a, start),
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for row in out.data.chunks_mut(t.cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = t.clone();
        for row in out.data.chunks_mut(t.cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise normalization followed by a learned affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        const EPS: f64 = 1e-5;
        let (n, m) = self.shape(x);
        shape_check!(
            self.shape(gamma) == (1, m) && self.shape(beta) == (1, m),
            "layer_norm affine must be 1x{m}"
        );
        let t = self.value(x);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Tensor::zeros(n, m);
        let mut out = Tensor::zeros(n, m);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = t.row_slice(r);
            let mu = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for c in 0..m {
                let h = (row[c] - mu) * is;
                xhat.data[r * m + c] = h;
                out.data[r * m + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(NnError::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul_nt(&g, bv));
                    acc(&mut grads, *b, matmul_tn(av, &g));
                }
                Op::MatMulNT(a, b) => {
                    // out = a b^T; da = g b; db = g^T a
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul(&g, bv));
                    acc(&mut grads, *b, matmul_tn(&g, av));
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (s, v) in gb.data.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
                    };
                    let gb = Tensor {
                        rows: g.rows,
                        cols: g.cols,
                        data: g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect(),
                    };
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    let mut gb = Tensor::zeros(g.rows, g.cols);
                    for k in 0..g.data.len() {
                        if av.data[k] <= bv.data[k] {
                            ga.data[k] = g.data[k];
                        } else {
                            gb.data[k] = g.data[k];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Tensor { data, ..g });
                }
                Op::Tanh(a) => {
                    let data = g
                        .data
                        .iter()
                        .zip(&val.data)
                        .map(|(d, y)| d * (1.0 - y * y))
                        .collect();
                    acc(&mut grads, *a, Tensor { data, ..g });
                }
                Op::Exp(a) => {
                    let data = g.data.iter().zip(&val.data).map(|(d, y)| d * y).collect();
                    acc(&mut grads, *a, Tensor { data, ..g });
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    let data = g.data.iter().zip(&x.data).map(|(d, v)| d / v).collect();
                    acc(&mut grads, *a, Tensor { data, ..g });
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(
                        &mut grads,
                        *a,
                        Tensor {
                            rows: r,
                            cols: c,
                            data: vec![g.item(); r * c],
                        },
                    );
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(*a);
                    acc(
                        &mut grads,
                        *a,
                        Tensor {
                            rows: r,
                            cols: c,
                            data: vec![g.item() / (r * c) as f64; r * c],
                        },
                    );
                }
                Op::RepeatRows(a) => {
                    let mut ga = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (s, v) in ga.data.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let mut gp = Tensor::zeros(r, c);
                        for row in 0..r {
                            gp.data[row * c..(row + 1) * c]
                                .copy_from_slice(&g.row_slice(row)[offset..offset + c]);
                        }
                        offset += c;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        let gp = Tensor {
                            rows: r,
                            cols: c,
                            data: g.data[offset * c..(offset + r) * c].to_vec(),
                        };
                        offset += r;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        ga.data[row * c + start..row * c + start + g.cols]
                            .copy_from_slice(g.row_slice(row));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    ga.data[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data.chunks_mut(g.cols).zip(val.data.chunks(g.cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for (d, y) in grow.iter_mut().zip(yrow) {
                            *d = y * (*d - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for (grow, yrow) in ga.data.chunks_mut(g.cols).zip(val.data.chunks(g.cols)) {
                        let total: f64 = grow.iter().sum();
                        for (d, y) in grow.iter_mut().zip(yrow) {
                            *d -= y.exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, m) = (g.rows, g.cols);
                    let gam = &self.value(*gamma).data;
                    let mut gg = Tensor::zeros(1, m);
                    let mut gb = Tensor::zeros(1, m);
                    let mut gx = Tensor::zeros(n, m);
                    for r in 0..n {
                        let grow = g.row_slice(r);
                        let hrow = xhat.row_slice(r);
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..m {
                            gg.data[c] += grow[c] * hrow[c];
                            gb.data[c] += grow[c];
                            let d = grow[c] * gam[c];
                            sum_d += d;
                            sum_dh += d * hrow[c];
                        }
                        let mf = m as f64;
                        for c in 0..m {
                            let d = grow[c] * gam[c];
                            gx.data[r * m + c] =
                                inv_std[r] / mf * (mf * d - sum_d - hrow[c] * sum_dh);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gb);
                    acc(&mut grads, *x, gx);
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

/// Fully connected layer `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), inputs, outputs, inputs, rng);
        let b = store.add_uniform(format!("{name}.b"), 1, outputs, inputs, rng);
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::row(vec![1.0; dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-layer perceptron with ReLU hidden activations.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub feedforward_dim: usize,
    pub input_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            n_heads: 4,
            n_layers: 2,
            feedforward_dim: 128,
            input_dim: 10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(NnError::DimensionMismatch(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    wq: Dense,
    wk: Dense,
    wv: Dense,
    wo: Dense,
    ln1: LayerNorm,
    ff1: Dense,
    ff2: Dense,
    ln2: LayerNorm,
}

/// Set encoder: no positional information, so outputs are
/// permutation-equivariant in the tokens. A learned summary token is
/// prepended and its output row embeds the whole set.
#[derive(Debug, Clone)]
pub struct SetEncoder {
    pub cfg: EncoderConfig,
    embed: Dense,
    cls: ParamId,
    layers: Vec<EncoderLayer>,
}

impl SetEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let embed = Dense::new(store, &format!("{name}.embed"), cfg.input_dim, d, rng);
        let cls = store.add_uniform(format!("{name}.cls"), 1, d, d, rng);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    wq: Dense::new(store, &format!("{p}.q"), d, d, rng),
                    wk: Dense::new(store, &format!("{p}.k"), d, d, rng),
                    wv: Dense::new(store, &format!("{p}.v"), d, d, rng),
                    wo: Dense::new(store, &format!("{p}.o"), d, d, rng),
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    ff1: Dense::new(store, &format!("{p}.ff1"), d, cfg.feedforward_dim, rng),
                    ff2: Dense::new(store, &format!("{p}.ff2"), cfg.feedforward_dim, d, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            embed,
            cls,
            layers,
        })
    }

    /// Returns `(summary 1 x d, tokens n x d)`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
    ) -> Result<(Var, Var), NnError> {
        let (n, w) = g.shape(tokens);
        if n == 0 {
            return Err(NnError::EmptyInput);
        }
        if w != self.cfg.input_dim {
            return Err(NnError::DimensionMismatch(format!(
                "token width {w}, encoder expects {}",
                self.cfg.input_dim
            )));
        }
        let d = self.cfg.model_dim;
        let heads = self.cfg.n_heads;
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let emb = self.embed.forward(g, store, tokens)?;
        let cls = g.param(store, self.cls);
        let mut h = g.concat_rows(&[cls, emb])?;
        for layer in &self.layers {
            let q = layer.wq.forward(g, store, h)?;
            let k = layer.wk.forward(g, store, h)?;
            let v = layer.wv.forward(g, store, h)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, inv_sqrt);
                let a = g.softmax_rows(s);
                outs.push(g.matmul(a, vh)?);
            }
            let att = if heads == 1 {
                outs[0]
            } else {
                g.concat_cols(&outs)?
            };
            let att = layer.wo.forward(g, store, att)?;
            let res = g.add(h, att)?;
            let h1 = layer.ln1.forward(g, store, res)?;
            let f = layer.ff1.forward(g, store, h1)?;
            let f = g.relu(f);
            let f = layer.ff2.forward(g, store, f)?;
            let res = g.add(h1, f)?;
            h = layer.ln2.forward(g, store, res)?;
        }
        let summary = g.slice_rows(h, 0, 1)?;
        let per_token = g.slice_rows(h, 1, n)?;
        Ok((summary, per_token))
    }
}

/// Normalized exponential of a slice, shift-stabilized.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state for one parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .values
            .iter()
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        lr: f64,
    ) -> Result<(), NnError> {
        match self.cfg {
            OptimizerConfig::Sgd => store.sgd_step(grads, lr),
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                store.check_like(grads)?;
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in store
                    .values
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.m)
                    .zip(&mut self.v)
                {
                    for k in 0..p.data.len() {
                        let gk = g.data[k];
                        m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                        v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                        let mh = m.data[k] / c1;
                        let vh = v.data[k] / c2;
                        p.data[k] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                Ok(())
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            for v in t.data.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor {
            rows: r,
            cols: c,
            data: (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    /// Checks every parameter of `store` against central differences of
    /// `loss`; returns the worst relative error.
    fn fd_check(store: &mut ParamStore, loss: impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
        let mut g = Graph::new();
        let l = loss(&mut g, store);
        let grads = g.backward(l).unwrap().for_store(store);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for p in 0..store.len() {
            for k in 0..store.values[p].data.len() {
                let orig = store.values[p].data[k];
                store.values[p].data[k] = orig + h;
                let mut g1 = Graph::new();
                let lp = loss(&mut g1, store);
                let fp = g1.value(lp).item();
                store.values[p].data[k] = orig - h;
                let mut g2 = Graph::new();
                let lm = loss(&mut g2, store);
                let fm = g2.value(lm).item();
                store.values[p].data[k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[p].data[k];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![1.5, -2.0, 0.25]));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap().for_store(&store);
        assert_eq!(grads[0].data, vec![3.0, -4.0, 0.5]);
    }

    #[test]
    fn unreached_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(vec![1.0, 2.0]));
        let b = store.add("b", Tensor::row(vec![3.0]));
        let mut g = Graph::new();
        let av = g.param(&store, a);
        let _bv = g.param(&store, b);
        let loss = g.sum(av);
        let grads = g.backward(loss).unwrap().for_store(&store);
        assert_eq!(grads[1].data, vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(NnError::NonScalarLoss(1, 2))));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            model_dim: 8,
            n_heads: 2,
            n_layers: 2,
            feedforward_dim: 12,
            input_dim: 5,
        };
        let enc = SetEncoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
        let head = Dense::new(&mut store, "head", 8, 1, &mut rng);
        let tokens = rand_tensor(&mut rng, 4, 5);
        let worst = fd_check(&mut store, |g, s| {
            let t = g.constant(tokens.clone());
            let (cls, per) = enc.encode(g, s, t).unwrap();
            let hc = head.forward(g, s, cls).unwrap();
            let ht = head.forward(g, s, per).unwrap();
            let ht = g.tanh(ht);
            let ht = g.transpose(ht);
            let lp = g.log_softmax_rows(ht);
            let a = g.sum(lp);
            let b = g.sum(hc);
            g.add(a, b).unwrap()
        });
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn set_encoder_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            input_dim: 6,
            ..EncoderConfig::default()
        };
        let enc = SetEncoder::new(&mut store, "enc", cfg, &mut rng).unwrap();
        let tokens = rand_tensor(&mut rng, 5, 6);
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = Tensor::from_rows(
            &perm
                .iter()
                .map(|&i| tokens.row_slice(i).to_vec())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut g = Graph::new();
        let t1 = g.constant(tokens);
        let (c1, p1) = enc.encode(&mut g, &store, t1).unwrap();
        let t2 = g.constant(permuted);
        let (c2, p2) = enc.encode(&mut g, &store, t2).unwrap();
        for (a, b) in g.value(c1).data.iter().zip(&g.value(c2).data) {
            assert!((a - b).abs() < 1e-9);
        }
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in g
                .value(p1)
                .row_slice(i)
                .iter()
                .zip(g.value(p2).row_slice(k))
            {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_token_and_bad_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            model_dim: 8,
            n_heads: 2,
            n_layers: 1,
            feedforward_dim: 8,
            input_dim: 3,
        };
        let enc = SetEncoder::new(&mut store, "e", cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let one = g.constant(Tensor::row(vec![0.1, 0.2, 0.3]));
        let (cls, per) = enc.encode(&mut g, &store, one).unwrap();
        assert_eq!(g.value(cls).shape(), (1, 8));
        assert_eq!(g.value(per).shape(), (1, 8));
        let wrong = g.constant(Tensor::row(vec![0.1, 0.2]));
        assert!(matches!(
            enc.encode(&mut g, &store, wrong),
            Err(NnError::DimensionMismatch(_))
        ));
        let bad = EncoderConfig {
            model_dim: 10,
            n_heads: 4,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn optimizer_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut online = ParamStore::new();
        Dense::new(&mut online, "d", 3, 2, &mut rng);
        let mut target = online.clone();
        for t in target.values_mut() {
            for v in t.data.iter_mut() {
                *v += 1.0;
            }
        }
        let before = target.clone();
        target.polyak_update(&online, 0.0).unwrap();
        assert_eq!(target, before);
        target.polyak_update(&online, 1.0).unwrap();
        assert_eq!(target, online);

        let grads: Vec<Tensor> = online
            .values()
            .iter()
            .map(|t| rand_tensor(&mut rng, t.rows, t.cols))
            .collect();
        let snapshot = online.clone();
        online.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(online, snapshot);
        online.sgd_step(&grads, 0.5).unwrap();
        assert!(
            (online.values()[0].data[0] - (snapshot.values()[0].data[0] - 0.5 * grads[0].data[0]))
                .abs()
                < 1e-15
        );
        assert!(online.sgd_step(&grads[..1], 0.1).is_err());
    }

    #[test]
    fn checkpoint_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        Mlp::new(&mut store, "mlp", &[4, 7, 1], &mut rng);
        store.get_mut(ParamId(0)).data[0] = f64::MIN_POSITIVE / 3.0;
        let bytes = store.to_bytes();
        assert_eq!(&bytes[..4], NN_MAGIC);
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.names(), store.names());
        for (a, b) in back.values().iter().zip(store.values()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ParamStore::from_bytes(b"XYZ\0").is_err());
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(vec![1.0, -1.0]));
        let mut opt = Optimizer::new(OptimizerConfig::adam(), &store);
        opt.step(&mut store, &[Tensor::row(vec![2.0, -3.0])], 0.1)
            .unwrap();
        let w = &store.values()[0].data;
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[derive(Debug, Clone, Copy)]
    enum Layer {
        Dense,
        LayerNorm,
        Attention,
        Softmax,
        LogSoftmax,
        Min,
        Tanh,
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn layer_gradients_match_finite_differences(
            seed in 0u64..10_000,
            rows in 1usize..6,
            cols in 1usize..7,
            kind in prop_oneof![
                Just(Layer::Dense), Just(Layer::LayerNorm), Just(Layer::Attention),
                Just(Layer::Softmax), Just(Layer::LogSoftmax), Just(Layer::Min), Just(Layer::Tanh)
            ],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&mut rng, rows, cols));
            let y = store.add("y", rand_tensor(&mut rng, rows, cols));
            let out = cols.max(2);
            let dense = Dense::new(&mut store, "d", cols, out, &mut rng);
            let ln = LayerNorm::new(&mut store, "ln", cols);
            // perturb the affine part so its gradient is exercised
            for v in store.get_mut(ln.gamma).data.iter_mut() { *v += rng.gen_range(-0.5..0.5); }
            let weights = rand_tensor(&mut rng, rows, out.max(cols));
            let worst = fd_check(&mut store, |g, s| {
                let xv = g.param(s, x);
                let yv = g.param(s, y);
                let h = match kind {
                    Layer::Dense => dense.forward(g, s, xv).unwrap(),
                    Layer::LayerNorm => ln.forward(g, s, xv).unwrap(),
                    Layer::Attention => {
                        let sc = g.matmul_nt(xv, yv).unwrap();
                        let a = g.softmax_rows(sc);
                        g.matmul(a, yv).unwrap()
                    }
                    Layer::Softmax => g.softmax_rows(xv),
                    Layer::LogSoftmax => g.log_softmax_rows(xv),
                    Layer::Min => g.min(xv, yv).unwrap(),
                    Layer::Tanh => g.tanh(xv),
                };
                let (r, c) = g.value(h).shape();
                let w = Tensor::from_vec(r, c, weights.data[..r * c].to_vec()).unwrap();
                let wv = g.constant(w);
                let p = g.mul(h, wv).unwrap();
                g.sum(p)
            });
            prop_assert!(worst < 1e-5, "{kind:?} worst {worst}");
        }

        #[test]
        fn softmax_sums_to_one_and_ignores_shift(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
