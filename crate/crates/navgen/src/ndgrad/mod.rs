//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! Define-by-run: every forward op appends a node to a [`Tape`], recording
//! its operands and enough saved state to run the chain rule. Calling
//! [`Tape::backward`] on a scalar loss walks the tape once in reverse
//! topological order (which is simply reverse insertion order) and
//! accumulates gradients into every parameter leaf. Tapes are cheap and are
//! rebuilt per training step; a second backward on the same tape is an error
//! rather than a silent wrong answer.
//!
//! Tensors are rank 0..=3 row-major arrays, though every op here works on
//! rank 0, 1 or 2 — that is all the models need. Reductions over logits
//! (`softmax`, `log_softmax`, `logsumexp`, `nll`) subtract the row maximum
//! before exponentiating, so scores in the hundreds stay finite. Every
//! forward op validates shapes (errors name the op and both shapes) and
//! checks its output for NaN/Inf.

pub mod check;
pub mod optim;

pub use optim::{Adam, Checkpoint, GradMap, ParamEntry, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};

// ============================================================================
// Arrays
// ============================================================================

/// Dense row-major `f64` array, rank 0 to 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Array> {
        if shape.len() > 3 {
            return Err(NavError::Shape {
                op: "array",
                lhs: shape.clone(),
                rhs: vec![3],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NavError::Shape {
                op: "array",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    pub fn scalar(v: f64) -> Array {
        Array {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Array {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Array> {
        Array::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Array {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Scalar value of a rank-0 (or single-element) array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(NavError::Shape {
                op: "item",
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok(self.data[0])
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ============================================================================
// Tape and ops
// ============================================================================

/// Handle to a tape node. Valid only for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Concat1(Vec<usize>),
    StackRows(Vec<usize>),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    Slice1 { src: usize, start: usize },
    Row { src: usize, row: usize },
    EmbedRows { table: usize, ids: Vec<usize> },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Nll { logits: usize, target: usize },
    Gather2 { src: usize, cells: Vec<(usize, usize)> },
    Sum(usize),
    Mean(usize),
}

struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires: bool,
    param: Option<String>,
}

/// Recording tape. One tape per forward/backward cycle.
pub struct Tape {
    nodes: Vec<Node>,
    /// Parameter leaves already materialized on this tape, so repeated
    /// fetches of the same parameter share one node (and one gradient slot).
    param_cache: indexmap::IndexMap<String, usize>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            param_cache: indexmap::IndexMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires: bool, op_name: &'static str) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(NavError::Numerical(format!(
                "non-finite value produced by {op_name}"
            )));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires,
            param: None,
        });
        Ok(Tensor(self.nodes.len() - 1))
    }

    fn req(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires
    }

    /// Constant leaf (no gradient tracked).
    pub fn constant(&mut self, value: Array) -> Result<Tensor> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn const_scalar(&mut self, v: f64) -> Result<Tensor> {
        self.constant(Array::scalar(v))
    }

    pub fn const_vec(&mut self, data: &[f64]) -> Result<Tensor> {
        self.constant(Array::vector(data.to_vec()))
    }

    /// Parameter leaf, fetched from a store by name. Cached per tape: fetching
    /// the same name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Tensor> {
        if let Some(&id) = self.param_cache.get(name) {
            return Ok(Tensor(id));
        }
        let value = store.get(name)?.clone();
        let t = self.push(value, Op::Leaf, true, "param")?;
        self.nodes[t.0].param = Some(name.to_string());
        self.param_cache.insert(name.to_string(), t.0);
        Ok(t)
    }

    pub fn value(&self, t: Tensor) -> &Array {
        &self.nodes[t.0].value
    }

    /// Gradient of the last backward pass w.r.t. `t`, if one was computed.
    pub fn grad(&self, t: Tensor) -> Option<&Array> {
        self.nodes[t.0].grad.as_ref()
    }

    // ------------------------------------------------------------------
    // Elementwise and arithmetic
    // ------------------------------------------------------------------

    fn binary_same_shape(
        &mut self,
        a: Tensor,
        b: Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(NavError::Shape {
                op: op_name,
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let data = va
            .data
            .iter()
            .zip(vb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Array {
            shape: va.shape.clone(),
            data,
        };
        let requires = self.req(a) || self.req(b);
        self.push(value, op, requires, op_name)
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let value = Array {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x * c).collect(),
        };
        let requires = self.req(a);
        self.push(value, Op::Scale(a.0, c), requires, "scale")
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let value = Array {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| x + c).collect(),
        };
        let requires = self.req(a);
        self.push(value, Op::AddScalar(a.0), requires, "add_scalar")
    }

    fn unary_elementwise(
        &mut self,
        a: Tensor,
        op_name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let value = Array {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        let requires = self.req(a);
        self.push(value, op, requires, op_name)
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary_elementwise(a, "tanh", f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary_elementwise(a, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Tensor) -> Result<Tensor> {
        self.unary_elementwise(a, "relu", |x| x.max(0.0), Op::Relu(a.0))
    }

    // ------------------------------------------------------------------
    // Linear algebra and structure
    // ------------------------------------------------------------------

    /// Matrix product over the rank combinations that arise in practice:
    /// `(m,k)x(k,n)`, `(k)x(k,n)`, `(m,k)x(k)`, and `(k)x(k)` (dot product).
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || NavError::Shape {
            op: "matmul",
            lhs: va.shape.clone(),
            rhs: vb.shape.clone(),
        };
        let value = match (va.rank(), vb.rank()) {
            (2, 2) => {
                let (m, k) = (va.shape[0], va.shape[1]);
                let (k2, n) = (vb.shape[0], vb.shape[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                Array {
                    shape: vec![m, n],
                    data: mat_mat(&va.data, m, k, &vb.data, n),
                }
            }
            (1, 2) => {
                let k = va.shape[0];
                let (k2, n) = (vb.shape[0], vb.shape[1]);
                if k != k2 {
                    return Err(mismatch());
                }
                Array {
                    shape: vec![n],
                    data: mat_mat(&va.data, 1, k, &vb.data, n),
                }
            }
            (2, 1) => {
                let (m, k) = (va.shape[0], va.shape[1]);
                if k != vb.shape[0] {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &va.data[i * k..(i + 1) * k];
                    out[i] = row.iter().zip(vb.data.iter()).map(|(&x, &y)| x * y).sum();
                }
                Array {
                    shape: vec![m],
                    data: out,
                }
            }
            (1, 1) => {
                if va.shape[0] != vb.shape[0] {
                    return Err(mismatch());
                }
                let dot = va
                    .data
                    .iter()
                    .zip(vb.data.iter())
                    .map(|(&x, &y)| x * y)
                    .sum();
                Array::scalar(dot)
            }
            _ => return Err(mismatch()),
        };
        let requires = self.req(a) || self.req(b);
        self.push(value, Op::MatMul(a.0, b.0), requires, "matmul")
    }

    /// Concatenate rank-1 tensors into one longer vector.
    pub fn concat1(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(NavError::Numerical("concat1 of zero tensors".into()));
        }
        let mut data = Vec::new();
        let mut requires = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            // Scalars join as length-1 segments.
            if v.rank() > 1 {
                return Err(NavError::Shape {
                    op: "concat1",
                    lhs: v.shape.clone(),
                    rhs: vec![0],
                });
            }
            data.extend_from_slice(&v.data);
            requires |= self.req(p);
        }
        let value = Array::vector(data);
        self.push(
            value,
            Op::Concat1(parts.iter().map(|t| t.0).collect()),
            requires,
            "concat1",
        )
    }

    /// Stack equal-length rank-1 tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(NavError::Numerical("stack_rows of zero tensors".into()));
        }
        let width = self.nodes[rows[0].0].value.numel();
        let mut data = Vec::with_capacity(rows.len() * width);
        let mut requires = false;
        for &r in rows {
            let v = &self.nodes[r.0].value;
            if v.rank() != 1 || v.numel() != width {
                return Err(NavError::Shape {
                    op: "stack_rows",
                    lhs: v.shape.clone(),
                    rhs: vec![width],
                });
            }
            data.extend_from_slice(&v.data);
            requires |= self.req(r);
        }
        let value = Array {
            shape: vec![rows.len(), width],
            data,
        };
        self.push(
            value,
            Op::StackRows(rows.iter().map(|t| t.0).collect()),
            requires,
            "stack_rows",
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(NavError::Shape {
                op: "transpose",
                lhs: va.shape.clone(),
                rhs: vec![0, 0],
            });
        }
        let (r, c) = (va.shape[0], va.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data[i * c + j];
            }
        }
        let value = Array {
            shape: vec![c, r],
            data,
        };
        let requires = self.req(a);
        self.push(value, Op::Transpose(a.0), requires, "transpose")
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(NavError::Numerical("concat_cols of zero tensors".into()));
        }
        let rows = {
            let first = &self.nodes[parts[0].0].value;
            if first.rank() != 2 {
                return Err(NavError::Shape {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: vec![0, 0],
                });
            }
            first.shape[0]
        };
        let mut widths = Vec::with_capacity(parts.len());
        let mut requires = false;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rank() != 2 || v.shape[0] != rows {
                return Err(NavError::Shape {
                    op: "concat_cols",
                    lhs: v.shape.clone(),
                    rhs: vec![rows, 0],
                });
            }
            widths.push(v.shape[1]);
            requires |= self.req(p);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(widths.iter()) {
                let v = &self.nodes[p.0].value;
                data.extend_from_slice(&v.data[i * w..(i + 1) * w]);
            }
        }
        let value = Array {
            shape: vec![rows, total],
            data,
        };
        self.push(
            value,
            Op::ConcatCols(parts.iter().map(|t| t.0).collect()),
            requires,
            "concat_cols",
        )
    }

    /// Contiguous column slice of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 || start + len > va.shape[1] {
            return Err(NavError::Shape {
                op: "slice_cols",
                lhs: va.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let (r, c) = (va.shape[0], va.shape[1]);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&va.data[i * c + start..i * c + start + len]);
        }
        let value = Array {
            shape: vec![r, len],
            data,
        };
        let requires = self.req(a);
        self.push(value, Op::SliceCols { src: a.0, start }, requires, "slice_cols")
    }

    /// Contiguous slice of a rank-1 tensor.
    pub fn slice1(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 1 || start + len > va.numel() {
            return Err(NavError::Shape {
                op: "slice1",
                lhs: va.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let value = Array::vector(va.data[start..start + len].to_vec());
        let requires = self.req(a);
        self.push(value, Op::Slice1 { src: a.0, start }, requires, "slice1")
    }

    /// Extract one row of a rank-2 tensor as a vector.
    pub fn row(&mut self, a: Tensor, row: usize) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 || row >= va.shape[0] {
            return Err(NavError::Shape {
                op: "row",
                lhs: va.shape.clone(),
                rhs: vec![row],
            });
        }
        let w = va.shape[1];
        let value = Array::vector(va.data[row * w..(row + 1) * w].to_vec());
        let requires = self.req(a);
        self.push(value, Op::Row { src: a.0, row }, requires, "row")
    }

    /// Look up embedding rows: `table` is `(V, E)`, output is `(ids.len(), E)`.
    /// Ids at or beyond `V` are an error.
    pub fn embed_rows(&mut self, table: Tensor, ids: &[u32]) -> Result<Tensor> {
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 {
            return Err(NavError::Shape {
                op: "embed_rows",
                lhs: vt.shape.clone(),
                rhs: vec![0, 0],
            });
        }
        let (v, e) = (vt.shape[0], vt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        let mut idxs = Vec::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(NavError::Numerical(format!(
                    "embed_rows id {id} out of range for table with {v} rows"
                )));
            }
            data.extend_from_slice(&vt.data[id * e..(id + 1) * e]);
            idxs.push(id);
        }
        let value = Array {
            shape: vec![ids.len(), e],
            data,
        };
        let requires = self.req(table);
        self.push(
            value,
            Op::EmbedRows {
                table: table.0,
                ids: idxs,
            },
            requires,
            "embed_rows",
        )
    }

    // ------------------------------------------------------------------
    // Reductions over logits
    // ------------------------------------------------------------------

    /// Row-stabilized softmax. Rank-1 normalizes the vector; rank-2
    /// normalizes each row.
    pub fn softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let value = rowwise(va, "softmax", |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        })?;
        let requires = self.req(a);
        self.push(value, Op::Softmax(a.0), requires, "softmax")
    }

    /// Row-stabilized log-softmax.
    pub fn log_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let value = rowwise(va, "log_softmax", |row, out| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o = x - lse;
            }
        })?;
        let requires = self.req(a);
        self.push(value, Op::LogSoftmax(a.0), requires, "log_softmax")
    }

    /// `log(sum(exp(x)))` of a rank-1 tensor, max-subtracted for stability.
    pub fn logsumexp(&mut self, a: Tensor) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 1 || va.numel() == 0 {
            return Err(NavError::Shape {
                op: "logsumexp",
                lhs: va.shape.clone(),
                rhs: vec![0],
            });
        }
        let m = va.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = va.data.iter().map(|&x| (x - m).exp()).sum();
        let value = Array::scalar(m + z.ln());
        let requires = self.req(a);
        self.push(value, Op::LogSumExp(a.0), requires, "logsumexp")
    }

    /// Negative log-likelihood of `target` under rank-1 `logits`:
    /// `logsumexp(logits) - logits[target]`. For a single-candidate logit
    /// vector this is exactly zero.
    pub fn nll(&mut self, logits: Tensor, target: usize) -> Result<Tensor> {
        let va = &self.nodes[logits.0].value;
        if va.rank() != 1 || target >= va.numel() {
            return Err(NavError::Shape {
                op: "nll",
                lhs: va.shape.clone(),
                rhs: vec![target],
            });
        }
        let m = va.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = va.data.iter().map(|&x| (x - m).exp()).sum();
        let lse = m + z.ln();
        let value = Array::scalar(lse - va.data[target]);
        let requires = self.req(logits);
        self.push(
            value,
            Op::Nll {
                logits: logits.0,
                target,
            },
            requires,
            "nll",
        )
    }

    /// Gather scalar cells of a rank-2 tensor into a vector, in order.
    pub fn gather2(&mut self, src: Tensor, cells: &[(usize, usize)]) -> Result<Tensor> {
        let vs = &self.nodes[src.0].value;
        if vs.rank() != 2 {
            return Err(NavError::Shape {
                op: "gather2",
                lhs: vs.shape.clone(),
                rhs: vec![0, 0],
            });
        }
        let (r, c) = (vs.shape[0], vs.shape[1]);
        let mut data = Vec::with_capacity(cells.len());
        for &(i, j) in cells {
            if i >= r || j >= c {
                return Err(NavError::Numerical(format!(
                    "gather2 cell ({i},{j}) out of range for shape ({r},{c})"
                )));
            }
            data.push(vs.data[i * c + j]);
        }
        let value = Array::vector(data);
        let requires = self.req(src);
        self.push(
            value,
            Op::Gather2 {
                src: src.0,
                cells: cells.to_vec(),
            },
            requires,
            "gather2",
        )
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        let value = Array::scalar(va.data.iter().sum());
        let requires = self.req(a);
        self.push(value, Op::Sum(a.0), requires, "sum")
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        let va = &self.nodes[a.0].value;
        if va.numel() == 0 {
            return Err(NavError::Numerical("mean of empty tensor".into()));
        }
        let value = Array::scalar(va.data.iter().sum::<f64>() / va.numel() as f64);
        let requires = self.req(a);
        self.push(value, Op::Mean(a.0), requires, "mean")
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Run reverse-mode accumulation from a scalar `loss`. Visits each node
    /// at most once, in reverse insertion order. Errors if the loss is not
    /// scalar or if backward already ran on this tape.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.backward_done {
            return Err(NavError::Numerical(
                "backward already ran on this tape; build a fresh tape per step".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NavError::Shape {
                op: "backward",
                lhs: self.nodes[loss.0].value.shape.clone(),
                rhs: vec![],
            });
        }
        self.backward_done = true;
        let seed_shape = self.nodes[loss.0].value.shape.clone();
        self.nodes[loss.0].grad = Some(Array {
            shape: seed_shape,
            data: vec![1.0],
        });
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires {
                continue;
            }
            let Some(g) = self.nodes[id].grad.clone() else {
                continue;
            };
            self.propagate(id, &g)?;
        }
        Ok(())
    }

    fn add_grad(&mut self, target: usize, contribution: Array) {
        if !self.nodes[target].requires {
            return;
        }
        match &mut self.nodes[target].grad {
            Some(g) => {
                for (gi, ci) in g.data.iter_mut().zip(contribution.data.iter()) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, id: usize, g: &Array) -> Result<()> {
        // Ops are matched by moving the needed saved state out up front so no
        // borrows of `self.nodes` outlive the `add_grad` calls.
        enum Plan {
            None,
            One(usize, Array),
            Two(usize, Array, usize, Array),
            Many(Vec<(usize, Array)>),
        }
        let plan = match &self.nodes[id].op {
            Op::Leaf => Plan::None,
            Op::Add(a, b) => Plan::Two(*a, g.clone(), *b, g.clone()),
            Op::Sub(a, b) => {
                let neg = Array {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|&x| -x).collect(),
                };
                Plan::Two(*a, g.clone(), *b, neg)
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = Array {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(self.nodes[b].value.data.iter())
                        .map(|(&gi, &bi)| gi * bi)
                        .collect(),
                };
                let gb = Array {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(self.nodes[a].value.data.iter())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect(),
                };
                Plan::Two(a, ga, b, gb)
            }
            Op::Scale(a, c) => {
                let ga = Array {
                    shape: g.shape.clone(),
                    data: g.data.iter().map(|&x| x * c).collect(),
                };
                Plan::One(*a, ga)
            }
            Op::AddScalar(a) => Plan::One(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let va = &self.nodes[a].value;
                let vb = &self.nodes[b].value;
                let (ga, gb) = matmul_backward(va, vb, g);
                Plan::Two(a, ga, b, gb)
            }
            Op::Concat1(parts) => {
                let parts = parts.clone();
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let src = &self.nodes[p].value;
                    let len = src.numel();
                    let piece = Array {
                        shape: src.shape.clone(),
                        data: g.data[offset..offset + len].to_vec(),
                    };
                    out.push((p, piece));
                    offset += len;
                }
                Plan::Many(out)
            }
            Op::StackRows(rows) => {
                let rows = rows.clone();
                let width = g.shape[1];
                let out = rows
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        (r, Array::vector(g.data[i * width..(i + 1) * width].to_vec()))
                    })
                    .collect();
                Plan::Many(out)
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = (g.shape[0], g.shape[1]);
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = g.data[i * c + j];
                    }
                }
                Plan::One(
                    a,
                    Array {
                        shape: vec![c, r],
                        data,
                    },
                )
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = g.shape[0];
                let total = g.shape[1];
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p].value.shape[1];
                    let mut data = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        data.extend_from_slice(&g.data[i * total + offset..i * total + offset + w]);
                    }
                    out.push((
                        p,
                        Array {
                            shape: vec![rows, w],
                            data,
                        },
                    ));
                    offset += w;
                }
                Plan::Many(out)
            }
            Op::SliceCols { src, start } => {
                let (src, start) = (*src, *start);
                let mut ga = Array::zeros(self.nodes[src].value.shape());
                let c = ga.shape[1];
                let (rows, len) = (g.shape[0], g.shape[1]);
                for i in 0..rows {
                    ga.data[i * c + start..i * c + start + len]
                        .copy_from_slice(&g.data[i * len..(i + 1) * len]);
                }
                Plan::One(src, ga)
            }
            Op::Slice1 { src, start } => {
                let (src, start) = (*src, *start);
                let mut ga = Array::zeros(self.nodes[src].value.shape());
                ga.data[start..start + g.data.len()].copy_from_slice(&g.data);
                Plan::One(src, ga)
            }
            Op::Row { src, row } => {
                let (src, row) = (*src, *row);
                let mut ga = Array::zeros(self.nodes[src].value.shape());
                let w = g.data.len();
                ga.data[row * w..(row + 1) * w].copy_from_slice(&g.data);
                Plan::One(src, ga)
            }
            Op::EmbedRows { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let mut gt = Array::zeros(self.nodes[table].value.shape());
                let e = gt.shape[1];
                for (k, &id) in ids.iter().enumerate() {
                    for j in 0..e {
                        gt.data[id * e + j] += g.data[k * e + j];
                    }
                }
                Plan::One(table, gt)
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                let ga = Array {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&gi, &yi)| gi * (1.0 - yi * yi))
                        .collect(),
                };
                Plan::One(a, ga)
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                let ga = Array {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(y.data.iter())
                        .map(|(&gi, &yi)| gi * yi * (1.0 - yi))
                        .collect(),
                };
                Plan::One(a, ga)
            }
            Op::Relu(a) => {
                let a = *a;
                let x = &self.nodes[a].value;
                let ga = Array {
                    shape: g.shape.clone(),
                    data: g
                        .data
                        .iter()
                        .zip(x.data.iter())
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect(),
                };
                Plan::One(a, ga)
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                // dx = y * (g - <g, y>) per row.
                let mut ga = Array::zeros(y.shape());
                for_rows(y.shape(), |row_start, row_len| {
                    let yr = &y.data[row_start..row_start + row_len];
                    let gr = &g.data[row_start..row_start + row_len];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&yi, &gi)| yi * gi).sum();
                    for i in 0..row_len {
                        ga.data[row_start + i] = yr[i] * (gr[i] - dot);
                    }
                });
                Plan::One(a, ga)
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let y = &self.nodes[id].value;
                // dx = g - softmax(x) * sum(g) per row; softmax = exp(y).
                let mut ga = Array::zeros(y.shape());
                for_rows(y.shape(), |row_start, row_len| {
                    let yr = &y.data[row_start..row_start + row_len];
                    let gr = &g.data[row_start..row_start + row_len];
                    let gsum: f64 = gr.iter().sum();
                    for i in 0..row_len {
                        ga.data[row_start + i] = gr[i] - yr[i].exp() * gsum;
                    }
                });
                Plan::One(a, ga)
            }
            Op::LogSumExp(a) => {
                let a = *a;
                let x = &self.nodes[a].value;
                let lse = self.nodes[id].value.data[0];
                let gs = g.data[0];
                let ga = Array::vector(x.data.iter().map(|&xi| gs * (xi - lse).exp()).collect());
                Plan::One(a, ga)
            }
            Op::Nll { logits, target } => {
                let (logits, target) = (*logits, *target);
                let x = &self.nodes[logits].value;
                let m = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = x.data.iter().map(|&xi| (xi - m).exp()).sum();
                let gs = g.data[0];
                let mut data: Vec<f64> = x.data.iter().map(|&xi| gs * (xi - m).exp() / z).collect();
                data[target] -= gs;
                Plan::One(logits, Array::vector(data))
            }
            Op::Gather2 { src, cells } => {
                let (src, cells) = (*src, cells.clone());
                let mut ga = Array::zeros(self.nodes[src].value.shape());
                let c = ga.shape[1];
                for (k, &(i, j)) in cells.iter().enumerate() {
                    ga.data[i * c + j] += g.data[k];
                }
                Plan::One(src, ga)
            }
            Op::Sum(a) => {
                let a = *a;
                let shape = self.nodes[a].value.shape().to_vec();
                let gs = g.data[0];
                let n: usize = shape.iter().product();
                Plan::One(
                    a,
                    Array {
                        shape,
                        data: vec![gs; n],
                    },
                )
            }
            Op::Mean(a) => {
                let a = *a;
                let shape = self.nodes[a].value.shape().to_vec();
                let n: usize = shape.iter().product();
                let gs = g.data[0] / n as f64;
                Plan::One(
                    a,
                    Array {
                        shape,
                        data: vec![gs; n],
                    },
                )
            }
        };
        match plan {
            Plan::None => {}
            Plan::One(a, ga) => self.add_grad(a, ga),
            Plan::Two(a, ga, b, gb) => {
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Plan::Many(list) => {
                for (t, gt) in list {
                    self.add_grad(t, gt);
                }
            }
        }
        Ok(())
    }

    /// Gradients of all parameter leaves touched by this tape, in fetch
    /// order. Parameters whose gradient was never reached get zeros.
    pub fn param_grads(&self) -> GradMap {
        let mut out = GradMap::new();
        for (name, &id) in &self.param_cache {
            let node = &self.nodes[id];
            let grad = node
                .grad
                .clone()
                .unwrap_or_else(|| Array::zeros(node.value.shape()));
            out.insert(name.clone(), grad);
        }
        out
    }
}

/// Apply `f` to each row range of a rank-1 (single row) or rank-2 array.
fn for_rows(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    match shape.len() {
        1 => f(0, shape[0]),
        2 => {
            for r in 0..shape[0] {
                f(r * shape[1], shape[1]);
            }
        }
        _ => unreachable!("rowwise ops validate rank"),
    }
}

fn rowwise(a: &Array, op: &'static str, f: impl Fn(&[f64], &mut [f64])) -> Result<Array> {
    if a.rank() == 0 || a.rank() > 2 || a.numel() == 0 {
        return Err(NavError::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: vec![0],
        });
    }
    let mut out = Array::zeros(a.shape());
    let width = *a.shape.last().unwrap();
    let rows = a.numel() / width;
    for r in 0..rows {
        let s = r * width;
        f(&a.data[s..s + width], &mut out.data[s..s + width]);
    }
    Ok(out)
}

/// Row-major `(m,k) x (k,n)` product, ikj loop order for cache friendliness.
fn mat_mat(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

fn matmul_backward(va: &Array, vb: &Array, g: &Array) -> (Array, Array) {
    match (va.rank(), vb.rank()) {
        (2, 2) => {
            let (m, k) = (va.shape[0], va.shape[1]);
            let n = vb.shape[1];
            // dA = G (m,n) . B^T (n,k)
            let bt = transpose(&vb.data, k, n);
            let ga = Array {
                shape: vec![m, k],
                data: mat_mat(&g.data, m, n, &bt, k),
            };
            // dB = A^T (k,m) . G (m,n)
            let at = transpose(&va.data, m, k);
            let gb = Array {
                shape: vec![k, n],
                data: mat_mat(&at, k, m, &g.data, n),
            };
            (ga, gb)
        }
        (1, 2) => {
            let k = va.shape[0];
            let n = vb.shape[1];
            let bt = transpose(&vb.data, k, n);
            let ga = Array::vector(mat_mat(&g.data, 1, n, &bt, k));
            // dB = outer(a, g)
            let mut gb = vec![0.0; k * n];
            for i in 0..k {
                for j in 0..n {
                    gb[i * n + j] = va.data[i] * g.data[j];
                }
            }
            (
                ga,
                Array {
                    shape: vec![k, n],
                    data: gb,
                },
            )
        }
        (2, 1) => {
            let (m, k) = (va.shape[0], va.shape[1]);
            // dA = outer(g, b)
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..k {
                    ga[i * k + j] = g.data[i] * vb.data[j];
                }
            }
            // dB = A^T g
            let mut gb = vec![0.0; k];
            for i in 0..m {
                for j in 0..k {
                    gb[j] += va.data[i * k + j] * g.data[i];
                }
            }
            (
                Array {
                    shape: vec![m, k],
                    data: ga,
                },
                Array::vector(gb),
            )
        }
        (1, 1) => {
            let gs = g.data[0];
            (
                Array::vector(vb.data.iter().map(|&x| gs * x).collect()),
                Array::vector(va.data.iter().map(|&x| gs * x).collect()),
            )
        }
        _ => unreachable!("matmul validated ranks on the forward pass"),
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

// ============================================================================
// Tests
// ============================================================================
