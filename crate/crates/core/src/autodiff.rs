//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] owns every intermediate value. Operations return lightweight
//! [`Var`] handles that index into the tape; [`Tape::backward`] walks the
//! recorded nodes in reverse creation order, which is a valid topological
//! order because an operation can only consume values that already exist.
//!
//! Arrays are rank 0 (scalars), 1 or 2. Axis reductions and matrix products
//! require rank 2. The only implicit broadcasting is scalar-with-array;
//! row-vector broadcasting goes through the explicit [`Tape::add_row`] and
//! [`Tape::mul_row`].

use std::ops::Range;

use crate::error::{Error, Result};

/// Stand-in for log(0) that keeps every value finite.
pub const LOG_ZERO: f64 = -1.0e30;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "array",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Array::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Array {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Array::matrix(rows.len(), cols, rows.concat())
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// (rows, cols) of a rank-2 array.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Some((r, c)),
            _ => None,
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().map_or(1, |(r, _)| r)
    }

    pub fn cols(&self) -> usize {
        self.dims2().map_or(self.data.len(), |(_, c)| c)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Population (divide-by-N) variance.
    Var,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LogSumExp(Var, usize),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<Option<usize>>),
    Reduce {
        src: Var,
        axis: usize,
        kind: Reduction,
        mask: Option<Vec<bool>>,
    },
    SumAll(Var),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

fn need2(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    a.dims2().ok_or_else(|| Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: vec![],
    })
}

fn check_axis(op: &'static str, a: &Array, axis: usize) -> Result<(usize, usize)> {
    let dims = need2(op, a)?;
    if axis > 1 {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: vec![axis],
        });
    }
    Ok(dims)
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
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

/// Indices of the lanes of a rank-2 array along `axis`: each lane is the
/// set of flat indices a reduction over `axis` collapses.
fn lanes(rows: usize, cols: usize, axis: usize) -> (usize, usize, impl Fn(usize, usize) -> usize) {
    // lane l, position p -> flat index
    let (n_lanes, lane_len) = if axis == 0 { (cols, rows) } else { (rows, cols) };
    let idx = move |l: usize, p: usize| if axis == 0 { p * cols + l } else { l * cols + p };
    (n_lanes, lane_len, idx)
}

fn softmax_lanes(x: &Array, axis: usize, log: bool) -> Array {
    let (r, c) = x.dims2().expect("rank checked");
    let (n, len, idx) = lanes(r, c, axis);
    let mut out = vec![0.0; x.len()];
    for l in 0..n {
        let max = (0..len).map(|p| x.data[idx(l, p)]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..len).map(|p| (x.data[idx(l, p)] - max).exp()).sum();
        let lse = max + sum.ln();
        for p in 0..len {
            let i = idx(l, p);
            out[i] = if log { x.data[i] - lse } else { (x.data[i] - lse).exp() };
        }
    }
    Array {
        shape: x.shape.clone(),
        data: out,
    }
}

fn reduced_shape(r: usize, c: usize, axis: usize) -> Vec<usize> {
    if axis == 0 {
        vec![1, c]
    } else {
        vec![r, 1]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// participated in the graph and requires a gradient.
    pub fn grad(&self, v: Var) -> Option<Array> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Array {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let a = &self.nodes[x.0].value;
        let value = Array {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(name, value, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = need2("matmul", av)?;
        let (k2, m) = need2("matmul", bv)?;
        if k != k2 {
            return Err(mismatch("matmul", av, bv));
        }
        let data = matmul_raw(&av.data, &bv.data, n, k, m);
        self.push("matmul", Array { shape: vec![n, m], data }, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = need2("transpose", xv)?;
        let data = transpose_raw(&xv.data, r, c);
        self.push("transpose", Array { shape: vec![c, r], data }, Op::Transpose(x), &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let value = if av.shape == bv.shape {
            Array {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        } else if bv.is_scalar() {
            let y = bv.item();
            Array {
                shape: av.shape.clone(),
                data: av.data.iter().map(|&x| f(x, y)).collect(),
            }
        } else if av.is_scalar() {
            let x = av.item();
            Array {
                shape: bv.shape.clone(),
                data: bv.data.iter().map(|&y| f(x, y)).collect(),
            }
        } else {
            return Err(mismatch(name, av, bv));
        };
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data.iter().any(|&v| v == 0.0) {
            return Err(Error::DomainViolation("div"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("add_const", x, |v| v + c, Op::AddConst(x))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        m: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (mv, rv) = (self.value(m), self.value(row));
        let (_, c) = need2(name, mv)?;
        if rv.shape != [1, c] {
            return Err(mismatch(name, mv, rv));
        }
        let data = mv
            .data
            .chunks(c)
            .flat_map(|r| r.iter().zip(&rv.data).map(|(&x, &y)| f(x, y)))
            .collect();
        let value = Array {
            shape: mv.shape.clone(),
            data,
        };
        self.push(name, value, op, &[m, row])
    }

    /// Adds a `1 × C` row to every row of an `R × C` matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", m, row, |x, y| x + y, Op::AddRow(m, row))
    }

    /// Multiplies every row of an `R × C` matrix elementwise by a `1 × C` row.
    pub fn mul_row(&mut self, m: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", m, row, |x, y| x * y, Op::MulRow(m, row))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::DomainViolation("leaky_relu alpha"));
        }
        self.map(
            "leaky_relu",
            x,
            |v| if v < 0.0 { alpha * v } else { v },
            Op::LeakyRelu(x, alpha),
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data.iter().any(|&v| v <= 0.0) {
            return Err(Error::DomainViolation("log"));
        }
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data.iter().any(|&v| v <= 0.0) {
            return Err(Error::DomainViolation("sqrt"));
        }
        self.map("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.value(x), axis)?;
        let value = softmax_lanes(self.value(x), axis, false);
        self.push("softmax", value, Op::Softmax(x, axis), &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("log_softmax", self.value(x), axis)?;
        let value = softmax_lanes(self.value(x), axis, true);
        self.push("log_softmax", value, Op::LogSoftmax(x, axis), &[x])
    }

    /// log Σ exp along `axis`; the reduced axis keeps length 1.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = check_axis("logsumexp", xv, axis)?;
        let (n, len, idx) = lanes(r, c, axis);
        let data = (0..n)
            .map(|l| {
                let max = (0..len).map(|p| xv.data[idx(l, p)]).fold(f64::NEG_INFINITY, f64::max);
                max + (0..len).map(|p| (xv.data[idx(l, p)] - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let value = Array {
            shape: reduced_shape(r, c, axis),
            data,
        };
        self.push("logsumexp", value, Op::LogSumExp(x, axis), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::Dimension("concat of nothing".into()))?;
        let (r0, c0) = check_axis("concat", self.value(*first), axis)?;
        let mut total = 0;
        for p in parts {
            let pv = self.value(*p);
            let (r, c) = need2("concat", pv)?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(mismatch("concat", self.value(*first), pv));
            }
            total += if axis == 0 { r } else { c };
        }
        let value = if axis == 0 {
            let mut data = Vec::with_capacity(total * c0);
            for p in parts {
                data.extend_from_slice(&self.value(*p).data);
            }
            Array {
                shape: vec![total, c0],
                data,
            }
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(i));
                }
            }
            Array {
                shape: vec![r0, total],
                data,
            }
        };
        self.push("concat", value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// General gather: `out.flat[i] = x.flat[index[i]]`, or `fill` where the
    /// index is `None`. Slicing, row selection, reshaping, unfolding and
    /// shifting are all expressed through this.
    pub fn gather(
        &mut self,
        x: Var,
        index: Vec<Option<usize>>,
        shape: Vec<usize>,
        fill: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != index.len() || shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: shape,
                right: vec![index.len()],
            });
        }
        if index.iter().flatten().any(|&i| i >= xv.len()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: xv.shape.clone(),
                right: vec![index.iter().flatten().copied().max().unwrap_or(0)],
            });
        }
        let data = index.iter().map(|i| i.map_or(fill, |i| xv.data[i])).collect();
        self.push("gather", Array { shape, data }, Op::Gather(x, index), &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = check_axis("slice", xv, axis)?;
        let limit = if axis == 0 { r } else { c };
        if range.start > range.end || range.end > limit {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: xv.shape.clone(),
                right: vec![range.start, range.end],
            });
        }
        let (index, shape): (Vec<_>, _) = if axis == 0 {
            (
                (range.start * c..range.end * c).map(Some).collect(),
                vec![range.len(), c],
            )
        } else {
            (
                (0..r)
                    .flat_map(|i| range.clone().map(move |j| Some(i * c + j)))
                    .collect(),
                vec![r, range.len()],
            )
        };
        self.gather(x, index, shape, 0.0)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (_, c) = need2("gather_rows", self.value(x))?;
        let index = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| Some(r * c + j)))
            .collect();
        self.gather(x, index, vec![rows.len(), c], 0.0)
    }

    /// Inverse of [`Tape::gather_rows`] for distinct targets: row `i` of `x`
    /// lands at row `rows[i]` of a `total`-row output; other rows are zero.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (r, c) = need2("scatter_rows", self.value(x))?;
        if r != rows.len() || rows.iter().any(|&t| t >= total) {
            return Err(Error::Dimension(format!(
                "scatter of {r} rows into {total} rows"
            )));
        }
        let mut source = vec![None; total];
        for (i, &t) in rows.iter().enumerate() {
            source[t] = Some(i);
        }
        let index = source
            .iter()
            .flat_map(|s| (0..c).map(move |j| s.map(|i| i * c + j)))
            .collect();
        self.gather(x, index, vec![total, c], 0.0)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        self.gather(x, (0..n).map(Some).collect(), shape, 0.0)
    }

    /// Sliding windows over rows: output row `t` is the row-major
    /// concatenation of input rows `stride·t .. stride·t + kernel`.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (r, c) = need2("unfold", self.value(x))?;
        if kernel == 0 || stride == 0 || r < kernel {
            return Err(Error::Dimension(format!(
                "unfold kernel {kernel} stride {stride} over {r} rows"
            )));
        }
        let out_rows = (r - kernel) / stride + 1;
        let index = (0..out_rows)
            .flat_map(|t| (t * stride * c..(t * stride + kernel) * c).map(Some))
            .collect();
        self.gather(x, index, vec![out_rows, kernel * c], 0.0)
    }

    pub fn reduce(&mut self, x: Var, axis: usize, kind: Reduction) -> Result<Var> {
        self.reduce_impl(x, axis, kind, None)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_impl(x, axis, Reduction::Mean, None)
    }

    pub fn reduce_var(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_impl(x, axis, Reduction::Var, None)
    }

    /// Reduction over `axis` restricted to positions where `mask` is true.
    /// `mask` has one entry per position along the reduced axis.
    pub fn masked_reduce(
        &mut self,
        x: Var,
        axis: usize,
        mask: &[bool],
        kind: Reduction,
    ) -> Result<Var> {
        self.reduce_impl(x, axis, kind, Some(mask.to_vec()))
    }

    fn reduce_impl(
        &mut self,
        x: Var,
        axis: usize,
        kind: Reduction,
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = check_axis("reduce", xv, axis)?;
        let (n, len, idx) = lanes(r, c, axis);
        if let Some(m) = &mask {
            if m.len() != len {
                return Err(Error::ShapeMismatch {
                    op: "masked_reduce",
                    left: xv.shape.clone(),
                    right: vec![m.len()],
                });
            }
        }
        let keep = |p: usize| mask.as_ref().is_none_or(|m| m[p]);
        let count = (0..len).filter(|&p| keep(p)).count();
        if count == 0 {
            return Err(Error::EmptySequence);
        }
        let data = (0..n)
            .map(|l| {
                let sum: f64 = (0..len).filter(|&p| keep(p)).map(|p| xv.data[idx(l, p)]).sum();
                match kind {
                    Reduction::Sum => sum,
                    Reduction::Mean => sum / count as f64,
                    Reduction::Var => {
                        let mean = sum / count as f64;
                        (0..len)
                            .filter(|&p| keep(p))
                            .map(|p| (xv.data[idx(l, p)] - mean).powi(2))
                            .sum::<f64>()
                            / count as f64
                    }
                }
            })
            .collect();
        let value = Array {
            shape: reduced_shape(r, c, axis),
            data,
        };
        self.push("reduce", value, Op::Reduce { src: x, axis, kind, mask }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push("sum", Array::scalar(s), Op::SumAll(x), &[x])
    }

    /// Runs the backward pass from a scalar root. Gradients are then
    /// available through [`Tape::grad`]. A tape supports a single pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only expose gradients where they are meaningful.
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        // Accumulates an elementwise contribution, summing when `v` was the
        // broadcast scalar side of a binary op.
        fn broadcast_acc(slot: &mut [f64], contrib: impl Iterator<Item = f64>) {
            if slot.len() == 1 {
                slot[0] += contrib.sum::<f64>();
            } else {
                for (s, c) in slot.iter_mut().zip(contrib) {
                    *s += c;
                }
            }
        }
        // Value of `v` at flat output position `k` (handles scalar broadcast).
        let at = |v: Var, k: usize| {
            let a = val(v);
            if a.len() == 1 {
                a.data[0]
            } else {
                a.data[k]
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = val(*a).dims2().unwrap();
                let m = val(*b).cols();
                if needs(*a) {
                    let bt = transpose_raw(&val(*b).data, k, m);
                    let da = matmul_raw(g, &bt, n, m, k);
                    acc(*a, &mut |s| s.iter_mut().zip(&da).for_each(|(s, d)| *s += d));
                }
                if needs(*b) {
                    let at_ = transpose_raw(&val(*a).data, n, k);
                    let db = matmul_raw(&at_, g, k, n, m);
                    acc(*b, &mut |s| s.iter_mut().zip(&db).for_each(|(s, d)| *s += d));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2().unwrap();
                let d = transpose_raw(g, c, r);
                acc(*x, &mut |s| s.iter_mut().zip(&d).for_each(|(s, d)| *s += d));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| broadcast_acc(s, g.iter().copied()));
                acc(*b, &mut |s| broadcast_acc(s, g.iter().copied()));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| broadcast_acc(s, g.iter().copied()));
                acc(*b, &mut |s| broadcast_acc(s, g.iter().map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                acc(a, &mut |s| {
                    broadcast_acc(s, g.iter().enumerate().map(|(k, gk)| gk * at(b, k)))
                });
                acc(b, &mut |s| {
                    broadcast_acc(s, g.iter().enumerate().map(|(k, gk)| gk * at(a, k)))
                });
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                acc(a, &mut |s| {
                    broadcast_acc(s, g.iter().enumerate().map(|(k, gk)| gk / at(b, k)))
                });
                acc(b, &mut |s| {
                    broadcast_acc(
                        s,
                        g.iter().enumerate().map(|(k, gk)| {
                            let bk = at(b, k);
                            -gk * at(a, k) / (bk * bk)
                        }),
                    )
                });
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, gk)| *s += gk * c));
            }
            Op::AddConst(x) => {
                acc(*x, &mut |s| s.iter_mut().zip(g).for_each(|(s, gk)| *s += gk));
            }
            Op::AddRow(m, row) => {
                let c = val(*m).cols();
                acc(*m, &mut |s| s.iter_mut().zip(g).for_each(|(s, gk)| *s += gk));
                acc(*row, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % c] += gk;
                    }
                });
            }
            Op::MulRow(m, row) => {
                let c = val(*m).cols();
                let (mv, rv) = (val(*m), val(*row));
                acc(*m, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k] += gk * rv.data[k % c];
                    }
                });
                acc(*row, &mut |s| {
                    for (k, gk) in g.iter().enumerate() {
                        s[k % c] += gk * mv.data[k];
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |s| {
                for ((s, gk), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *s += gk * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |s| {
                for ((s, gk), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *s += gk * y * (1.0 - y);
                }
            }),
            Op::LeakyRelu(x, alpha) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((s, gk), xk) in s.iter_mut().zip(g).zip(&xv.data) {
                        *s += if *xk < 0.0 { gk * alpha } else { *gk };
                    }
                })
            }
            Op::Exp(x) => acc(*x, &mut |s| {
                for ((s, gk), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *s += gk * y;
                }
            }),
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &mut |s| {
                    for ((s, gk), xk) in s.iter_mut().zip(g).zip(&xv.data) {
                        *s += gk / xk;
                    }
                })
            }
            Op::Sqrt(x) => acc(*x, &mut |s| {
                for ((s, gk), y) in s.iter_mut().zip(g).zip(&out.data) {
                    *s += gk * 0.5 / y;
                }
            }),
            Op::Softmax(x, axis) => {
                let (r, c) = out.dims2().unwrap();
                let (n, len, idx) = lanes(r, c, *axis);
                acc(*x, &mut |s| {
                    for l in 0..n {
                        let dot: f64 = (0..len).map(|p| g[idx(l, p)] * out.data[idx(l, p)]).sum();
                        for p in 0..len {
                            let k = idx(l, p);
                            s[k] += out.data[k] * (g[k] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(x, axis) => {
                let (r, c) = out.dims2().unwrap();
                let (n, len, idx) = lanes(r, c, *axis);
                acc(*x, &mut |s| {
                    for l in 0..n {
                        let gsum: f64 = (0..len).map(|p| g[idx(l, p)]).sum();
                        for p in 0..len {
                            let k = idx(l, p);
                            s[k] += g[k] - out.data[k].exp() * gsum;
                        }
                    }
                })
            }
            Op::LogSumExp(x, axis) => {
                let xv = val(*x);
                let (r, c) = xv.dims2().unwrap();
                let (n, len, idx) = lanes(r, c, *axis);
                acc(*x, &mut |s| {
                    for l in 0..n {
                        for p in 0..len {
                            let k = idx(l, p);
                            s[k] += g[l] * (xv.data[k] - out.data[l]).exp();
                        }
                    }
                })
            }
            Op::Concat(parts, axis) => {
                let total_cols = out.cols();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = val(*p).dims2().unwrap();
                    let off = offset;
                    acc(*p, &mut |s| {
                        if *axis == 0 {
                            let base = off * pc;
                            s.iter_mut()
                                .zip(&g[base..base + pr * pc])
                                .for_each(|(s, gk)| *s += gk);
                        } else {
                            for i in 0..pr {
                                for j in 0..pc {
                                    s[i * pc + j] += g[i * total_cols + off + j];
                                }
                            }
                        }
                    });
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Gather(x, index) => acc(*x, &mut |s| {
                for (gk, i) in g.iter().zip(index) {
                    if let Some(i) = i {
                        s[*i] += gk;
                    }
                }
            }),
            Op::Reduce {
                src,
                axis,
                kind,
                mask,
            } => {
                let xv = val(*src);
                let (r, c) = xv.dims2().unwrap();
                let (n, len, idx) = lanes(r, c, *axis);
                let keep = |p: usize| mask.as_ref().is_none_or(|m| m[p]);
                let count = (0..len).filter(|&p| keep(p)).count() as f64;
                acc(*src, &mut |s| {
                    for l in 0..n {
                        let mean = match kind {
                            Reduction::Var => {
                                (0..len).filter(|&p| keep(p)).map(|p| xv.data[idx(l, p)]).sum::<f64>()
                                    / count
                            }
                            _ => 0.0,
                        };
                        for p in (0..len).filter(|&p| keep(p)) {
                            let k = idx(l, p);
                            s[k] += match kind {
                                Reduction::Sum => g[l],
                                Reduction::Mean => g[l] / count,
                                Reduction::Var => g[l] * 2.0 * (xv.data[k] - mean) / count,
                            };
                        }
                    }
                })
            }
            Op::SumAll(x) => acc(*x, &mut |s| s.iter_mut().for_each(|s| *s += g[0])),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
