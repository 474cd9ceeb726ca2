//! Append-only operation tape and the reverse sweep over it.
//!
//! Every primitive evaluates eagerly, stores its output value on the tape
//! and remembers its inputs. `backward` walks the tape once in reverse
//! order. Nodes that do not depend on any leaf are marked constant and
//! skipped during the sweep.

use std::rc::Rc;

use crate::{AdError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    SumLast(Var),
    MaxLast(Var, Vec<usize>),
    Tanh(Var),
    Relu(Var),
    TanhRatio(Var),
    SoftmaxLast(Var),
    L1Last(Var),
    L2Last(Var),
    RowNormalize(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    RepeatRows(Var, usize),
    SegmentSum(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations for a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zero-filled when the output does not depend on `v`.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AdError {
    AdError::ShapeMismatch {
        op,
        detail: format!("{a:?} vs {b:?}"),
    }
}

fn replace_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        Vec::new()
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AdError> {
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AdError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, AdError> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, out, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, AdError> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(name, out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + b` with `b` (shape `[C]`) broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        let vb = self.value(b);
        let c = vx.cols();
        if vb.len() != c || vb.shape().len() > 1 {
            return Err(mismatch("add_row", vx.shape(), vb.shape()));
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, bias) in row.iter_mut().zip(vb.data()) {
                *o += bias;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(x, b), &[x, b])
    }

    /// `x * c` with one scalar of `c` per row of `x`, broadcast across columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        let vc = self.value(c);
        if vc.len() != vx.rows() {
            return Err(mismatch("mul_col", vx.shape(), vc.shape()));
        }
        let cols = vx.cols();
        let mut data = vx.data().to_vec();
        for (row, s) in data.chunks_mut(cols).zip(vc.data()) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("mul_col", out, Op::MulCol(x, c), &[x, c])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, AdError> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var, AdError> {
        self.map("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, AdError> {
        self.scale(x, -1.0)
    }

    /// Matrix product of `a` (rows × K, leading axes flattened) and a 2-D `b` (K × C).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let va = self.value(a);
        let vb = self.value(b);
        if vb.shape().len() != 2 || va.shape().is_empty() || va.cols() != vb.shape()[0] {
            return Err(mismatch("matmul", va.shape(), vb.shape()));
        }
        let (r, k, c) = (va.rows(), va.cols(), vb.cols());
        let mut data = vec![0.0; r * c];
        matmul_acc(va.data(), vb.data(), &mut data, r, k, c);
        let out = Tensor::new(replace_last(va.shape(), c), data)?;
        self.push("matmul", out, Op::Matmul(a, b), &[a, b])
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        let first = parts.first().ok_or(AdError::ShapeMismatch {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let lead = drop_last(self.shape(*first));
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if drop_last(s) != lead || s.is_empty() {
                return Err(mismatch("concat", self.shape(*first), s));
            }
            total += self.value(*p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let vx = self.value(x);
        if start + len > vx.cols() || vx.shape().is_empty() {
            return Err(AdError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("{start}..{} of {:?}", start + len, vx.shape()),
            });
        }
        let mut data = Vec::with_capacity(vx.rows() * len);
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let out = Tensor::new(replace_last(vx.shape(), len), data)?;
        self.push("slice_cols", out, Op::SliceCols(x, start), &[x])
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, AdError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        let data = (0..vx.rows()).map(|r| vx.row(r).iter().sum()).collect();
        let out = Tensor::new(drop_last(vx.shape()), data)?;
        self.push("sum_last", out, Op::SumLast(x), &[x])
    }

    /// Maximum over the last axis; ties resolve to the first maximal entry.
    pub fn max_last(&mut self, x: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        if vx.cols() == 0 {
            return Err(AdError::ShapeMismatch {
                op: "max_last",
                detail: "empty axis".into(),
            });
        }
        let mut data = Vec::with_capacity(vx.rows());
        let mut arg = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let out = Tensor::new(drop_last(vx.shape()), data)?;
        self.push("max_last", out, Op::MaxLast(x, arg), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AdError> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AdError> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `tanh(x) / x`, continuously extended with value 1 at 0.
    pub fn tanh_ratio(&mut self, x: Var) -> Result<Var, AdError> {
        self.map("tanh_ratio", x, tanh_ratio, Op::TanhRatio(x))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(vx.len());
        for r in 0..vx.rows() {
            softmax_into(vx.row(r), &mut data);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax_last", out, Op::SoftmaxLast(x), &[x])
    }

    /// L1 norm over the last axis.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        let data = (0..vx.rows()).map(|r| vx.row(r).iter().map(|v| v.abs()).sum()).collect();
        let out = Tensor::new(drop_last(vx.shape()), data)?;
        self.push("l1_norm", out, Op::L1Last(x), &[x])
    }

    /// Euclidean norm over the last axis. The gradient at the zero vector is zero.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        let data = (0..vx.rows())
            .map(|r| vx.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::new(drop_last(vx.shape()), data)?;
        self.push("l2_norm", out, Op::L2Last(x), &[x])
    }

    /// Divides each row by its sum. Rows summing to zero stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var, AdError> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(cols) {
            let z: f64 = row.iter().sum();
            if z != 0.0 {
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("row_normalize", out, Op::RowNormalize(x), &[x])
    }

    /// Selects rows of `x` (leading axes flattened) by index; output is `[idx.len(), C]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var, AdError> {
        let vx = self.value(x);
        let c = vx.cols();
        let rows = vx.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx.iter() {
            if r >= rows {
                return Err(AdError::ShapeMismatch {
                    op: "gather_rows",
                    detail: format!("row {r} out of {rows}"),
                });
            }
            data.extend_from_slice(vx.row(r));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.push("gather_rows", out, Op::GatherRows(x, idx), &[x])
    }

    /// Repeats each row `n` times consecutively: `[R, C] -> [R*n, C]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var, AdError> {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = Vec::with_capacity(vx.len() * n);
        for r in 0..vx.rows() {
            for _ in 0..n {
                data.extend_from_slice(vx.row(r));
            }
        }
        let out = Tensor::new(vec![vx.rows() * n, c], data)?;
        self.push("repeat_rows", out, Op::RepeatRows(x, n), &[x])
    }

    /// Sums consecutive groups of `n` rows: `[R*n, C] -> [R, C]`.
    pub fn segment_sum(&mut self, x: Var, n: usize) -> Result<Var, AdError> {
        let vx = self.value(x);
        if n == 0 || !vx.rows().is_multiple_of(n) {
            return Err(AdError::ShapeMismatch {
                op: "segment_sum",
                detail: format!("{} rows not divisible by {n}", vx.rows()),
            });
        }
        let c = vx.cols();
        let groups = vx.rows() / n;
        let mut data = vec![0.0; groups * c];
        for r in 0..vx.rows() {
            let g = r / n;
            for (o, v) in data[g * c..(g + 1) * c].iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![groups, c], data)?;
        self.push("segment_sum", out, Op::SegmentSum(x, n), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AdError> {
        let out = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, AdError> {
        let out_shape = self.shape(output);
        if self.value(output).len() != 1 {
            return Err(AdError::NotScalar {
                shape: out_shape.to_vec(),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = self.value(*b).len();
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| {
                    for row in g.chunks(c) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::MulCol(x, c) => {
                let vx = self.value(*x);
                let vc = self.value(*c).data();
                let cols = vx.cols();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), s) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(vc) {
                        axpy(drow, grow, *s);
                    }
                });
                self.acc(grads, *c, |d| {
                    for (r, dv) in d.iter_mut().enumerate() {
                        *dv += dot(&g[r * cols..(r + 1) * cols], vx.row(r));
                    }
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, |d| axpy(d, g, *s)),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::Matmul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (r, k, c) = (va.rows(), va.cols(), vb.cols());
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for kk in 0..k {
                            d[i * k + kk] += dot(grow, &vb.data()[kk * c..(kk + 1) * c]);
                        }
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..r {
                        let grow = &g[i * c..(i + 1) * c];
                        for kk in 0..k {
                            let s = va.data()[i * k + kk];
                            if s != 0.0 {
                                axpy(&mut d[kk * c..(kk + 1) * c], grow, s);
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc(grads, *p, |d| {
                        for (r, drow) in d.chunks_mut(w).enumerate() {
                            axpy(drow, &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let w = node.value.cols();
                let full = self.value(*x).cols();
                self.acc(grads, *x, |d| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        axpy(&mut d[r * full + start..r * full + start + w], grow, 1.0);
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::SumLast(x) => {
                let c = self.value(*x).cols();
                self.acc(grads, *x, |d| {
                    for (drow, gv) in d.chunks_mut(c).zip(g) {
                        drow.iter_mut().for_each(|v| *v += gv);
                    }
                });
            }
            Op::MaxLast(x, arg) => {
                let c = self.value(*x).cols();
                self.acc(grads, *x, |d| {
                    for (r, (a, gv)) in arg.iter().zip(g).enumerate() {
                        d[r * c + a] += gv;
                    }
                });
            }
            Op::Tanh(x) => self.acc(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if vx[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::TanhRatio(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * tanh_ratio_deriv(vx[i]);
                    }
                });
            }
            Op::SoftmaxLast(x) => {
                let c = node.value.cols();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::L1Last(x) => {
                let vx = self.value(*x);
                let c = vx.cols();
                self.acc(grads, *x, |d| {
                    for (r, gv) in g.iter().enumerate() {
                        for j in 0..c {
                            let v = vx.data()[r * c + j];
                            if v != 0.0 {
                                d[r * c + j] += gv * v.signum();
                            }
                        }
                    }
                });
            }
            Op::L2Last(x) => {
                let vx = self.value(*x);
                let c = vx.cols();
                self.acc(grads, *x, |d| {
                    for (r, (gv, nrm)) in g.iter().zip(y).enumerate() {
                        if *nrm > 0.0 {
                            axpy(&mut d[r * c..(r + 1) * c], vx.row(r), gv / nrm);
                        }
                    }
                });
            }
            Op::RowNormalize(x) => {
                let vx = self.value(*x);
                let c = vx.cols();
                self.acc(grads, *x, |d| {
                    for r in 0..vx.rows() {
                        let z: f64 = vx.row(r).iter().sum();
                        if z == 0.0 {
                            continue;
                        }
                        let grow = &g[r * c..(r + 1) * c];
                        let yrow = &y[r * c..(r + 1) * c];
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            d[r * c + j] += (grow[j] - s) / z;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        axpy(&mut d[r * c..(r + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                });
            }
            Op::RepeatRows(x, n) => {
                let c = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (k, grow) in g.chunks(c).enumerate() {
                        let r = k / n;
                        axpy(&mut d[r * c..(r + 1) * c], grow, 1.0);
                    }
                });
            }
            Op::SegmentSum(x, n) => {
                let c = node.value.cols();
                self.acc(grads, *x, |d| {
                    for (k, drow) in d.chunks_mut(c).enumerate() {
                        let r = k / n;
                        axpy(drow, &g[r * c..(r + 1) * c], 1.0);
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[r×c] += a[r×k] · b[k×c]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for kk in 0..k {
            let s = a[i * k + kk];
            if s != 0.0 {
                axpy(orow, &b[kk * c..(kk + 1) * c], s);
            }
        }
    }
}

/// Numerically stable softmax of one row, appended to `out`.
pub fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut z = 0.0;
    for v in row {
        let e = (v - m).exp();
        z += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v /= z;
    }
}

pub fn tanh_ratio(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        // series: 1 - x^2/3 + 2x^4/15
        let x2 = x * x;
        1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0
    } else {
        x.tanh() / x
    }
}

fn tanh_ratio_deriv(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        -2.0 * x / 3.0 + 8.0 * x * x2 / 15.0
    } else {
        let t = x.tanh();
        (x * (1.0 - t * t) - t) / (x * x)
    }
}
