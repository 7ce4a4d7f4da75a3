//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the nodes in reverse and accumulates adjoints. Index selections
//! (gathers, group maxima) record their indices during the forward pass and
//! are constants of the backward pass.

use std::fmt;

use super::NetError;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct ValueGrid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for ValueGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ValueGrid({}x{}, {:?})", self.rows, self.cols, &self.data[..self.data.len().min(8)])
    }
}

impl ValueGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "value count must equal rows*cols");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(n, 1, data)
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        Self::from_vec(rows.len(), C, rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, o: &ValueGrid) {
        debug_assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> ValueGrid {
        ValueGrid { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    fn zip(&self, o: &ValueGrid, f: impl Fn(f64, f64) -> f64) -> ValueGrid {
        debug_assert_eq!(self.shape(), o.shape());
        ValueGrid { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&o.data).map(|(a, b)| f(*a, *b)).collect() }
    }

    pub fn transpose(&self) -> ValueGrid {
        let mut out = ValueGrid::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · o`
    pub fn matmul(&self, o: &ValueGrid) -> ValueGrid {
        assert_eq!(self.cols, o.rows, "matmul inner dimensions");
        let mut out = ValueGrid::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * o.cols..(i + 1) * o.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &o.data[k * o.cols..(k + 1) * o.cols];
                for (dst, b) in orow.iter_mut().zip(brow) {
                    *dst += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · o`
    fn t_matmul(&self, o: &ValueGrid) -> ValueGrid {
        assert_eq!(self.rows, o.rows);
        let mut out = ValueGrid::zeros(self.cols, o.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = o.row(r);
            for (k, a) in arow.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[k * o.cols..(k + 1) * o.cols];
                for (dst, b) in orow.iter_mut().zip(brow) {
                    *dst += a * b;
                }
            }
        }
        out
    }

    /// `self · oᵀ`
    fn matmul_t(&self, o: &ValueGrid) -> ValueGrid {
        assert_eq!(self.cols, o.cols);
        let mut out = ValueGrid::zeros(self.rows, o.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..o.rows {
                out.data[i * o.rows + j] = a.iter().zip(o.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// Column means over rows.
    pub fn column_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter grid in a [`super::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    SmoothL1(Var),
    WrapAngle(Var),
    RowNorm(Var),
    SumAll(Var),
    SumSquares(Var),
    AddN(Vec<Var>),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GroupMax { x: Var, argmax: Vec<usize> },
    CosineSim(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxCol(Var),
    ScaleRows(Var, Var),
    SubRow(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: ValueGrid,
    op: Op,
}

/// Per-node adjoints after a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<ValueGrid>>,
}

impl Gradients {
    /// Adjoint of `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&ValueGrid> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ValueGrid, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ValueGrid {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).as_scalar()
    }

    pub fn constant(&mut self, value: ValueGrid) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId, value: &ValueGrid) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    /// Ids of parameter leaves together with their nodes.
    pub fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1×C` bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        assert_eq!(bias.cols, self.value(x).cols);
        let mut out = self.value(x).clone();
        let c = out.cols;
        for row in out.data.chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// Gradient passes only where the input lies strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise Huber-style smooth L1 with unit transition.
    pub fn smooth_l1(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 });
        self.push(v, Op::SmoothL1(a))
    }

    /// Wraps into (−π, π]; the derivative is taken as 1.
    pub fn wrap_angle(&mut self, a: Var) -> Var {
        let v = self.value(a).map(crate::geom::wrap_angle);
        self.push(v, Op::WrapAngle(a))
    }

    /// Euclidean norm of each row, `N×C → N×1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        self.push(ValueGrid::column(data), Op::RowNorm(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(ValueGrid::scalar(s), Op::SumAll(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|v| v * v).sum();
        self.push(ValueGrid::scalar(s), Op::SumSquares(a))
    }

    /// Sum of equally shaped nodes, in the given order.
    pub fn add_n(&mut self, xs: Vec<Var>) -> Var {
        assert!(!xs.is_empty());
        let mut acc = self.value(xs[0]).clone();
        for x in &xs[1..] {
            acc.add_assign(self.value(*x));
        }
        self.push(acc, Op::AddN(xs))
    }

    /// Row selection: output row `r` is input row `idx[r]`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * x.cols);
        for &i in &idx {
            data.extend_from_slice(x.row(i));
        }
        let v = ValueGrid::from_vec(idx.len(), x.cols, data);
        self.push(v, Op::Gather(a, idx))
    }

    pub fn concat_cols(&mut self, xs: Vec<Var>) -> Var {
        let rows = self.value(xs[0]).rows;
        let cols: usize = xs.iter().map(|x| self.value(*x).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for x in &xs {
                let v = self.value(*x);
                assert_eq!(v.rows, rows, "concat_cols row mismatch");
                data.extend_from_slice(v.row(r));
            }
        }
        self.push(ValueGrid::from_vec(rows, cols, data), Op::ConcatCols(xs))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.cols);
        let mut data = Vec::with_capacity(x.rows * (end - start));
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let v = ValueGrid::from_vec(x.rows, end - start, data);
        self.push(v, Op::SliceCols(a, start, end))
    }

    /// Column-wise maximum over each group of row indices. Ties resolve to
    /// the first listed row.
    pub fn group_max(&mut self, a: Var, groups: &[Vec<usize>]) -> Var {
        let x = self.value(a);
        let cols = x.cols;
        let mut data = Vec::with_capacity(groups.len() * cols);
        let mut argmax = Vec::with_capacity(groups.len() * cols);
        for g in groups {
            assert!(!g.is_empty(), "empty pooling group");
            for c in 0..cols {
                let mut best = g[0];
                let mut bv = x.get(best, c);
                for &r in &g[1..] {
                    let v = x.get(r, c);
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                data.push(bv);
                argmax.push(best);
            }
        }
        let v = ValueGrid::from_vec(groups.len(), cols, data);
        self.push(v, Op::GroupMax { x: a, argmax })
    }

    /// Max over consecutive blocks of `block` rows.
    pub fn block_max(&mut self, a: Var, block: usize) -> Var {
        let rows = self.value(a).rows;
        assert_eq!(rows % block, 0);
        let groups: Vec<Vec<usize>> = (0..rows / block).map(|g| (g * block..(g + 1) * block).collect()).collect();
        self.group_max(a, &groups)
    }

    /// Pairwise cosine similarity of rows, `A×D, B×D → A×B`.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "cosine_sim feature widths");
        let nx = row_norms_eps(x);
        let ny = row_norms_eps(y);
        let mut dots = x.matmul_t(y);
        for i in 0..x.rows {
            for j in 0..y.rows {
                dots.data[i * y.rows + j] /= nx[i] * ny[j];
            }
        }
        self.push(dots, Op::CosineSim(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows * x.cols, rows * cols);
        let v = ValueGrid::from_vec(rows, cols, x.data.clone());
        self.push(v, Op::Reshape(a))
    }

    /// Softmax over the entries of an `N×1` column.
    pub fn softmax_col(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols, 1);
        let m = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.data.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let v = ValueGrid::column(e.into_iter().map(|v| v / s).collect());
        self.push(v, Op::SoftmaxCol(a))
    }

    /// Multiplies row `i` of `a` by `w[i]` (`w` is `N×1`).
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let (x, wv) = (self.value(a), self.value(w));
        assert_eq!(wv.cols, 1);
        assert_eq!(wv.rows, x.rows);
        let mut out = x.clone();
        for r in 0..x.rows {
            let s = wv.data[r];
            out.data[r * x.cols..(r + 1) * x.cols].iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::ScaleRows(a, w))
    }

    /// Subtracts a `1×C` row from every row of `a`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let (x, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1);
        assert_eq!(rv.cols, x.cols);
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(x.cols) {
            for (o, s) in chunk.iter_mut().zip(&rv.data) {
                *o -= s;
            }
        }
        self.push(out, Op::SubRow(a, row))
    }

    /// Adjoints of every node with respect to the scalar `output`, seeded
    /// with `seed`.
    pub fn backward(&self, output: Var, seed: f64) -> Result<Gradients, NetError> {
        if output.0 >= self.nodes.len() {
            return Err(NetError::NoRecordedGraph);
        }
        if self.value(output).data.len() != 1 {
            return Err(NetError::DimensionMismatch(format!("backward needs a scalar output, got {:?}", self.value(output).shape())));
        }
        let mut grads: Vec<Option<ValueGrid>> = vec![None; output.0 + 1];
        grads[output.0] = Some(ValueGrid::scalar(seed));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &ValueGrid, grads: &mut [Option<ValueGrid>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: ValueGrid| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.value(*b)));
                acc(*b, self.value(*a).t_matmul(g));
            }
            Op::AddBias(x, b) => {
                let mut gb = ValueGrid::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, g.clone());
                acc(*b, gb);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip(self.value(*b), |gv, y| gv * y));
                acc(*b, g.zip(self.value(*a), |gv, x| gv * x));
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip(&node.value, |gv, s| gv * s * (1.0 - s))),
            Op::Ln(a) => acc(*a, g.zip(self.value(*a), |gv, x| gv / x)),
            Op::Clamp(a, lo, hi) => {
                acc(*a, g.zip(self.value(*a), |gv, x| if x > *lo && x < *hi { gv } else { 0.0 }))
            }
            Op::SmoothL1(a) => acc(*a, g.zip(self.value(*a), |gv, x| if x.abs() < 1.0 { gv * x } else { gv * x.signum() })),
            Op::WrapAngle(a) => acc(*a, g.clone()),
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let mut d = ValueGrid::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    let n = node.value.data[r];
                    if n > 0.0 {
                        let s = g.data[r] / n;
                        for c in 0..x.cols {
                            d.data[r * x.cols + c] = s * x.get(r, c);
                        }
                    }
                }
                acc(*a, d);
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                acc(*a, ValueGrid::from_vec(x.rows, x.cols, vec![g.data[0]; x.data.len()]));
            }
            Op::SumSquares(a) => {
                let s = g.data[0];
                acc(*a, self.value(*a).map(|x| 2.0 * s * x));
            }
            Op::AddN(xs) => {
                for x in xs {
                    acc(*x, g.clone());
                }
            }
            Op::Gather(a, idx) => {
                let x = self.value(*a);
                let mut d = ValueGrid::zeros(x.rows, x.cols);
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut d.data[src * x.cols..(src + 1) * x.cols];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for x in xs {
                    let v = self.value(*x);
                    let mut d = ValueGrid::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        d.data[r * v.cols..(r + 1) * v.cols].copy_from_slice(&g.row(r)[offset..offset + v.cols]);
                    }
                    offset += v.cols;
                    acc(*x, d);
                }
            }
            Op::SliceCols(a, start, end) => {
                let x = self.value(*a);
                let mut d = ValueGrid::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    d.data[r * x.cols + start..r * x.cols + end].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::GroupMax { x, argmax } => {
                let xv = self.value(*x);
                let mut d = ValueGrid::zeros(xv.rows, xv.cols);
                for (k, &src) in argmax.iter().enumerate() {
                    let c = k % xv.cols;
                    d.data[src * xv.cols + c] += g.data[k];
                }
                acc(*x, d);
            }
            Op::CosineSim(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let nx = row_norms_eps(x);
                let ny = row_norms_eps(y);
                let cos = &node.value;
                let mut dx = ValueGrid::zeros(x.rows, x.cols);
                let mut dy = ValueGrid::zeros(y.rows, y.cols);
                for i in 0..x.rows {
                    for j in 0..y.rows {
                        let gij = g.data[i * y.rows + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let cij = cos.data[i * y.rows + j];
                        let inv = 1.0 / (nx[i] * ny[j]);
                        let (xi, yj) = (x.row(i), y.row(j));
                        for c in 0..x.cols {
                            dx.data[i * x.cols + c] += gij * (yj[c] * inv - cij * xi[c] / (nx[i] * nx[i]));
                            dy.data[j * y.cols + c] += gij * (xi[c] * inv - cij * yj[c] / (ny[j] * ny[j]));
                        }
                    }
                }
                acc(*a, dx);
                acc(*b, dy);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => {
                let x = self.value(*a);
                acc(*a, ValueGrid::from_vec(x.rows, x.cols, g.data.clone()));
            }
            Op::SoftmaxCol(a) => {
                let s = &node.value;
                let dot: f64 = s.data.iter().zip(&g.data).map(|(p, gv)| p * gv).sum();
                acc(*a, s.zip(g, |p, gv| p * (gv - dot)));
            }
            Op::ScaleRows(a, w) => {
                let (x, wv) = (self.value(*a), self.value(*w));
                let mut dx = g.clone();
                let mut dw = ValueGrid::zeros(wv.rows, 1);
                for r in 0..x.rows {
                    let grow = g.row(r);
                    dw.data[r] = grow.iter().zip(x.row(r)).map(|(a, b)| a * b).sum();
                    dx.data[r * x.cols..(r + 1) * x.cols].iter_mut().for_each(|v| *v *= wv.data[r]);
                }
                acc(*a, dx);
                acc(*w, dw);
            }
            Op::SubRow(a, row) => {
                let mut dr = ValueGrid::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in dr.data.iter_mut().zip(g.row(r)) {
                        *o -= v;
                    }
                }
                acc(*a, g.clone());
                acc(*row, dr);
            }
        }
    }
}

fn row_norms_eps(x: &ValueGrid) -> Vec<f64> {
    (0..x.rows).map(|r| (x.row(r).iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
