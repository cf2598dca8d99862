//! A small reverse-mode autodiff tape over row-major `f32` matrices.
//!
//! Every value is a 2-D [`Mat`]; scalars are `1×1`. A [`Graph`] is built
//! fresh for each forward pass, parameters are bound as leaves, and
//! [`Graph::backward`] returns gradients for every node that requires one.
//! Only the operations the recommender backbone, the denoiser and the
//! hypernetwork need are provided.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f32>;

/// Rows below which a product is accumulated row by row; packing the right
/// operand for a blocked kernel costs more than the multiply itself there.
const SMALL_ROWS: usize = 8;

/// `a · b`, skipping the blocked kernel for short left operands such as a
/// single conditioning row against a weight matrix.
pub fn dot(a: &Mat, b: &Mat) -> Mat {
    let (Some(av), Some(bv)) = (a.as_slice(), b.as_slice()) else {
        return a.dot(b);
    };
    if a.nrows() > SMALL_ROWS || b.ncols() == 0 {
        return a.dot(b);
    }
    let n = b.ncols();
    let mut out = vec![0f32; a.nrows() * n];
    for (arow, orow) in av.chunks_exact(a.ncols().max(1)).zip(out.chunks_exact_mut(n)) {
        for (&x, brow) in arow.iter().zip(bv.chunks_exact(n)) {
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    Mat::from_shape_vec((a.nrows(), n), out).expect("rows × cols values")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// Adds a `n×1` column to every column of a `n×m` matrix.
    AddCol(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f32>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    RepeatRows(Var),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    /// Scalar node whose local gradient w.r.t. its input was computed outside the tape.
    Injected(Var, Mat),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not require one.
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a graph with bound
    /// parameters can be reused for repeated forward passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Constant input; gradients are not tracked.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = dot(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        debug_assert_eq!(self.value(col).ncols(), 1);
        let v = self.value(a) + self.value(col);
        let rg = self.rg(&[a, col]);
        self.push(v, Op::AddCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f32) -> Var {
        let v = self.value(a) + k;
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f32::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f32::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f32) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f32;
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<f32>() / cols;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|e| (e - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::LayerNorm(a, inv_std), rg)
    }

    /// Selects rows of `a` by index (embedding lookup when `a` is a table).
    pub fn gather(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::Gather(a, rows), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    /// Broadcasts a single row to `n` rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let row = self.value(a);
        debug_assert_eq!(row.nrows(), 1);
        let v = row
            .broadcast((n, row.ncols()))
            .expect("repeat_rows: broadcast")
            .to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::RepeatRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Mat::from_elem((1, 1), x.sum() / x.len() as f32);
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Per-row inner product of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.value(a) * self.value(b);
        let v = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::RowDot(a, b), rg)
    }

    /// A scalar loss computed outside the tape. `local_grad` is `∂loss/∂a`.
    pub fn injected_loss(&mut self, a: Var, loss: f32, local_grad: Mat) -> Var {
        assert_eq!(local_grad.dim(), self.value(a).dim(), "injected gradient shape");
        let rg = self.rg(&[a]);
        self.push(Mat::from_elem((1, 1), loss), Op::Injected(a, local_grad), rg)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Mat) -> Var {
        let t = self.constant(target.clone());
        let d = self.sub(pred, t);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Mat::ones(self.nodes[root.0].value.dim()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.dot(&bv.t()));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, av.t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.dot(bv));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, g.t().dot(av));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g * bv);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, g * av);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[row.0].requires_grad {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g * rv);
                }
                if self.nodes[row.0].requires_grad {
                    let gr = (g * av).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, g.clone());
                if self.nodes[col.0].requires_grad {
                    self.accumulate(grads, *col, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let s = sigmoid(x);
                    *d *= s * (1.0 + x * (1.0 - s));
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = g * out;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow).and(&yrow).for_each(|d, &y| *d -= y * dot);
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm(a, inv_std) => {
                let cols = out.ncols() as f32;
                let mut d = g.clone();
                for ((mut drow, yrow), &is) in d.rows_mut().into_iter().zip(out.rows()).zip(inv_std) {
                    let mean_g = drow.sum() / cols;
                    let mean_gy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f32>() / cols;
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &y| *d = is * (*d - mean_g - y * mean_gy));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gather(a, rows) => {
                if self.nodes[a.0].requires_grad {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(r);
                        dst += &g.row(i);
                    }
                    self.accumulate(grads, *a, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).nrows();
                    if self.nodes[p.0].requires_grad {
                        self.accumulate(grads, *p, g.slice(s![start..start + len, ..]).to_owned());
                    }
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).ncols();
                    if self.nodes[p.0].requires_grad {
                        self.accumulate(grads, *p, g.slice(s![.., start..start + len]).to_owned());
                    }
                    start += len;
                }
            }
            Op::SliceRows(a, start) => {
                if self.nodes[a.0].requires_grad {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if self.nodes[a.0].requires_grad {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::RepeatRows(a) => {
                self.accumulate(grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sum(a) => {
                let d = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let d = Mat::from_elem(x.dim(), g[[0, 0]] / x.len() as f32);
                self.accumulate(grads, *a, d);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, bv * g);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, av * g);
                }
            }
            Op::Injected(a, local) => self.accumulate(grads, *a, local * g[[0, 0]]),
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
