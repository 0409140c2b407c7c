//! Reverse-mode differentiation over row-batched matrices.
//!
//! A [`Tape`] records every operation applied to its variables. Values are
//! computed eagerly, so the tape doubles as the forward evaluator. Parameter
//! leaves borrow their values from the [`ParamStore`] instead of copying them.
//!
//! Variables are `rows x cols` matrices where rows index the batch.

use ndarray::{s, Axis};

use super::params::{Matrix, ParamGrads, ParamId, ParamStore};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    MulCol(Var, Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    RowSum(Var),
    Min(Var, Var),
    WeightedSum(Var, Matrix),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    NormalizeRows(Var, Matrix),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.values(*id),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    /// Value of a `1 x 1` variable.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn grad_flag(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf that contributes its value but collects no gradient.
    pub fn param_frozen(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x + bias` with `bias` of shape `1 x cols` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + self.value(bias);
        let rg = self.grad_flag(x) || self.grad_flag(bias);
        self.push(value, Op::AddBias(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.grad_flag(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.grad_flag(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let rg = self.grad_flag(a);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.nrows(), rows, "concat row mismatch");
            value.slice_mut(s![.., at..at + m.ncols()]).assign(m);
            at += m.ncols();
        }
        let rg = parts.iter().any(|&p| self.grad_flag(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.grad_flag(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// `x * col` where `col` is `rows x 1`, broadcast across columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let value = self.value(x) * self.value(col);
        let rg = self.grad_flag(x) || self.grad_flag(col);
        self.push(value, Op::MulCol(x, col), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        let rg = self.grad_flag(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise log-sum-exp, `rows x 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::from_shape_fn((m.nrows(), 1), |(r, _)| {
            logsumexp(m.row(r).as_slice().expect("contiguous row"))
        });
        let rg = self.grad_flag(a);
        self.push(value, Op::LogSumExpRows(a), rg)
    }

    /// Row sums, `rows x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.grad_flag(a);
        self.push(value, Op::RowSum(a), rg)
    }

    /// Row-wise dot product of two equally shaped matrices, `rows x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.row_sum(p)
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.zip_mut_with(self.value(b), |x, &y| *x = x.min(y));
        let rg = self.grad_flag(a) || self.grad_flag(b);
        self.push(value, Op::Min(a, b), rg)
    }

    /// `sum(w .* a)` for constant weights of the same shape, `1 x 1`.
    pub fn weighted_sum(&mut self, a: Var, weights: Matrix) -> Var {
        assert_eq!(self.shape(a), weights.dim(), "weight shape mismatch");
        let total = (self.value(a) * &weights).sum();
        let rg = self.grad_flag(a);
        self.push(Matrix::from_elem((1, 1), total), Op::WeightedSum(a, weights), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let w = Matrix::ones(self.value(a).raw_dim());
        self.weighted_sum(a, w)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = self.value(a).mean().expect("mean of empty matrix");
        let rg = self.grad_flag(a);
        self.push(Matrix::from_elem((1, 1), value), Op::Mean(a), rg)
    }

    /// Selects rows of `table` by index, e.g. an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros((indices.len(), t.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            value.row_mut(r).assign(&t.row(i));
        }
        let rg = self.grad_flag(table);
        self.push(value, Op::GatherRows(table, indices.to_vec()), rg)
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let norms = Matrix::from_shape_fn((m.nrows(), 1), |(r, _)| m.row(r).dot(&m.row(r)).sqrt().max(1e-12));
        let value = m / &norms;
        let rg = self.grad_flag(a);
        self.push(value, Op::NormalizeRows(a, norms), rg)
    }

    /// Reverse sweep from a `1 x 1` output. Returns gradients of every
    /// parameter leaf reached.
    pub fn backward(&self, output: Var) -> ParamGrads {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Matrix::from_elem((1, 1), 1.0));
        let mut out = ParamGrads::with_capacity(self.params.len());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, contrib: Matrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.add(*id, &g),
                Op::MatMul(a, b) => {
                    if self.grad_flag(*a) {
                        send(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.grad_flag(*b) {
                        send(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddBias(x, b) => {
                    if self.grad_flag(*b) {
                        send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    if self.grad_flag(*b) {
                        send(*b, g.clone());
                    }
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    if self.grad_flag(*b) {
                        send(*b, -&g);
                    }
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if self.grad_flag(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.grad_flag(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::Scale(a, c) => send(*a, g * *c),
                Op::AddScalar(a) => send(*a, g),
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    send(*a, d);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut d = g;
                    d.zip_mut_with(y, |d, &y| *d *= 1.0 - y * y);
                    send(*a, d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut d = g;
                    d.zip_mut_with(y, |d, &y| *d *= y * (1.0 - y));
                    send(*a, d);
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().expect("value");
                    send(*a, g * y);
                }
                Op::Log(a) => send(*a, g / self.value(*a)),
                Op::Softplus(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| *d *= sigmoid(x));
                    send(*a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x < *lo || x > *hi {
                            *d = 0.0
                        }
                    });
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.grad_flag(p) {
                            send(p, g.slice(s![.., at..at + w]).to_owned());
                        }
                        at += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Matrix::zeros(self.value(*a).raw_dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    send(*a, d);
                }
                Op::MulCol(x, col) => {
                    if self.grad_flag(*col) {
                        let gc = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        send(*col, gc);
                    }
                    if self.grad_flag(*x) {
                        send(*x, &g * self.value(*col));
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, y * &(&g - &dot));
                }
                Op::LogSumExpRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let x = self.value(*a);
                    let p = (x - y).mapv(f64::exp);
                    send(*a, p * &g);
                }
                Op::RowSum(a) => {
                    let d = Matrix::ones(self.value(*a).raw_dim()) * &g;
                    send(*a, d);
                }
                Op::Min(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mask = ndarray::Zip::from(va).and(vb).map_collect(|&x, &y| x <= y);
                    if self.grad_flag(*a) {
                        let d = ndarray::Zip::from(&g).and(&mask).map_collect(|&g, &m| if m { g } else { 0.0 });
                        send(*a, d);
                    }
                    if self.grad_flag(*b) {
                        let d = ndarray::Zip::from(&g).and(&mask).map_collect(|&g, &m| if m { 0.0 } else { g });
                        send(*b, d);
                    }
                }
                Op::WeightedSum(a, w) => send(*a, w * g[[0, 0]]),
                Op::Mean(a) => {
                    let shape = self.value(*a).raw_dim();
                    let n = self.value(*a).len() as f64;
                    send(*a, Matrix::from_elem(shape, g[[0, 0]] / n));
                }
                Op::GatherRows(table, indices) => {
                    let mut d = Matrix::zeros(self.value(*table).raw_dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    send(*table, d);
                }
                Op::NormalizeRows(a, norms) => {
                    let y = node.value.as_ref().expect("value");
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send(*a, (&g - &(y * &dot)) / norms);
                }
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}
