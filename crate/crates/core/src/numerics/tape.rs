//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Gradients only flow into nodes that (transitively) depend on a parameter
//! registered with [`Tape::param`]; constants are skipped entirely.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::special::softmax;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    Standardize {
        input: Var,
        inv_std: Vec<f64>,
    },
    ColMean(Var),
    ColVar(Var),
    CrossEntropy {
        logits: Var,
        targets: Matrix,
        probs: Matrix,
    },
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    PairwiseDistances(Var),
    TripletCosines(Var),
    DivScalar(Var, Var),
    Huber {
        input: Var,
        target: Matrix,
        delta: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Per-node gradients from one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; zeros if the output did not depend on it.
    pub fn named(&self, name: &str) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads.get_mut(var.0).and_then(Option::take)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    /// Named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// Anonymous trainable leaf (e.g. an input whose gradient is wanted).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn check_same(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn check_row(&self, a: Var, row: Var, op: &str) -> Result<()> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sr != (1, sa.1) {
            return Err(Error::shape(format!("{op}: row {sr:?} onto {sa:?}")));
        }
        Ok(())
    }

    /// Broadcast-adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let value = self.value(a).add_row(self.value(row).as_slice())?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Broadcast-multiplies every row of `a` by a `1 x d` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let r = self.value(row).as_slice().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, s) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= s;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    /// Scales row `i` of `a` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(a).rows() {
            return Err(Error::shape(format!(
                "scale_rows: {} weights for {} rows",
                weights.len(),
                self.value(a).rows()
            )));
        }
        let mut value = self.value(a).clone();
        for (i, w) in weights.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|x| *x *= w);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::ScaleRows(a, weights), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::Offset(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&x| x < 0.0) {
            return Err(Error::input("sqrt of a negative entry"));
        }
        let value = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sqrt(a), rg))
    }

    /// Per-column `(x - mean) / sqrt(var + eps)` with biased batch variance.
    pub fn standardize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        if x.rows() < 2 {
            return Err(Error::DegenerateBatch(x.rows()));
        }
        let means = x.column_means();
        let inv_std: Vec<f64> = x.column_variances().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut value = x.clone();
        for i in 0..value.rows() {
            for ((v, m), s) in value.row_mut(i).iter_mut().zip(&means).zip(&inv_std) {
                *v = (*v - m) * s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Standardize { input: a, inv_std }, rg))
    }

    /// `1 x d` column means.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let value = Matrix::row_vector(&self.value(a).column_means());
        let rg = self.rg(a);
        self.push(value, Op::ColMean(a), rg)
    }

    /// `1 x d` biased (1/N) column variances.
    pub fn col_var(&mut self, a: Var) -> Var {
        let value = Matrix::row_vector(&self.value(a).column_variances());
        let rg = self.rg(a);
        self.push(value, Op::ColVar(a), rg)
    }

    /// Mean over rows of `-Σ_c t_c log softmax(z)_c` for target rows `t`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Matrix) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {:?} vs targets {:?}",
                z.shape(),
                targets.shape()
            )));
        }
        let n = z.rows();
        if n == 0 {
            return Err(Error::input("cross_entropy of an empty batch"));
        }
        let mut probs = Matrix::zeros(n, z.cols());
        let mut total = 0.0;
        for i in 0..n {
            let row = z.row(i);
            let lse = crate::numerics::special::logsumexp(row);
            for (c, &zc) in row.iter().enumerate() {
                let t = targets[(i, c)];
                if t != 0.0 {
                    total -= t * (zc - lse);
                }
            }
            probs.row_mut(i).copy_from_slice(&softmax(row));
        }
        let value = Matrix::scalar(total / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy { logits, targets, probs }, rg))
    }

    /// Row-wise log-sum-exp, `n x 1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let vals: Vec<f64> = x.iter_rows().map(crate::numerics::special::logsumexp).collect();
        let rg = self.rg(a);
        self.push(Matrix::column_vector(&vals), Op::LogSumExp(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).as_slice().iter().map(|x| x * x).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumSquares(a), rg)
    }

    /// `n x n` Euclidean distances between rows.
    pub fn pairwise_distances(&mut self, a: Var) -> Var {
        let value = crate::numerics::kernel::squared_distances(self.value(a)).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(value, Op::PairwiseDistances(a), rg)
    }

    /// `(n·n) x n` matrix whose entry at row `a·n + b`, column `c` is the cosine
    /// of the angle at anchor row `a` between `x_b - x_a` and `x_c - x_a`
    /// (zero when either difference vanishes).
    pub fn triplet_cosines(&mut self, a: Var) -> Var {
        let value = triplet_cosines(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::TripletCosines(a), rg)
    }

    /// Divides every entry of `a` by the scalar node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::shape("div_scalar divisor must be 1x1"));
        }
        let d = self.value(s).item();
        if d == 0.0 {
            return Err(Error::input("division by zero"));
        }
        let value = self.value(a).scale(1.0 / d);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::DivScalar(a, s), rg))
    }

    /// Mean Huber loss of `a - target` with threshold `delta`.
    pub fn huber(&mut self, a: Var, target: Matrix, delta: f64) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != target.shape() {
            return Err(Error::shape(format!("huber: {:?} vs {:?}", x.shape(), target.shape())));
        }
        let value = Matrix::scalar(huber_mean(x, &target, delta));
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Huber {
                input: a,
                target,
                delta,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::InvalidGraph(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                // Intermediate gradients are not part of the public result.
                if idx != output.0 {
                    grads[idx] = None;
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).tmatmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b)).expect("shape"));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a)).expect("shape"));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, Matrix::row_vector(&column_sums(g)));
                }
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, s) in ga.row_mut(i).iter_mut().zip(r.as_slice()) {
                            *x *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*row) {
                    let prod = g.hadamard(self.value(*a)).expect("shape");
                    self.accumulate(grads, *row, Matrix::row_vector(&column_sums(&prod)));
                }
            }
            Op::ScaleRows(a, w) => {
                let mut ga = g.clone();
                for (i, wi) in w.iter().enumerate() {
                    ga.row_mut(i).iter_mut().for_each(|x| *x *= wi);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    let y = out[(i, j)];
                    g[(i, j)] * (1.0 - y * y)
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| if x[(i, j)] > 0.0 { g[(i, j)] } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    let y = out[(i, j)];
                    if y > 0.0 {
                        g[(i, j)] / (2.0 * y)
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Standardize { input, inv_std } => {
                let n = out.rows() as f64;
                let sum_g = column_sums(g);
                let sum_gy = column_sums(&g.hadamard(out).expect("shape"));
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    inv_std[j] / n * (n * g[(i, j)] - sum_g[j] - out[(i, j)] * sum_gy[j])
                });
                self.accumulate(grads, *input, ga);
            }
            Op::ColMean(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                let ga = Matrix::from_fn(x.rows(), x.cols(), |_, j| g[(0, j)] / n);
                self.accumulate(grads, *a, ga);
            }
            Op::ColVar(a) => {
                let x = self.value(*a);
                let n = x.rows() as f64;
                let means = x.column_means();
                let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| g[(0, j)] * 2.0 * (x[(i, j)] - means[j]) / n);
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = probs.rows() as f64;
                let scale = g.item() / n;
                let mut ga = Matrix::zeros(probs.rows(), probs.cols());
                for i in 0..probs.rows() {
                    let mass: f64 = targets.row(i).iter().sum();
                    for c in 0..probs.cols() {
                        ga[(i, c)] = scale * (probs[(i, c)] * mass - targets[(i, c)]);
                    }
                }
                self.accumulate(grads, *logits, ga);
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let p = softmax(x.row(i));
                    for (o, pc) in ga.row_mut(i).iter_mut().zip(p) {
                        *o = g[(i, 0)] * pc;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Matrix::filled(x.rows(), x.cols(), g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let n = (x.rows() * x.cols()) as f64;
                self.accumulate(grads, *a, Matrix::filled(x.rows(), x.cols(), g.item() / n));
            }
            Op::SumSquares(a) => {
                self.accumulate(grads, *a, self.value(*a).scale(2.0 * g.item()));
            }
            Op::PairwiseDistances(a) => {
                let x = self.value(*a);
                let (n, d) = x.shape();
                let mut ga = Matrix::zeros(n, d);
                for i in 0..n {
                    for j in 0..n {
                        let dist = out[(i, j)];
                        if i == j || dist == 0.0 {
                            continue;
                        }
                        let w = (g[(i, j)] + g[(j, i)]) / dist;
                        for k in 0..d {
                            ga[(i, k)] += w * (x[(i, k)] - x[(j, k)]);
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::TripletCosines(a) => {
                let ga = triplet_cosines_backward(self.value(*a), g);
                self.accumulate(grads, *a, ga);
            }
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.scale(1.0 / d));
                }
                if self.rg(*s) {
                    let dot: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*a).as_slice())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.accumulate(grads, *s, Matrix::scalar(-dot / (d * d)));
                }
            }
            Op::Huber { input, target, delta } => {
                let x = self.value(*input);
                let count = (x.rows() * x.cols()) as f64;
                let scale = g.item() / count;
                let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    scale * (x[(i, j)] - target[(i, j)]).clamp(-delta, *delta)
                });
                self.accumulate(grads, *input, ga);
            }
        }
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for row in m.iter_rows() {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

/// Mean Huber penalty of `x - target`.
pub fn huber_mean(x: &Matrix, target: &Matrix, delta: f64) -> f64 {
    let total: f64 = x
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| {
            let r = (a - b).abs();
            if r < delta {
                0.5 * r * r
            } else {
                delta * (r - 0.5 * delta)
            }
        })
        .sum();
    total / x.as_slice().len() as f64
}

fn unit_differences(x: &Matrix, anchor: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut units = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for b in 0..n {
        let diff: Vec<f64> = (0..d).map(|k| x[(b, k)] - x[(anchor, k)]).collect();
        let r = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if r > 0.0 {
            units.push(diff.iter().map(|v| v / r).collect());
        } else {
            units.push(vec![0.0; d]);
        }
        norms.push(r);
    }
    (units, norms)
}

/// See [`Tape::triplet_cosines`].
pub fn triplet_cosines(x: &Matrix) -> Matrix {
    let n = x.rows();
    let mut out = Matrix::zeros(n * n, n);
    for a in 0..n {
        let (units, _) = unit_differences(x, a);
        for b in 0..n {
            for c in 0..n {
                out[(a * n + b, c)] = crate::numerics::matrix::dot(&units[b], &units[c]);
            }
        }
    }
    out
}

fn triplet_cosines_backward(x: &Matrix, g: &Matrix) -> Matrix {
    let (n, d) = x.shape();
    let mut ga = Matrix::zeros(n, d);
    for a in 0..n {
        let (units, norms) = unit_differences(x, a);
        for b in 0..n {
            if norms[b] == 0.0 {
                continue;
            }
            // dL/du_b = Σ_c (G_bc + G_cb) u_c
            let mut du = vec![0.0; d];
            for c in 0..n {
                let w = g[(a * n + b, c)] + g[(a * n + c, b)];
                if w != 0.0 {
                    for k in 0..d {
                        du[k] += w * units[c][k];
                    }
                }
            }
            let proj = crate::numerics::matrix::dot(&units[b], &du);
            for k in 0..d {
                let dv = (du[k] - units[b][k] * proj) / norms[b];
                ga[(b, k)] += dv;
                ga[(a, k)] -= dv;
            }
        }
    }
    ga
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let mut xm = x.clone();
                xm[(i, j)] -= h;
                g[(i, j)] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
        }
        g
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / (a.frobenius_norm() + b.frobenius_norm()).max(1e-8)
    }

    fn check(x: Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.param("x", x.clone());
        let out = build(&mut tape, v);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.named("x").cloned().unwrap_or(Matrix::zeros(x.rows(), x.cols()));
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.param("x", m.clone());
            let o = build(&mut t, v);
            t.scalar(o)
        };
        let numeric = numeric_grad(&x, &f);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn square_at_three() {
        let mut tape = Tape::new();
        let x = tape.param("x", Matrix::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.named("x").unwrap().item(), 6.0);
    }

    #[test]
    fn constant_output_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", Matrix::scalar(3.0));
        let c = tape.constant(Matrix::scalar(5.0));
        let y = tape.sum(c);
        let g = tape.backward(y).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let x = tape.param("x", Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::InvalidGraph(_))));
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = RngStream::new(5);
        let x = random(4, 3, &mut rng);
        let w = random(3, 2, &mut rng);
        let row = random(1, 3, &mut rng);
        check(x.clone(), |t, v| {
            let wv = t.constant(w.clone());
            let r = t.constant(row.clone());
            let a = t.mul_row(v, r).unwrap();
            let a = t.add_row(a, r).unwrap();
            let h = t.tanh(a);
            let m = t.matmul(h, wv).unwrap();
            let rl = t.relu(m);
            let sq = t.mul(rl, rl).unwrap();
            let s = t.scale_rows(sq, vec![0.5, 1.0, 2.0, -1.0]).unwrap();
            let s = t.offset(s, 0.3);
            t.mean(s)
        });
    }

    #[test]
    fn batch_statistics_ops() {
        let mut rng = RngStream::new(6);
        let x = random(6, 3, &mut rng);
        check(x.clone(), |t, v| {
            let s = t.standardize(v, 1e-5).unwrap();
            let c = t.constant(Matrix::from_fn(6, 3, |i, j| (i + j) as f64 * 0.1));
            let s = t.mul(s, c).unwrap();
            let sum = t.sum(s);
            let m = t.col_mean(v);
            let var = t.col_var(v);
            let var = t.offset(var, 1e-5);
            let sd = t.sqrt(var).unwrap();
            let q = t.sum_squares(m);
            let r = t.sum_squares(sd);
            let a = t.add(sum, q).unwrap();
            t.add(a, r).unwrap()
        });
    }

    #[test]
    fn cross_entropy_and_logsumexp() {
        let mut rng = RngStream::new(7);
        let x = random(5, 4, &mut rng);
        let targets = Matrix::from_fn(5, 4, |i, j| if (i + j) % 4 == 0 { 0.7 } else { 0.1 });
        check(x.clone(), |t, v| {
            let ce = t.cross_entropy(v, targets.clone()).unwrap();
            let l = t.logsumexp(v);
            let l = t.mean(l);
            t.add(ce, l).unwrap()
        });
    }

    #[test]
    fn relational_ops() {
        let mut rng = RngStream::new(8);
        let x = random(5, 3, &mut rng);
        let tgt_d = Matrix::from_fn(5, 5, |i, j| ((i * 5 + j) % 3) as f64 * 0.4);
        let tgt_a = Matrix::from_fn(25, 5, |i, j| ((i + j) % 5) as f64 * 0.2 - 0.4);
        check(x.clone(), |t, v| {
            let d = t.pairwise_distances(v);
            let s = t.sum(d);
            let s = t.scale(s, 1.0 / 20.0);
            let dn = t.div_scalar(d, s).unwrap();
            let hd = t.huber(dn, tgt_d.clone(), 1.0).unwrap();
            let a = t.triplet_cosines(v);
            let a = t.scale(a, 3.0);
            let ha = t.huber(a, tgt_a.clone(), 1.0).unwrap();
            t.add(hd, ha).unwrap()
        });
    }

    #[test]
    fn gradients_are_linear() {
        let mut rng = RngStream::new(9);
        let x = random(3, 3, &mut rng);
        let build_f = |t: &mut Tape, v: Var| {
            let h = t.tanh(v);
            t.sum_squares(h)
        };
        let build_g = |t: &mut Tape, v: Var| {
            let m = t.matmul(v, v).unwrap();
            t.mean(m)
        };
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let v = t.param("x", x.clone());
            let out = match which {
                0 => build_f(&mut t, v),
                1 => build_g(&mut t, v),
                _ => {
                    let f = build_f(&mut t, v);
                    let g = build_g(&mut t, v);
                    let f = t.scale(f, 2.5);
                    let g = t.scale(g, -0.75);
                    t.add(f, g).unwrap()
                }
            };
            t.backward(out).unwrap().named("x").unwrap().clone()
        };
        let expected = grad_of(0).scale(2.5).add(&grad_of(1).scale(-0.75)).unwrap();
        assert!(grad_of(2).max_abs_diff(&expected) <= 1e-10);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.param("a", Matrix::zeros(2, 3));
        let b = t.param("b", Matrix::zeros(2, 2));
        assert!(t.add(a, b).is_err());
        assert!(t.add_row(a, b).is_err());
        let one = t.param("c", Matrix::zeros(1, 3));
        assert!(matches!(t.standardize(one, 1e-5), Err(Error::DegenerateBatch(1))));
    }
}
