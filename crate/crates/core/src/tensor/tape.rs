//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Only the operations needed by the unfolded network and the open-set
//! losses are provided. The tape is rebuilt on every forward pass; a
//! [`Var`] is an index into the tape that produced it and is meaningless on
//! any other tape.
//!
//! Non-smooth operations (soft-thresholding, group shrinkage, ReLU, row
//! norms) use the zero subgradient exactly at their kinks. Each of them
//! appends its active set to [`Tape::activation_pattern`], which the
//! finite-difference checker uses to detect perturbations that cross a kink.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{OvError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Grouping used by the ℓ₂,₁ proximal operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAxis {
    /// Each column is one group.
    #[default]
    Columns,
    /// Each row is one group.
    Rows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Transpose(Var),
    SoftThreshold {
        a: Var,
        theta: Var,
    },
    GroupSoftThreshold {
        a: Var,
        rho: Var,
        axis: GroupAxis,
        norms: Vec<f64>,
    },
    RowSoftmax(Var),
    RowLogSoftmax {
        a: Var,
        probs: Matrix,
    },
    Log(Var),
    Sum(Var),
    RowL2Norms(Var),
    FrobeniusSq(Var),
    HadamardConst(Var, Matrix),
    SelectRows(Var, Vec<usize>),
    Relu(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pattern: Vec<bool>,
    kink_margin: f64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn soft(a: f64, theta: f64) -> f64 {
    if a > theta {
        a - theta
    } else if a < -theta {
        a + theta
    } else {
        0.0
    }
}

fn group_norms(a: &Matrix, axis: GroupAxis) -> Vec<f64> {
    match axis {
        GroupAxis::Columns => a.col_norms(),
        GroupAxis::Rows => a.row_norms(),
    }
}

/// Scalar soft-thresholding `sign(a)·max(|a| − θ, 0)` applied entrywise.
pub fn soft_threshold_values(a: &Matrix, theta: f64) -> Matrix {
    a.map(|v| soft(v, theta))
}

/// Group shrinkage: each group `g` becomes `(1 − ρ/‖g‖)·g` when `‖g‖ > ρ`,
/// zero otherwise.
pub fn group_soft_threshold_values(a: &Matrix, rho: f64, axis: GroupAxis) -> Matrix {
    let norms = group_norms(a, axis);
    shrink_groups(a, rho, axis, &norms)
}

fn shrink_groups(a: &Matrix, rho: f64, axis: GroupAxis, norms: &[f64]) -> Matrix {
    let factor: Vec<f64> = norms
        .iter()
        .map(|&n| if n > rho { 1.0 - rho / n } else { 0.0 })
        .collect();
    Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        let f = match axis {
            GroupAxis::Columns => factor[j],
            GroupAxis::Rows => factor[i],
        };
        a[(i, j)] * f
    })
}

pub fn row_softmax_values(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn row_log_softmax_values(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            pattern: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Active sets of every non-smooth op recorded so far, in tape order.
    pub fn activation_pattern(&self) -> &[bool] {
        &self.pattern
    }

    /// Smallest distance between a non-smooth op's input and its kink.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn record_kink(&mut self, active: bool, distance: f64) {
        self.pattern.push(active);
        self.kink_margin = self.kink_margin.min(distance.abs());
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Adds the constant `c` to every entry.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.needs(&[a]);
        self.push(value, Op::Shift(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.needs(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    fn scalar_param(&self, v: Var, what: &str) -> Result<f64> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(OvError::Dimension {
                op: "scalar parameter",
                left: m.shape(),
                right: (1, 1),
            });
        }
        let x = m.item();
        if !(x >= 0.0) {
            return Err(OvError::Domain(format!("{what} must be >= 0, got {x}")));
        }
        Ok(x)
    }

    pub fn soft_threshold(&mut self, a: Var, theta: Var) -> Result<Var> {
        let t = self.scalar_param(theta, "soft-threshold theta")?;
        let value = soft_threshold_values(self.value(a), t);
        let flags: Vec<(bool, f64)> = self
            .value(a)
            .as_slice()
            .iter()
            .map(|&x| (x.abs() > t, x.abs() - t))
            .collect();
        for (active, d) in flags {
            self.record_kink(active, d);
        }
        let rg = self.needs(&[a, theta]);
        Ok(self.push(value, Op::SoftThreshold { a, theta }, rg))
    }

    pub fn group_soft_threshold(&mut self, a: Var, rho: Var, axis: GroupAxis) -> Result<Var> {
        let r = self.scalar_param(rho, "group-threshold rho")?;
        let norms = group_norms(self.value(a), axis);
        let value = shrink_groups(self.value(a), r, axis, &norms);
        for &n in &norms {
            self.record_kink(n > r, n - r);
        }
        let rg = self.needs(&[a, rho]);
        Ok(self.push(
            value,
            Op::GroupSoftThreshold {
                a,
                rho,
                axis,
                norms,
            },
            rg,
        ))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = row_softmax_values(self.value(a));
        let rg = self.needs(&[a]);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    /// `log(row_softmax(a))` computed with the log-sum-exp shift.
    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let value = row_log_softmax_values(self.value(a));
        let probs = value.map(f64::exp);
        let rg = self.needs(&[a]);
        self.push(value, Op::RowLogSoftmax { a, probs }, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if let Some(bad) = m.as_slice().iter().find(|&&v| !(v > 0.0)) {
            return Err(OvError::Domain(format!("log of non-positive entry {bad}")));
        }
        let value = m.map(f64::ln);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_l2_norms(&mut self, a: Var) -> Var {
        let norms = self.value(a).row_norms();
        for &n in &norms {
            self.record_kink(n > 0.0, n);
        }
        let value = Matrix::from_vec(norms.len(), 1, norms).expect("row count");
        let rg = self.needs(&[a]);
        self.push(value, Op::RowL2Norms(a), rg)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).frobenius_sq());
        let rg = self.needs(&[a]);
        self.push(value, Op::FrobeniusSq(a), rg)
    }

    /// Entrywise product with a constant matrix.
    pub fn hadamard_const(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let value = self.value(a).hadamard(&mask)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::HadamardConst(a, mask), rg))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m.rows()) {
            return Err(OvError::Dimension {
                op: "select_rows",
                left: m.shape(),
                right: (bad, 0),
            });
        }
        let value = m.select_rows(idx);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SelectRows(a, idx.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let flags: Vec<f64> = self.value(a).as_slice().to_vec();
        for x in flags {
            self.record_kink(x > 0.0, x);
        }
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.needs(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(OvError::Dimension {
                op: "backward",
                left: out_shape,
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Matrix,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let ga = g.matmul_t(self.value(*b))?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.value(*a).t_matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::Shift(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::SoftThreshold { a, theta } => {
                let t = self.value(*theta).item();
                let x = self.value(*a);
                let ga = x.zip_map(g, "soft_threshold backward", |xv, gv| {
                    if xv.abs() > t {
                        gv
                    } else {
                        0.0
                    }
                })?;
                let gt: f64 = x
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .filter(|(xv, _)| xv.abs() > t)
                    .map(|(xv, gv)| -xv.signum() * gv)
                    .sum();
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *theta, Matrix::scalar(gt))?;
            }
            Op::GroupSoftThreshold {
                a,
                rho,
                axis,
                norms,
            } => {
                let r = self.value(*rho).item();
                let x = self.value(*a);
                let group_of = |i: usize, j: usize| match axis {
                    GroupAxis::Columns => j,
                    GroupAxis::Rows => i,
                };
                // xᵀg per group
                let mut dots = vec![0.0; norms.len()];
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        dots[group_of(i, j)] += x[(i, j)] * g[(i, j)];
                    }
                }
                let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    let k = group_of(i, j);
                    let n = norms[k];
                    if n > r {
                        (1.0 - r / n) * g[(i, j)] + r / (n * n * n) * dots[k] * x[(i, j)]
                    } else {
                        0.0
                    }
                });
                let gr: f64 = norms
                    .iter()
                    .zip(&dots)
                    .filter(|(n, _)| **n > r)
                    .map(|(n, d)| -d / n)
                    .sum();
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *rho, Matrix::scalar(gr))?;
            }
            Op::RowSoftmax(a) => {
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let s = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = s.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = s[j] * (gi[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::RowLogSoftmax { a, probs } => {
                let mut ga = g.clone();
                for i in 0..out.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    let p = probs.row(i);
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o -= p[j] * total;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Log(a) => {
                let ga = g.zip_map(self.value(*a), "log backward", |gv, xv| gv / xv)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()))?;
            }
            Op::RowL2Norms(a) => {
                let x = self.value(*a);
                let ga = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    let n = out[(i, 0)];
                    if n > 0.0 {
                        g[(i, 0)] * x[(i, j)] / n
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga)?;
            }
            Op::FrobeniusSq(a) => {
                let ga = self.value(*a).scale(2.0 * g.item());
                self.accumulate(grads, *a, ga)?;
            }
            Op::HadamardConst(a, mask) => {
                self.accumulate(grads, *a, g.hadamard(mask)?)?;
            }
            Op::SelectRows(a, idx) => {
                let x = self.value(*a);
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Relu(a) => {
                let ga =
                    self.value(*a).zip_map(
                        g,
                        "relu backward",
                        |xv, gv| if xv > 0.0 { gv } else { 0.0 },
                    )?;
                self.accumulate(grads, *a, ga)?;
            }
        }
        Ok(())
    }
}
