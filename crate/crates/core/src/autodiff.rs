//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records operations in execution order, which is a valid
//! topological order. [`Tape::backward`] walks it once in reverse. Leaves are
//! either parameters (which receive gradients) or constants (which never do).

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: bool },
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Relu(usize),
    NormalizeRows { x: usize, eps: f64, norms: Vec<f64> },
    BatchNorm {
        x: usize,
        gamma: usize,
        shift: usize,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    RowwiseDot(usize, usize),
    QuadFormSum { z: usize, c: Matrix },
    RowLogSumExp(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Relu(_) => "relu",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowwiseDot(..) => "rowwise_dot",
            Op::QuadFormSum { .. } => "quad_form_sum",
            Op::RowLogSumExp(_) => "row_logsumexp",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
    shape: (usize, usize),
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.idx, self.shape)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Matrix) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match &op {
            Op::Leaf { param } => *param,
            other => operands(other).iter().any(|&i| nodes[i].requires_grad),
        };
        let shape = value.shape();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
            shape,
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf { param: true }, value)
    }

    /// A leaf treated as a constant (stop-gradient).
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(Op::Leaf { param: false }, value)
    }

    /// Propagates adjoints from the scalar `loss` back to every parameter leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        if loss.shape != (1, 1) {
            return Err(Error::NonScalarLoss { shape: loss.shape });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |to: usize, delta: Matrix| {
                if !nodes[to].requires_grad {
                    return;
                }
                match &mut grads[to] {
                    Some(acc) => acc.axpy(1.0, &delta).expect("adjoint shape"),
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| &nodes[i].value;

            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, g.matmul_t(val(*b)).expect("matmul adjoint"));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, val(*a).t_matmul(&g).expect("matmul adjoint"));
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.scale(-1.0));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, g.hadamard(val(*b)).expect("mul adjoint"));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, g.hadamard(val(*a)).expect("mul adjoint"));
                    }
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::AddRow(a, row) => {
                    send(*row, column_sums(&g));
                    send(*a, g);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let mut d = g;
                    for (dv, xv) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    send(*a, d);
                }
                Op::NormalizeRows { x, eps, norms } => {
                    let y = &node.value;
                    let mut d = g;
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = d.row_mut(r);
                        if norm > *eps {
                            let proj: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                            for (gv, yv) in gr.iter_mut().zip(yr) {
                                *gv = (*gv - yv * proj) / norm;
                            }
                        } else {
                            gr.iter_mut().for_each(|gv| *gv /= eps);
                        }
                    }
                    send(*x, d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    shift,
                    normalized,
                    inv_std,
                } => {
                    let (n, d) = normalized.shape();
                    let gamma_v = val(*gamma);
                    if nodes[*gamma].requires_grad {
                        send(*gamma, column_sums(&g.hadamard(normalized).expect("bn")));
                    }
                    if nodes[*shift].requires_grad {
                        send(*shift, column_sums(&g));
                    }
                    if nodes[*x].requires_grad {
                        let nf = n as f64;
                        let mut dx = Matrix::zeros(n, d);
                        for c in 0..d {
                            let mut mean_dh = 0.0;
                            let mut mean_dh_h = 0.0;
                            for r in 0..n {
                                let dh = g[(r, c)] * gamma_v[(0, c)];
                                mean_dh += dh;
                                mean_dh_h += dh * normalized[(r, c)];
                            }
                            mean_dh /= nf;
                            mean_dh_h /= nf;
                            for r in 0..n {
                                let dh = g[(r, c)] * gamma_v[(0, c)];
                                dx[(r, c)] = inv_std[c]
                                    * (dh - mean_dh - normalized[(r, c)] * mean_dh_h);
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::RowwiseDot(a, b) => {
                    let scale_rows = |m: &Matrix| {
                        let mut out = m.clone();
                        for r in 0..out.rows() {
                            let s = g[(r, 0)];
                            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        out
                    };
                    if nodes[*a].requires_grad {
                        send(*a, scale_rows(val(*b)));
                    }
                    if nodes[*b].requires_grad {
                        send(*b, scale_rows(val(*a)));
                    }
                }
                Op::QuadFormSum { z, c } => {
                    let sym = c.add(&c.transpose()).expect("square");
                    let d = val(*z).matmul(&sym).expect("quad form adjoint");
                    send(*z, d.scale(g.item()));
                }
                Op::RowLogSumExp(a) => {
                    let x = val(*a);
                    let lse = &node.value;
                    let mut d = x.clone();
                    for r in 0..d.rows() {
                        let (gr, l) = (g[(r, 0)], lse[(r, 0)]);
                        d.row_mut(r)
                            .iter_mut()
                            .for_each(|v| *v = gr * (*v - l).exp());
                    }
                    send(*a, d);
                }
            }
        }

        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf { param: true } => Some(g.unwrap_or_else(|| {
                    let (r, c) = node.value.shape();
                    Matrix::zeros(r, c)
                })),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn operands(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::RowwiseDot(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::RowLogSumExp(a) => vec![*a],
        Op::NormalizeRows { x, .. } => vec![*x],
        Op::BatchNorm { x, gamma, shift, .. } => vec![*x, *gamma, *shift],
        Op::QuadFormSum { z, .. } => vec![*z],
    }
}

fn column_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Gradients of a scalar loss with respect to each parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a parameter leaf; `None` for constants and interior nodes.
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.idx).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros for anything that is not a
    /// parameter leaf.
    pub fn wrt(&self, var: Var<'_>) -> Matrix {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(var.shape.0, var.shape.1))
    }
}

impl<'t> Var<'t> {
    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// A copy of the cached forward value.
    pub fn value(&self) -> Matrix {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    /// Convenience for 1x1 results.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    fn with_values<T>(&self, other: &Var<'t>, f: impl FnOnce(&Matrix, &Matrix) -> T) -> T {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let nodes = self.tape.nodes.borrow();
        f(&nodes[self.idx].value, &nodes[other.idx].value)
    }

    fn with_value<T>(&self, f: impl FnOnce(&Matrix) -> T) -> T {
        f(&self.tape.nodes.borrow()[self.idx].value)
    }

    fn binary(&self, other: &Var<'t>, op: Op, f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix>) -> Result<Var<'t>> {
        let value = self.with_values(other, f)?;
        Ok(self.tape.push(op, value))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.idx, other.idx), |a, b| a.matmul(b))
    }

    pub fn transpose(&self) -> Var<'t> {
        let value = self.with_value(Matrix::transpose);
        self.tape.push(Op::Transpose(self.idx), value)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.idx, other.idx), |a, b| a.add(b))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.idx, other.idx), |a, b| a.sub(b))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.idx, other.idx), |a, b| a.hadamard(b))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let value = self.with_value(|m| m.scale(s));
        self.tape.push(Op::Scale(self.idx, s), value)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.binary(row, Op::AddRow(self.idx, row.idx), |a, r| {
            if r.rows() != 1 || r.cols() != a.cols() {
                return Err(Error::ShapeMismatch {
                    op: "add_row",
                    left: a.shape(),
                    right: r.shape(),
                });
            }
            let mut out = a.clone();
            for i in 0..out.rows() {
                for (o, v) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                    *o += v;
                }
            }
            Ok(out)
        })
    }

    pub fn relu(&self) -> Var<'t> {
        let value = self.with_value(|m| m.map(|v| v.max(0.0)));
        self.tape.push(Op::Relu(self.idx), value)
    }

    /// Row-wise L2 normalization, `x / max(‖x‖, eps)`.
    pub fn normalize_rows(&self, eps: f64) -> Var<'t> {
        let (value, norms) = self.with_value(|m| (m.normalize_rows(eps), m.row_norms()));
        self.tape.push(
            Op::NormalizeRows {
                x: self.idx,
                eps,
                norms,
            },
            value,
        )
    }

    /// Per-column batch standardization `(x − μ) / sqrt(var + eps)` with
    /// population variance, followed by a per-column affine map.
    pub fn batchnorm(&self, gamma: &Var<'t>, shift: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (n, d) = self.shape;
        if n < 2 {
            return Err(Error::TooFewRows {
                op: "batchnorm",
                min: 2,
                got: n,
            });
        }
        for p in [gamma, shift] {
            if p.shape != (1, d) {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm",
                    left: self.shape,
                    right: p.shape,
                });
            }
        }
        let (normalized, inv_std, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.idx].value;
            let g = &nodes[gamma.idx].value;
            let b = &nodes[shift.idx].value;
            let nf = n as f64;
            let mut normalized = Matrix::zeros(n, d);
            let mut inv_std = vec![0.0; d];
            for c in 0..d {
                let mean = (0..n).map(|r| x[(r, c)]).sum::<f64>() / nf;
                let var = (0..n).map(|r| (x[(r, c)] - mean).powi(2)).sum::<f64>() / nf;
                inv_std[c] = 1.0 / (var + eps).sqrt();
                for r in 0..n {
                    normalized[(r, c)] = (x[(r, c)] - mean) * inv_std[c];
                }
            }
            let mut value = normalized.clone();
            for r in 0..n {
                for c in 0..d {
                    value[(r, c)] = g[(0, c)] * value[(r, c)] + b[(0, c)];
                }
            }
            (normalized, inv_std, value)
        };
        Ok(self.tape.push(
            Op::BatchNorm {
                x: self.idx,
                gamma: gamma.idx,
                shift: shift.idx,
                normalized,
                inv_std,
            },
            value,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = Matrix::scalar(self.with_value(Matrix::sum));
        self.tape.push(Op::Sum(self.idx), value)
    }

    pub fn mean(&self) -> Var<'t> {
        let value = self.with_value(|m| Matrix::scalar(m.sum() / m.len() as f64));
        self.tape.push(Op::Mean(self.idx), value)
    }

    /// Row-wise inner products `aᵢ · bᵢ` as an `n x 1` column.
    pub fn rowwise_dot(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::RowwiseDot(self.idx, other.idx), |a, b| {
            a.expect_same_shape(b, "rowwise_dot")?;
            let data = (0..a.rows())
                .map(|r| a.row(r).iter().zip(b.row(r)).map(|(x, y)| x * y).sum())
                .collect();
            Matrix::from_vec(a.rows(), 1, data)
        })
    }

    /// `Σᵢ zᵢᵀ C zᵢ` with `C` held constant.
    pub fn quad_form_sum(&self, c: &Matrix) -> Result<Var<'t>> {
        let d = self.shape.1;
        if c.shape() != (d, d) {
            return Err(Error::ShapeMismatch {
                op: "quad_form_sum",
                left: self.shape,
                right: c.shape(),
            });
        }
        let value = self.with_value(|z| -> Result<f64> {
            let zc = z.matmul(c)?;
            Ok(zc.hadamard(z)?.sum())
        })?;
        Ok(self.tape.push(
            Op::QuadFormSum {
                z: self.idx,
                c: c.clone(),
            },
            Matrix::scalar(value),
        ))
    }

    /// Row-wise `log Σⱼ exp(xᵢⱼ)` with max subtraction, as an `n x 1` column.
    pub fn row_logsumexp(&self) -> Var<'t> {
        let value = self.with_value(|m| {
            let data = (0..m.rows()).map(|r| logsumexp(m.row(r))).collect();
            Matrix::from_vec(m.rows(), 1, data).expect("column shape")
        });
        self.tape.push(Op::RowLogSumExp(self.idx), value)
    }
}

/// Numerically stable `log Σ exp(xᵢ)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[doc(hidden)]
pub fn op_name_of(var: Var<'_>) -> &'static str {
    var.tape.nodes.borrow()[var.idx].op.name()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, random_matrix};

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let w = tape.param(Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]));
        let loss = w.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let w = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(w),
            Err(Error::NonScalarLoss { shape: (2, 2) })
        ));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let w = tape.param(random_matrix(3, 4, 1));
        let c = tape.constant(random_matrix(3, 4, 2));
        let loss = w.mul(&c).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(c), Matrix::zeros(3, 4));
        assert!(g.get(w).is_some());
        assert!(!c.requires_grad());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let tape = Tape::new();
        let w = tape.param(random_matrix(2, 3, 3));
        let loss = w.add(&w).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &Matrix::filled(2, 3, 2.0));
    }

    #[test]
    fn normalize_rows_gradient_is_tangent() {
        let tape = Tape::new();
        let x = random_matrix(4, 5, 4);
        let xv = tape.param(x.clone());
        let weights = tape.constant(random_matrix(4, 5, 5));
        let loss = xv.normalize_rows(1e-12).mul(&weights).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(xv).unwrap();
        for r in 0..4 {
            let dot: f64 = gx.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-12, "row {r}: {dot}");
        }
        // (I − x̂x̂ᵀ)/‖x‖ applied to the upstream gradient.
        let w = weights.value();
        for r in 0..4 {
            let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let xh: Vec<f64> = x.row(r).iter().map(|v| v / norm).collect();
            let proj: f64 = xh.iter().zip(w.row(r)).map(|(a, b)| a * b).sum();
            for c in 0..5 {
                let expected = (w[(r, c)] - xh[c] * proj) / norm;
                assert!((gx[(r, c)] - expected).abs() < 1e-12);
            }
        }
        check(&[x], |t, v| Ok(v[0].normalize_rows(1e-12).mul(&t.constant(w.clone()))?.sum())).unwrap();
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[0.0]), 0.0);
    }

    #[test]
    fn batchnorm_needs_two_rows() {
        let tape = Tape::new();
        let x = tape.param(Matrix::zeros(1, 3));
        let g = tape.constant(Matrix::filled(1, 3, 1.0));
        let b = tape.constant(Matrix::zeros(1, 3));
        assert!(matches!(x.batchnorm(&g, &b, 1e-5), Err(Error::TooFewRows { .. })));
    }
}
