//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each primitive appends a
//! node holding its output value and input references; [`Tape::backward`]
//! walks the nodes once in reverse and accumulates adjoints.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Vectors whose norm falls below this are normalized to zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    /// Numerically stabilized softmax over each row.
    SoftmaxRows,
    /// L2-normalizes every column independently.
    NormalizeCols,
    Transpose,
    SumAll,
    /// `n x m -> n x 1`
    SumRows,
    /// `n x m -> 1 x m`
    SumCols,
    /// Elementwise maximum over equally shaped inputs.
    MaxOf,
    /// Euclidean (Frobenius) norm, `-> 1 x 1`.
    Norm,
    /// Horizontal concatenation.
    HCat,
    /// Vertical concatenation.
    VCat,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::NormalizeCols => "normalize_cols",
            Primitive::Transpose => "transpose",
            Primitive::SumAll => "sum",
            Primitive::SumRows => "sum_rows",
            Primitive::SumCols => "sum_cols",
            Primitive::MaxOf => "max_of",
            Primitive::Norm => "norm",
            Primitive::HCat => "hcat",
            Primitive::VCat => "vcat",
        }
    }

    /// Forward evaluation with shape checking.
    pub fn eval(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let name = self.name();
        let unary = |inputs: &[&Matrix]| -> Result<()> {
            if inputs.len() != 1 {
                return Err(Error::Arity {
                    primitive: name,
                    expected: "1",
                    got: inputs.len(),
                });
            }
            Ok(())
        };
        let binary_same = |inputs: &[&Matrix]| -> Result<()> {
            if inputs.len() != 2 {
                return Err(Error::Arity {
                    primitive: name,
                    expected: "2",
                    got: inputs.len(),
                });
            }
            if inputs[0].shape() != inputs[1].shape() {
                return Err(Error::Shape {
                    primitive: name,
                    lhs: inputs[0].shape(),
                    rhs: inputs[1].shape(),
                });
            }
            Ok(())
        };

        let out = match *self {
            Primitive::MatMul => {
                if inputs.len() != 2 {
                    return Err(Error::Arity {
                        primitive: name,
                        expected: "2",
                        got: inputs.len(),
                    });
                }
                inputs[0].matmul(inputs[1])?
            }
            Primitive::Add => {
                binary_same(inputs)?;
                inputs[0].zip_map(inputs[1], |a, b| a + b)
            }
            Primitive::Sub => {
                binary_same(inputs)?;
                inputs[0].zip_map(inputs[1], |a, b| a - b)
            }
            Primitive::Mul => {
                binary_same(inputs)?;
                inputs[0].zip_map(inputs[1], |a, b| a * b)
            }
            Primitive::Scale(s) => {
                unary(inputs)?;
                inputs[0].map(|v| v * s)
            }
            Primitive::AddScalar(s) => {
                unary(inputs)?;
                inputs[0].map(|v| v + s)
            }
            Primitive::Sigmoid => {
                unary(inputs)?;
                inputs[0].map(sigmoid)
            }
            Primitive::Tanh => {
                unary(inputs)?;
                inputs[0].map(f64::tanh)
            }
            Primitive::Relu => {
                unary(inputs)?;
                inputs[0].map(|v| v.max(0.0))
            }
            Primitive::Exp => {
                unary(inputs)?;
                inputs[0].map(f64::exp)
            }
            Primitive::SoftmaxRows => {
                unary(inputs)?;
                softmax_rows(inputs[0])
            }
            Primitive::NormalizeCols => {
                unary(inputs)?;
                normalize_cols(inputs[0])
            }
            Primitive::Transpose => {
                unary(inputs)?;
                inputs[0].transpose()
            }
            Primitive::SumAll => {
                unary(inputs)?;
                Matrix::scalar(inputs[0].sum())
            }
            Primitive::SumRows => {
                unary(inputs)?;
                let x = inputs[0];
                let sums: Vec<f64> = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
                Matrix::column(&sums)
            }
            Primitive::SumCols => {
                unary(inputs)?;
                let x = inputs[0];
                let mut sums = vec![0.0; x.cols()];
                for r in 0..x.rows() {
                    for (s, v) in sums.iter_mut().zip(x.row_slice(r)) {
                        *s += v;
                    }
                }
                Matrix::row_vector(&sums)
            }
            Primitive::MaxOf => {
                let first = inputs.first().ok_or(Error::Arity {
                    primitive: name,
                    expected: ">=1",
                    got: 0,
                })?;
                let mut out = (*first).clone();
                for x in &inputs[1..] {
                    if x.shape() != first.shape() {
                        return Err(Error::Shape {
                            primitive: name,
                            lhs: first.shape(),
                            rhs: x.shape(),
                        });
                    }
                    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                        if v > *o {
                            *o = v;
                        }
                    }
                }
                out
            }
            Primitive::Norm => {
                unary(inputs)?;
                Matrix::scalar(inputs[0].norm())
            }
            Primitive::HCat => {
                let first = inputs.first().ok_or(Error::Arity {
                    primitive: name,
                    expected: ">=1",
                    got: 0,
                })?;
                let rows = first.rows();
                let mut cols = 0;
                for x in inputs {
                    if x.rows() != rows {
                        return Err(Error::Shape {
                            primitive: name,
                            lhs: first.shape(),
                            rhs: x.shape(),
                        });
                    }
                    cols += x.cols();
                }
                let mut out = Matrix::zeros(rows, cols);
                let mut offset = 0;
                for x in inputs {
                    for r in 0..rows {
                        for c in 0..x.cols() {
                            out.set(r, offset + c, x.get(r, c));
                        }
                    }
                    offset += x.cols();
                }
                out
            }
            Primitive::VCat => {
                let first = inputs.first().ok_or(Error::Arity {
                    primitive: name,
                    expected: ">=1",
                    got: 0,
                })?;
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for x in inputs {
                    if x.cols() != cols {
                        return Err(Error::Shape {
                            primitive: name,
                            lhs: first.shape(),
                            rhs: x.shape(),
                        });
                    }
                    data.extend_from_slice(x.data());
                    rows += x.rows();
                }
                Matrix::from_vec(rows, cols, data)?
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(out)
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
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

fn column_norms(x: &Matrix) -> Vec<f64> {
    let mut norms = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (n, v) in norms.iter_mut().zip(x.row_slice(r)) {
            *n += v * v;
        }
    }
    norms.iter_mut().for_each(|n| *n = n.sqrt());
    norms
}

pub(crate) fn normalize_cols(x: &Matrix) -> Matrix {
    let norms = column_norms(x);
    let mut out = x.clone();
    let cols = x.cols();
    for r in 0..x.rows() {
        for c in 0..cols {
            let n = norms[c];
            let v = &mut out.data_mut()[r * cols + c];
            *v = if n < NORM_FLOOR { 0.0 } else { *v / n };
        }
    }
    out
}

struct Node {
    value: Matrix,
    op: Option<Primitive>,
    inputs: Vec<Var>,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradient of a scalar output, keyed by parameter name.
pub type Gradients = BTreeMap<String, Matrix>;

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

    /// Position to later [`truncate`](Self::truncate) back to.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`; handles to them become
    /// invalid. Parameters must have been registered before `mark`.
    pub fn truncate(&mut self, mark: usize) {
        debug_assert!(self.params.iter().all(|(_, v)| v.0 < mark));
        self.nodes.truncate(mark);
    }

    fn push(&mut self, value: Matrix, op: Option<Primitive>, inputs: Vec<Var>) -> Var {
        self.nodes.push(Node { value, op, inputs });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, None, Vec::new())
    }

    /// Trainable leaf. Registering a name twice returns the first handle.
    pub fn param(&mut self, name: &str, value: &Matrix) -> Var {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let var = self.push(value.clone(), None, Vec::new());
        self.params.push((name.to_string(), var));
        var
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.eval(&values)?;
        Ok(self.push(out, Some(op), inputs.to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }

    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::NormalizeCols, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumRows, &[a])
    }

    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumCols, &[a])
    }

    pub fn max_of(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::MaxOf, xs)
    }

    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Norm, &[a])
    }

    pub fn hcat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::HCat, xs)
    }

    pub fn vcat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::VCat, xs)
    }

    /// Accumulates d(output)/d(param) for every registered parameter.
    ///
    /// Parameters that do not influence `output` receive zero matrices.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.value(output).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalar(shape));
        }
        let mut adjoints: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(op) = node.op {
                let contributions = self.local_backward(op, node, &grad);
                for (input, g) in node.inputs.iter().zip(contributions) {
                    if let Some(g) = g {
                        match &mut adjoints[input.0] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
            }
            // Keep leaf adjoints for parameter lookup.
            if node.op.is_none() {
                adjoints[idx] = Some(grad);
            }
        }

        let mut out = Gradients::new();
        for (name, var) in &self.params {
            let g = adjoints
                .get(var.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| {
                    let (r, c) = self.value(*var).shape();
                    Matrix::zeros(r, c)
                });
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn local_backward(&self, op: Primitive, node: &Node, grad: &Matrix) -> Vec<Option<Matrix>> {
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let y = &node.value;
        match op {
            Primitive::MatMul => {
                let a = input(0);
                let b = input(1);
                let da = grad.matmul(&b.transpose()).expect("matmul adjoint");
                let db = a.transpose().matmul(grad).expect("matmul adjoint");
                vec![Some(da), Some(db)]
            }
            Primitive::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Primitive::Sub => vec![Some(grad.clone()), Some(grad.map(|v| -v))],
            Primitive::Mul => vec![
                Some(grad.zip_map(input(1), |g, b| g * b)),
                Some(grad.zip_map(input(0), |g, a| g * a)),
            ],
            Primitive::Scale(s) => vec![Some(grad.map(|g| g * s))],
            Primitive::AddScalar(_) => vec![Some(grad.clone())],
            Primitive::Sigmoid => vec![Some(grad.zip_map(y, |g, s| g * s * (1.0 - s)))],
            Primitive::Tanh => vec![Some(grad.zip_map(y, |g, t| g * (1.0 - t * t)))],
            Primitive::Relu => vec![Some(grad.zip_map(input(0), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Primitive::Exp => vec![Some(grad.zip_map(y, |g, e| g * e))],
            Primitive::SoftmaxRows => {
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row_slice(r);
                    let gr = grad.row_slice(r);
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols() {
                        dx.set(r, c, yr[c] * (gr[c] - inner));
                    }
                }
                vec![Some(dx)]
            }
            Primitive::NormalizeCols => {
                let x = input(0);
                let norms = column_norms(x);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for c in 0..x.cols() {
                    if norms[c] < NORM_FLOOR {
                        continue;
                    }
                    let inner: f64 = (0..x.rows()).map(|r| y.get(r, c) * grad.get(r, c)).sum();
                    for r in 0..x.rows() {
                        dx.set(r, c, (grad.get(r, c) - y.get(r, c) * inner) / norms[c]);
                    }
                }
                vec![Some(dx)]
            }
            Primitive::Transpose => vec![Some(grad.transpose())],
            Primitive::SumAll => {
                let (r, c) = input(0).shape();
                vec![Some(Matrix::filled(r, c, grad.item()))]
            }
            Primitive::SumRows => {
                let (r, c) = input(0).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        dx.set(i, j, grad.get(i, 0));
                    }
                }
                vec![Some(dx)]
            }
            Primitive::SumCols => {
                let (r, c) = input(0).shape();
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        dx.set(i, j, grad.get(0, j));
                    }
                }
                vec![Some(dx)]
            }
            Primitive::MaxOf => {
                // Route each entry to the first input attaining the max.
                let n = node.inputs.len();
                let mut grads: Vec<Option<Matrix>> = vec![None; n];
                for e in 0..y.len() {
                    let winner = (0..n)
                        .find(|&i| input(i).data()[e] == y.data()[e])
                        .unwrap_or(0);
                    let g = grads[winner].get_or_insert_with(|| {
                        let (r, c) = y.shape();
                        Matrix::zeros(r, c)
                    });
                    g.data_mut()[e] += grad.data()[e];
                }
                grads
            }
            Primitive::Norm => {
                let x = input(0);
                let n = y.item();
                if n < NORM_FLOOR {
                    vec![None]
                } else {
                    let g = grad.item();
                    vec![Some(x.map(|v| g * v / n))]
                }
            }
            Primitive::HCat => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|v| {
                        let x = &self.nodes[v.0].value;
                        let mut dx = Matrix::zeros(x.rows(), x.cols());
                        for r in 0..x.rows() {
                            for c in 0..x.cols() {
                                dx.set(r, c, grad.get(r, offset + c));
                            }
                        }
                        offset += x.cols();
                        Some(dx)
                    })
                    .collect()
            }
            Primitive::VCat => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|v| {
                        let x = &self.nodes[v.0].value;
                        let len = x.len();
                        let dx = Matrix::from_vec(
                            x.rows(),
                            x.cols(),
                            grad.data()[offset..offset + len].to_vec(),
                        )
                        .expect("vcat adjoint");
                        offset += len;
                        Some(dx)
                    })
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(&[0.0, 0.0]));
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y), &Matrix::row_vector(&[0.5, 0.5]));
    }

    #[test]
    fn normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(&[3.0, 4.0]));
        let y = t.normalize_cols(x).unwrap();
        assert!(t.value(y).max_abs_diff(&Matrix::column(&[0.6, 0.8])) < 1e-15);
    }

    #[test]
    fn normalize_zero_vector_is_zero() {
        let mut t = Tape::new();
        let x = t.param("x", &Matrix::column(&[0.0, 0.0]));
        let y = t.normalize_cols(x).unwrap();
        assert_eq!(t.value(y), &Matrix::zeros(2, 1));
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap()["x"], Matrix::zeros(2, 1));
    }

    #[test]
    fn matmul_primitive() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = t.constant(Matrix::column(&[1.0, 1.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &Matrix::column(&[3.0, 7.0]));
    }

    #[test]
    fn shape_mismatch_is_structured() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 2));
        let b = t.constant(Matrix::zeros(3, 1));
        match t.add(a, b) {
            Err(Error::Shape { primitive, lhs, rhs }) => {
                assert_eq!(primitive, "add");
                assert_eq!(lhs, (2, 2));
                assert_eq!(rhs, (3, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param("x", &Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]));
        let s = t.sum(x).unwrap();
        assert_eq!(t.backward(s).unwrap()["x"], Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let mut t = Tape::new();
        t.param("x", &Matrix::from_rows(&[[1.0, 2.0]]));
        let c = t.constant(Matrix::scalar(4.0));
        let s = t.sum(c).unwrap();
        assert_eq!(t.backward(s).unwrap()["x"], Matrix::zeros(1, 2));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.param("x", &Matrix::from_rows(&[[1.0, 2.0]]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.backward(s).unwrap()["x"], Matrix::from_rows(&[[2.0, 4.0]]));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.param("x", &Matrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::NonScalar((2, 1)))));
    }

    #[test]
    fn exp_overflow_is_reported() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(1e4));
        assert!(matches!(t.exp(x), Err(Error::NonFinite("exp"))));
    }
}
