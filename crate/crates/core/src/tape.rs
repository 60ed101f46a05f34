//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse insertion order, so the
//! recorded graph is acyclic by construction. Values introduced through
//! [`Tape::constant`] never receive gradients; this is how stop-gradient
//! quantities (noise draws, optimal-transport assignments) enter a loss.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::matrix::{dot, Csr, Matrix};
use crate::scalar::{elu_plus_one, sigmoid, softplus, Scalar};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A sparse operator together with its transpose, for use in [`Tape::spmm`].
#[derive(Clone, Debug)]
pub struct SparseOp<T> {
    pub forward: Csr<T>,
    pub transpose: Csr<T>,
}

impl<T: Scalar> SparseOp<T> {
    pub fn new(forward: Csr<T>) -> Arc<Self> {
        let transpose = forward.transpose();
        Arc::new(Self { forward, transpose })
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Spmm(Arc<SparseOp<T>>, Var),
    Gather(Var, Arc<[usize]>),
    PickCols(Var, Arc<[usize]>),
    EluPlusOne(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    LogSoftmaxRows(Var),
    RowDot(Var, Var),
    NormalizeRows(Var, T),
    Sum(Var),
    FrobeniusConst(Var, Arc<Matrix<T>>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar output with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn same_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

fn log_softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let lse = crate::scalar::log_sum_exp(x.row(r));
        for v in out.row_mut(r) {
            *v -= lse;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Differentiable input (a trainable parameter).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scaled(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    /// Sparse-dense product with a constant sparse operator.
    pub fn spmm(&mut self, op: &Arc<SparseOp<T>>, x: Var) -> Result<Var> {
        let v = op.forward.mul_dense(self.value(x))?;
        Ok(self.push(v, Op::Spmm(Arc::clone(op), x)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::IdOutOfBounds { id: bad, bound: rows });
        }
        let v = self.value(a).gather_rows(idx);
        Ok(self.push(v, Op::Gather(a, idx.into())))
    }

    /// Column vector `out[r] = a[r, cols[r]]`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let m = self.value(a);
        if cols.len() != m.rows() {
            return Err(dim_err(m.rows(), cols.len()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= m.cols()) {
            return Err(Error::IdOutOfBounds { id: bad, bound: m.cols() });
        }
        let v = Matrix::from_fn(m.rows(), 1, |r, _| m.get(r, cols[r]));
        Ok(self.push(v, Op::PickCols(a, cols.into())))
    }

    /// `ELU(x) + 1` with unit ELU scale.
    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        let v = self.value(a).map(elu_plus_one);
        self.push(v, Op::EluPlusOne(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        self.push(v, Op::Log(a))
    }

    /// Elementwise `ln(1 + exp(x))`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Column vector of row-wise dot products.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let v = Matrix::from_fn(x.rows(), 1, |r, _| dot(x.row(r), y.row(r)));
        Ok(self.push(v, Op::RowDot(a, b)))
    }

    /// Rows scaled to unit L2 norm; rows with norm below `eps` are divided by `eps`.
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let n = dot(v.row(r), v.row(r)).sqrt().max(eps);
            for x in v.row_mut(r) {
                *x /= n;
            }
        }
        self.push(v, Op::NormalizeRows(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `Σ a ⊙ c` where `c` is held constant.
    pub fn frobenius_const(&mut self, a: Var, c: Arc<Matrix<T>>) -> Result<Var> {
        same_shape(self.value(a), &c)?;
        let v = Matrix::scalar(
            self.value(a)
                .data()
                .iter()
                .zip(c.data())
                .fold(T::zero(), |s, (&x, &y)| s + x * y),
        );
        Ok(self.push(v, Op::FrobeniusConst(a, c)))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or(Error::EmptySampleList)?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Reverse pass from a 1x1 output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let (r, c) = self.value(out).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarOutput { rows: r, cols: c });
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Matrix::scalar(T::one()));

        fn accum<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *b, g.scaled(-T::one()));
                    accum(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accum(&mut grads, *a, g.scaled(*c)),
                Op::MatMul(a, b) => {
                    // y = A B: dA = G Bᵀ, dB = Aᵀ G
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // y = A Bᵀ: dA = G B, dB = Gᵀ A
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.t_matmul(self.value(*a))?;
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::Spmm(op, x) => accum(&mut grads, *x, op.transpose.mul_dense(&g)?),
                Op::Gather(a, idx) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        for (o, &v) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::PickCols(a, cols) => {
                    let src = self.value(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        ga.set(r, c, g.get(r, 0));
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::EluPlusOne(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| {
                        if x >= T::zero() {
                            gv
                        } else {
                            gv * x.exp()
                        }
                    });
                    accum(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    accum(&mut grads, *a, g.zip_map(y, |gv, s| gv * T::lit(0.5) / s));
                }
                Op::Exp(a) => accum(&mut grads, *a, g.zip_map(y, |gv, e| gv * e)),
                Op::Log(a) => {
                    accum(&mut grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x));
                }
                Op::Softplus(a) => {
                    accum(&mut grads, *a, g.zip_map(self.value(*a), |gv, x| gv * sigmoid(x)));
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let gs: T = g.row(r).iter().copied().sum();
                        for (o, &ly) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= ly.exp() * gs;
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let (x, z) = (self.value(*a), self.value(*b));
                    let ga = Matrix::from_fn(x.rows(), x.cols(), |r, c| g.get(r, 0) * z.get(r, c));
                    let gb = Matrix::from_fn(x.rows(), x.cols(), |r, c| g.get(r, 0) * x.get(r, c));
                    accum(&mut grads, *a, ga);
                    accum(&mut grads, *b, gb);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = self.value(*a);
                    let mut ga = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = dot(x.row(r), x.row(r)).sqrt();
                        let gr = g.row(r);
                        if norm > *eps {
                            let yg = dot(y.row(r), gr);
                            for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gr).zip(y.row(r)) {
                                *o = (gv - yv * yg) / norm;
                            }
                        } else {
                            for (o, &gv) in ga.row_mut(r).iter_mut().zip(gr) {
                                *o = gv / *eps;
                            }
                        }
                    }
                    accum(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accum(&mut grads, *a, Matrix::filled(r, c, g.item()));
                }
                Op::FrobeniusConst(a, c) => accum(&mut grads, *a, c.scaled(g.item())),
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn square_has_derivative_two_x() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(t.scalar_value(y), 9.0);
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, 2.0]]));
        let c = t.constant(Matrix::scalar(5.0));
        let g = t.backward(c).unwrap();
        assert_eq!(g.wrt(x), Matrix::zeros(1, 2));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(m(&[vec![1.0, 2.0]]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarOutput { .. })));
    }

    /// Central differences over every entry of every leaf.
    fn check(build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, inputs: &[Matrix<f64>]) {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = build(&mut t, &vars);
        let g = t.backward(out).unwrap();
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let an = g.wrt(vars[k]);
            for i in 0..x.data().len() {
                let eval = |d: f64| {
                    let mut xs = inputs.to_vec();
                    xs[k].data_mut()[i] += d;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = xs.into_iter().map(|x| t.leaf(x)).collect();
                    let o = build(&mut t, &vs);
                    t.scalar_value(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = an.data()[i];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} entry {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let a = m(&[vec![0.3, -1.2, 0.5], vec![1.1, 0.4, -0.7]]);
        let b = m(&[vec![-0.4, 0.9, 0.2], vec![0.6, -0.3, 1.5]]);
        check(
            |t, v| {
                let p = t.matmul_t(v[0], v[1]).unwrap();
                let ls = t.log_softmax_rows(p);
                let q = t.pick_cols(ls, &[1, 0]).unwrap();
                t.sum(q)
            },
            &[a.clone(), b.clone()],
        );
        check(
            |t, v| {
                let n = t.normalize_rows(v[0], 1e-12);
                let e = t.elu_plus_one(v[1]);
                let s = t.sqrt(e);
                let p = t.mul(n, s).unwrap();
                let d = t.row_dot(p, v[1]).unwrap();
                let sp = t.softplus(d);
                t.mean(sp)
            },
            &[a.clone(), b.clone()],
        );
        check(
            |t, v| {
                let bt = t.constant(b.transpose());
                let p = t.matmul(v[0], bt).unwrap();
                let e = t.exp(p);
                let l = t.ln(e);
                let g = t.gather_rows(l, &[1, 1, 0]).unwrap();
                let s = t.scale(g, -2.0);
                t.sum(s)
            },
            std::slice::from_ref(&a),
        );
        let op = SparseOp::new(Csr::from_triplets(3, 2, &[(0, 1, 0.5), (2, 0, 2.0), (2, 1, -1.0)]));
        check(
            |t, v| {
                let y = t.spmm(&op, v[0]).unwrap();
                let c = Arc::new(Matrix::from_fn(3, 3, |r, c| (r + 2 * c) as f64));
                let y2 = t.mul(y, y).unwrap();
                t.frobenius_const(y2, c).unwrap()
            },
            &[a],
        );
    }
}
