//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive applied to a [`Var`] evaluates eagerly and appends a node
//! to its [`Tape`]. Nodes are stored in creation order, so the tape is always
//! topologically sorted and the backward sweep is a single reverse pass.
//!
//! Leaves are created either with [`Tape::param`] (gradients flow into them)
//! or [`Tape::constant`] (they are frozen). Nodes whose inputs are all frozen
//! are frozen too and are skipped by the backward sweep; this is how the
//! solvers train one parameter group while holding another fixed.
//!
//! There is no implicit broadcasting. The two broadcasting primitives,
//! [`Var::add_row`] and [`Var::broadcast_last`], say which axis they expand.

use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Elu(usize),
    Cos(usize),
    Sin(usize),
    Tan(usize),
    Exp(usize),
    Ln(usize),
    Recip(usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    AddRow(usize, usize),
    Affine(usize, usize, usize),
    BroadcastLast(usize),
    SumLast(usize),
    SumAll(usize),
    MeanAll(usize),
    LogSumExpLast(usize),
    ConcatLast(usize, usize),
    Reshape(usize),
    BatchMatVec(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn owns(&self, var: &Var<'_>) -> bool {
        std::ptr::eq(self, var.tape)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Variables the output does not depend on (including frozen leaves and
    /// nodes recorded after the output) receive a zero gradient.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        if !self.owns(&output) {
            return Err(TensorError::UnknownVar(output.id));
        }
        if let Some(bad) = wrt.iter().find(|v| !self.owns(v)) {
            return Err(TensorError::UnknownVar(bad.id));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(TensorError::NonScalarOutput(out.value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(output.id + 1, || None);
        if out.requires_grad {
            grads[output.id] = Some(Tensor::full(out.value.shape(), 1.0));
        }

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, node, g, &mut grads);
        }

        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.id)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(nodes[v.id].value.shape()))
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a `[rows, cols]` tensor over its rows.
fn column_sums(g: &Tensor) -> Tensor {
    let (rows, cols) = split_last(g.shape());
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in out.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
            *acc += v;
        }
    }
    Tensor::vector(out)
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let outer = shape[..shape.len().saturating_sub(1)].iter().product();
    (outer, last)
}

/// `c = beta*c + a*b` for strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted buffer lengths cover every element addressed by
    // the strides below, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backprop(nodes: &[Node], node: &Node, mut g: Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let scale_by = |g: &mut Tensor, by: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
        for (gv, &x) in g.data_mut().iter_mut().zip(by.data()) {
            *gv = f(*gv, x);
        }
    };
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if needs(a) && needs(b) {
                accumulate(grads, nodes, a, g.clone());
                accumulate(grads, nodes, b, g);
            } else {
                accumulate(grads, nodes, if needs(a) { a } else { b }, g);
            }
        }
        Op::Sub(a, b) => {
            if needs(a) {
                if needs(b) {
                    accumulate(grads, nodes, b, g.map(|v| -v));
                }
                accumulate(grads, nodes, a, g);
            } else {
                g.data_mut().iter_mut().for_each(|v| *v = -*v);
                accumulate(grads, nodes, b, g);
            }
        }
        Op::Mul(a, b) => {
            if needs(b) {
                accumulate(grads, nodes, b, g.zip_map(val(a), |g, x| g * x));
            }
            if needs(a) {
                scale_by(&mut g, val(b), &|g, y| g * y);
                accumulate(grads, nodes, a, g);
            }
        }
        Op::Neg(a) => {
            g.data_mut().iter_mut().for_each(|v| *v = -*v);
            accumulate(grads, nodes, a, g);
        }
        Op::Scale(a, c) => {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
            accumulate(grads, nodes, a, g);
        }
        Op::Offset(a) => accumulate(grads, nodes, a, g),
        Op::Elu(a) => {
            // for x < 0 the derivative e^x equals output + 1
            for ((gv, &x), &y) in g.data_mut().iter_mut().zip(val(a).data()).zip(node.value.data()) {
                if x < 0.0 {
                    *gv *= y + 1.0;
                }
            }
            accumulate(grads, nodes, a, g);
        }
        Op::Cos(a) => {
            scale_by(&mut g, val(a), &|g, x| -g * x.sin());
            accumulate(grads, nodes, a, g);
        }
        Op::Sin(a) => {
            scale_by(&mut g, val(a), &|g, x| g * x.cos());
            accumulate(grads, nodes, a, g);
        }
        Op::Tan(a) => {
            scale_by(&mut g, &node.value, &|g, t| g * (1.0 + t * t));
            accumulate(grads, nodes, a, g);
        }
        Op::Exp(a) => {
            scale_by(&mut g, &node.value, &|g, e| g * e);
            accumulate(grads, nodes, a, g);
        }
        Op::Ln(a) => {
            scale_by(&mut g, val(a), &|g, x| g / x);
            accumulate(grads, nodes, a, g);
        }
        Op::Recip(a) => {
            scale_by(&mut g, &node.value, &|g, r| -g * r * r);
            accumulate(grads, nodes, a, g);
        }
        Op::MatMul(a, b) => {
            // c[m,n] = a[m,k] b[k,n]
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if needs(a) {
                let mut da = Tensor::zeros(av.shape());
                gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), 0.0, da.data_mut());
                accumulate(grads, nodes, a, da);
            }
            if needs(b) {
                let mut db = Tensor::zeros(bv.shape());
                gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), 0.0, db.data_mut());
                accumulate(grads, nodes, b, db);
            }
        }
        Op::MatMulT(a, w) => {
            // c[m,n] = a[m,k] w[n,k]^T
            let (av, wv) = (val(a), val(w));
            let (m, k, n) = (av.shape()[0], av.shape()[1], wv.shape()[0]);
            if needs(a) {
                let mut da = Tensor::zeros(av.shape());
                gemm(m, n, k, g.data(), (n, 1), wv.data(), (k, 1), 0.0, da.data_mut());
                accumulate(grads, nodes, a, da);
            }
            if needs(w) {
                let mut dw = Tensor::zeros(wv.shape());
                gemm(n, m, k, g.data(), (1, n), av.data(), (k, 1), 0.0, dw.data_mut());
                accumulate(grads, nodes, w, dw);
            }
        }
        Op::AddRow(a, b) => {
            if needs(b) {
                accumulate(grads, nodes, b, column_sums(&g));
            }
            accumulate(grads, nodes, a, g);
        }
        Op::Affine(a, w, b) => {
            // c[m,n] = a[m,k] w[n,k]^T + b[n]
            let (av, wv) = (val(a), val(w));
            let (m, k, n) = (av.shape()[0], av.shape()[1], wv.shape()[0]);
            if needs(a) {
                let mut da = Tensor::zeros(av.shape());
                gemm(m, n, k, g.data(), (n, 1), wv.data(), (k, 1), 0.0, da.data_mut());
                accumulate(grads, nodes, a, da);
            }
            if needs(w) {
                let mut dw = Tensor::zeros(wv.shape());
                gemm(n, m, k, g.data(), (1, n), av.data(), (k, 1), 0.0, dw.data_mut());
                accumulate(grads, nodes, w, dw);
            }
            if needs(b) {
                accumulate(grads, nodes, b, column_sums(&g));
            }
        }
        Op::BroadcastLast(a) => {
            let (outer, last) = split_last(g.shape());
            let data = (0..outer)
                .map(|r| g.data()[r * last..(r + 1) * last].iter().sum())
                .collect();
            let da = Tensor::new(val(a).shape().to_vec(), data).expect("broadcast shape");
            accumulate(grads, nodes, a, da);
        }
        Op::SumLast(a) => {
            let (outer, last) = split_last(val(a).shape());
            let mut data = Vec::with_capacity(outer * last);
            for &gv in g.data() {
                data.extend(std::iter::repeat_n(gv, last));
            }
            let da = Tensor::new(val(a).shape().to_vec(), data).expect("sum shape");
            accumulate(grads, nodes, a, da);
        }
        Op::SumAll(a) => {
            let gv = g.data()[0];
            accumulate(grads, nodes, a, Tensor::full(val(a).shape(), gv));
        }
        Op::MeanAll(a) => {
            let av = val(a);
            let gv = g.data()[0] / av.len() as f64;
            accumulate(grads, nodes, a, Tensor::full(av.shape(), gv));
        }
        Op::LogSumExpLast(a) => {
            let av = val(a);
            let (outer, last) = split_last(av.shape());
            let mut da = Tensor::zeros(av.shape());
            for r in 0..outer {
                let lse = node.value.data()[r];
                let gv = g.data()[r];
                for j in 0..last {
                    let idx = r * last + j;
                    da.data_mut()[idx] = gv * (av.data()[idx] - lse).exp();
                }
            }
            accumulate(grads, nodes, a, da);
        }
        Op::ConcatLast(a, b) => {
            let (outer, k1) = split_last(val(a).shape());
            let (_, k2) = split_last(val(b).shape());
            let width = k1 + k2;
            if needs(a) {
                let mut data = Vec::with_capacity(outer * k1);
                for r in 0..outer {
                    data.extend_from_slice(&g.data()[r * width..r * width + k1]);
                }
                let da = Tensor::new(val(a).shape().to_vec(), data).expect("concat shape");
                accumulate(grads, nodes, a, da);
            }
            if needs(b) {
                let mut data = Vec::with_capacity(outer * k2);
                for r in 0..outer {
                    data.extend_from_slice(&g.data()[r * width + k1..(r + 1) * width]);
                }
                let db = Tensor::new(val(b).shape().to_vec(), data).expect("concat shape");
                accumulate(grads, nodes, b, db);
            }
        }
        Op::Reshape(a) => {
            let da = g
                .reshaped(val(a).shape().to_vec())
                .expect("reshape preserves length");
            accumulate(grads, nodes, a, da);
        }
        Op::BatchMatVec(a, b) => {
            // c[i,r] = sum_j a[i,r,j] b[i,j]
            let (av, bv) = (val(a), val(b));
            let (m, n, d) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            if needs(a) {
                let mut da = Tensor::zeros(av.shape());
                for i in 0..m {
                    for r in 0..n {
                        let gv = g.data()[i * n + r];
                        for j in 0..d {
                            da.data_mut()[(i * n + r) * d + j] = gv * bv.data()[i * d + j];
                        }
                    }
                }
                accumulate(grads, nodes, a, da);
            }
            if needs(b) {
                let mut db = Tensor::zeros(bv.shape());
                for i in 0..m {
                    for r in 0..n {
                        let gv = g.data()[i * n + r];
                        for j in 0..d {
                            db.data_mut()[i * d + j] += gv * av.data()[(i * n + r) * d + j];
                        }
                    }
                }
                accumulate(grads, nodes, b, db);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value. Drop it before recording new nodes.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of this value as a frozen leaf.
    pub fn detach(&self) -> Var<'t> {
        let value = self.to_tensor();
        self.tape.constant(value)
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(other.id))
        }
    }

    fn elementwise(
        self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            a.zip_map(&b, f)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, op(self.id, other.id), rg))
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn check_domain(&self, name: &'static str, ok: impl Fn(f64) -> bool) -> Result<()> {
        let value = self.value();
        match value.data().iter().position(|&v| !ok(v)) {
            Some(index) => Err(TensorError::Domain {
                op: name,
                index,
                value: value.data()[index],
            }),
            None => Ok(()),
        }
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    /// Componentwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(other, "hadamard", Op::Mul, |a, b| a * b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), move |a| c * a)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), move |a| a + c)
    }

    /// Exponential linear unit with `alpha = 1`.
    pub fn elu(self) -> Var<'t> {
        self.unary(Op::Elu(self.id), |a| if a >= 0.0 { a } else { a.exp() - 1.0 })
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn tan(self) -> Var<'t> {
        self.unary(Op::Tan(self.id), f64::tan)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn ln(self) -> Result<Var<'t>> {
        self.check_domain("log", |v| v > 0.0)?;
        Ok(self.unary(Op::Ln(self.id), f64::ln))
    }

    /// `1/x`; every entry must be nonzero.
    pub fn recip(self) -> Result<Var<'t>> {
        self.check_domain("recip", |v| v != 0.0)?;
        Ok(self.unary(Op::Recip(self.id), f64::recip))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let ok = a.shape().len() == 2 && b.shape().len() == 2 && a.shape()[1] == b.shape()[0];
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = Tensor::zeros(&[m, n]);
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, c.data_mut());
            c
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`, the layout of a dense layer's weight.
    pub fn matmul_transposed(self, weight: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        let value = {
            let (a, w) = (self.value(), weight.value());
            let ok = a.shape().len() == 2 && w.shape().len() == 2 && a.shape()[1] == w.shape()[1];
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul_transposed",
                    lhs: a.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], w.shape()[0]);
            let mut c = Tensor::zeros(&[m, n]);
            gemm(m, k, n, a.data(), (k, 1), w.data(), (1, k), 0.0, c.data_mut());
            c
        };
        let rg = self.tape.requires(&[self.id, weight.id]);
        Ok(self.tape.push(value, Op::MatMulT(self.id, weight.id), rg))
    }

    /// Adds the vector `bias[n]` to every row of `self[m,n]`.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let value = {
            let (a, b) = (self.value(), bias.value());
            let ok = a.shape().len() == 2 && b.shape() == [a.shape()[1]];
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let cols = b.len();
            let mut c = a.clone();
            for row in c.data_mut().chunks_exact_mut(cols.max(1)) {
                for (x, bv) in row.iter_mut().zip(b.data()) {
                    *x += bv;
                }
            }
            c
        };
        let rg = self.tape.requires(&[self.id, bias.id]);
        Ok(self.tape.push(value, Op::AddRow(self.id, bias.id), rg))
    }

    /// `self[m,k] weight[n,k]^T + bias[n]` in one node.
    pub fn affine(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight)?;
        self.same_tape(&bias)?;
        let value = {
            let (a, w, b) = (self.value(), weight.value(), bias.value());
            let ok = a.shape().len() == 2
                && w.shape().len() == 2
                && a.shape()[1] == w.shape()[1]
                && b.shape() == [w.shape()[0]];
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "affine",
                    lhs: a.shape().to_vec(),
                    rhs: w.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], w.shape()[0]);
            let mut c = Tensor::repeat_row(b.data(), m);
            gemm(m, k, n, a.data(), (k, 1), w.data(), (1, k), 1.0, c.data_mut());
            c
        };
        let rg = self.tape.requires(&[self.id, weight.id, bias.id]);
        Ok(self.tape.push(value, Op::Affine(self.id, weight.id, bias.id), rg))
    }

    /// Repeats each entry `n` times along a new trailing axis: `[s] -> [s,n]`.
    pub fn broadcast_last(self, n: usize) -> Var<'t> {
        let value = {
            let a = self.value();
            let mut shape = a.shape().to_vec();
            shape.push(n);
            let mut data = Vec::with_capacity(a.len() * n);
            for &v in a.data() {
                data.extend(std::iter::repeat_n(v, n));
            }
            Tensor::new(shape, data).expect("broadcast length")
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::BroadcastLast(self.id), rg)
    }

    fn require_rank(&self, op: &'static str) -> Result<()> {
        if self.value().shape().is_empty() {
            return Err(TensorError::BadRank {
                op,
                expected: "rank >= 1",
                got: Vec::new(),
            });
        }
        Ok(())
    }

    /// Sums over the trailing axis: `[s,n] -> [s]`.
    pub fn sum_last(self) -> Result<Var<'t>> {
        self.require_rank("sum_last")?;
        let value = {
            let a = self.value();
            let (outer, last) = split_last(a.shape());
            let shape = a.shape()[..a.shape().len() - 1].to_vec();
            let data = (0..outer)
                .map(|r| a.data()[r * last..(r + 1) * last].iter().sum())
                .collect();
            Tensor::new(shape, data).expect("sum length")
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::SumLast(self.id), rg))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(total), Op::SumAll(self.id), rg)
    }

    /// Mean over every entry; an empty tensor has mean 0.
    pub fn mean(self) -> Var<'t> {
        let mean = {
            let a = self.value();
            if a.is_empty() {
                0.0
            } else {
                a.data().iter().sum::<f64>() / a.len() as f64
            }
        };
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(mean), Op::MeanAll(self.id), rg)
    }

    /// Stable `log(sum(exp(.)))` over the trailing axis.
    pub fn logsumexp_last(self) -> Result<Var<'t>> {
        self.require_rank("logsumexp")?;
        let value = {
            let a = self.value();
            let (outer, last) = split_last(a.shape());
            let shape = a.shape()[..a.shape().len() - 1].to_vec();
            let data = (0..outer)
                .map(|r| {
                    let row = &a.data()[r * last..(r + 1) * last];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if !max.is_finite() {
                        return max;
                    }
                    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::new(shape, data).expect("lse length")
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::LogSumExpLast(self.id), rg))
    }

    /// Softmax over the trailing axis, built from the other primitives.
    pub fn softmax_last(self) -> Result<Var<'t>> {
        let n = *self.value().shape().last().unwrap_or(&0);
        let lse = self.logsumexp_last()?.broadcast_last(n);
        Ok(self.sub(lse)?.exp())
    }

    /// Inner product over the trailing axis: `[s,n],[s,n] -> [s]`.
    pub fn inner(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other)?.sum_last()
    }

    /// Squared Euclidean norm over the trailing axis.
    pub fn square_norm(self) -> Result<Var<'t>> {
        self.inner(self)
    }

    /// Joins two tensors along the trailing axis.
    pub fn concat_last(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            let ok = !sa.is_empty() && sa.len() == sb.len() && sa[..sa.len() - 1] == sb[..sb.len() - 1];
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (outer, k1) = split_last(sa);
            let (_, k2) = split_last(sb);
            let mut data = Vec::with_capacity(outer * (k1 + k2));
            for r in 0..outer {
                data.extend_from_slice(&a.data()[r * k1..(r + 1) * k1]);
                data.extend_from_slice(&b.data()[r * k2..(r + 1) * k2]);
            }
            let mut shape = sa.to_vec();
            *shape.last_mut().unwrap() = k1 + k2;
            Tensor::new(shape, data).expect("concat length")
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::ConcatLast(self.id, other.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.to_tensor().reshaped(shape.to_vec())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Per-sample matrix-vector product: `[m,n,d] x [m,d] -> [m,n]`.
    pub fn batch_matvec(self, vecs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&vecs)?;
        let value = {
            let (a, b) = (self.value(), vecs.value());
            let (sa, sb) = (a.shape(), b.shape());
            let ok = sa.len() == 3 && sb.len() == 2 && sa[0] == sb[0] && sa[2] == sb[1];
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_matvec",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, n, d) = (sa[0], sa[1], sa[2]);
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                let bv = &b.data()[i * d..(i + 1) * d];
                for r in 0..n {
                    let row = &a.data()[(i * n + r) * d..(i * n + r + 1) * d];
                    data[i * n + r] = row.iter().zip(bv).map(|(x, y)| x * y).sum();
                }
            }
            Tensor::new(vec![m, n], data).expect("matvec length")
        };
        let rg = self.tape.requires(&[self.id, vecs.id]);
        Ok(self.tape.push(value, Op::BatchMatVec(self.id, vecs.id), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v<'t>(tape: &'t Tape, data: &[f64]) -> Var<'t> {
        tape.param(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn inner_product() {
        let tape = Tape::new();
        let out = v(&tape, &[1.0, 2.0]).inner(v(&tape, &[3.0, 4.0])).unwrap();
        assert_eq!(out.value().item(), Some(11.0));
    }

    #[test]
    fn logsumexp_of_zeros_is_ln2() {
        let tape = Tape::new();
        let out = v(&tape, &[0.0, 0.0]).logsumexp_last().unwrap();
        assert!((out.value().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_large_inputs_stay_finite() {
        let tape = Tape::new();
        let out = v(&tape, &[1000.0, 1000.0]).logsumexp_last().unwrap();
        assert!((out.value().item().unwrap() - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn hadamard() {
        let tape = Tape::new();
        let out = v(&tape, &[1.0, 2.0, 3.0]).mul(v(&tape, &[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(out.value().data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = x.square();
        let g = tape.gradient(loss, &[x]).unwrap();
        assert_eq!(g[0].item(), Some(6.0));
    }

    #[test]
    fn elu_gradient_negative_side() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(-1.0));
        let g = tape.gradient(x.elu(), &[x]).unwrap();
        assert!((g[0].item().unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let tape = Tape::new();
        let err = v(&tape, &[1.0, 2.0]).add(v(&tape, &[1.0])).unwrap_err();
        match err {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![1]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            a.matmul(b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn log_domain_error() {
        let tape = Tape::new();
        let err = v(&tape, &[1.0, 0.0]).ln().unwrap_err();
        assert_eq!(
            err,
            TensorError::Domain {
                op: "log",
                index: 1,
                value: 0.0
            }
        );
    }

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::new();
        let x = v(&tape, &[1.0, 2.0]);
        assert!(matches!(
            tape.gradient(x, &[x]),
            Err(TensorError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn foreign_var_rejected() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(
            tape.gradient(x, &[y]),
            Err(TensorError::UnknownVar(_))
        ));
    }

    #[test]
    fn unreached_and_frozen_get_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let unused = tape.param(Tensor::vector(vec![1.0, 1.0]));
        let loss = x.mul(c).unwrap();
        let later = tape.param(Tensor::scalar(1.0));
        let g = tape.gradient(loss, &[x, c, unused, later]).unwrap();
        assert_eq!(g[0].item(), Some(5.0));
        assert_eq!(g[1].item(), Some(0.0));
        assert_eq!(g[2].data(), &[0.0, 0.0]);
        assert_eq!(g[3].item(), Some(0.0));
    }

    #[test]
    fn reused_node_accumulates() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.gradient(y, &[x]).unwrap();
        assert!((g[0].item().unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
        let w = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        assert_eq!(a.matmul_transposed(w).unwrap().value().data(), &[-1.0, -1.0]);
    }
}
