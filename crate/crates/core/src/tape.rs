//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass; nodes
//! are appended in topological order, so the backward sweep is a single
//! reverse pass that visits each node exactly once. Tapes are rebuilt per
//! forward pass and are single-threaded.

use std::cell::RefCell;
use std::rc::Rc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{DenseTensor, Real, TensorError};

const GELU_COEFF: f64 = 0.044715;

#[derive(Debug, Clone, Copy)]
enum UnaryKind<T> {
    Sin,
    Cos,
    Sqrt,
    Recip,
    Gelu,
    Scale(T),
    AddScalar(T),
    ClampMax(T),
    ClampMin(T),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    Unary(usize, UnaryKind<T>),
    SumLast(usize),
    NormLast(usize),
    Softmax(usize),
    CrossEntropy { logits: usize, targets: Vec<usize> },
    Gather { table: usize, indices: Vec<usize> },
    SwapAxes { input: usize, a: usize, b: usize },
    Reshape(usize),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: DenseTensor<T>,
    op: Op<T>,
}

#[derive(Debug, Default)]
struct TapeInner<T: Real> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(usize, ParamId)>,
    grads: Vec<Option<DenseTensor<T>>>,
}

/// Recording tape. Cloning the handle shares the underlying graph.
#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone)]
pub struct TensorRef<T: Real> {
    tape: Tape<T>,
    id: usize,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                bindings: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DenseTensor<T>, op: Op<T>) -> TensorRef<T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { value, op });
        TensorRef {
            tape: self.clone(),
            id,
        }
    }

    /// Records a constant leaf.
    pub fn constant(&self, value: DenseTensor<T>) -> TensorRef<T> {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf holding a parameter's current value; its gradient is
    /// accumulated back into the store at backward time.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> TensorRef<T> {
        let leaf = self.push(store.value(id).clone(), Op::Leaf);
        self.inner.borrow_mut().bindings.push((leaf.id, id));
        leaf
    }

    /// Embedding lookup: `table` is `(vocab, dim)`, output is
    /// `batch_shape x dim` gathering one row per index.
    pub fn embedding(
        &self,
        table: &TensorRef<T>,
        indices: &[usize],
        batch_shape: &[usize],
    ) -> Result<TensorRef<T>, TensorError> {
        let expected: usize = batch_shape.iter().product();
        let inner = self.inner.borrow();
        let tval = &inner.nodes[table.id].value;
        if tval.shape().len() != 2 || expected != indices.len() || batch_shape.is_empty() {
            return Err(TensorError::DimensionMismatch {
                op: "embedding",
                lhs: tval.shape().to_vec(),
                rhs: batch_shape.to_vec(),
            });
        }
        let (vocab, dim) = (tval.shape()[0], tval.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            if ix >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: ix,
                    size: vocab,
                });
            }
            data.extend_from_slice(&tval.data()[ix * dim..(ix + 1) * dim]);
        }
        drop(inner);
        let mut shape = batch_shape.to_vec();
        shape.push(dim);
        let value = DenseTensor::from_vec(shape, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table: table.id,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Gradient of the last backward pass with respect to `t`, if any.
    pub fn grad_of(&self, t: &TensorRef<T>) -> Option<DenseTensor<T>> {
        self.inner.borrow().grads.get(t.id).cloned().flatten()
    }

    /// Reverse sweep from a scalar loss. Node gradients are recomputed from
    /// scratch on every call; parameter gradients accumulate into `store`.
    pub fn backward(
        &self,
        loss: &TensorRef<T>,
        store: &mut ParamStore<T>,
    ) -> Result<(), TensorError> {
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(TensorError::TapeMismatch);
        }
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        if !inner.nodes[loss.id].value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: inner.nodes[loss.id].value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<DenseTensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(DenseTensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            // temporarily move the gradient out so inputs can be mutated
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let nodes = &inner.nodes;
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate_same(&mut grads, nodes, a, grad.data());
                    let bshape = nodes[b].value.shape().to_vec();
                    let gb = ensure(&mut grads, nodes, b);
                    zip_broadcast(grad.shape(), &bshape, |li, ri| {
                        gb.data_mut()[ri] = gb.data_mut()[ri] + grad.data()[li];
                    });
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate_same(&mut grads, nodes, a, grad.data());
                    let bshape = nodes[b].value.shape().to_vec();
                    let gb = ensure(&mut grads, nodes, b);
                    zip_broadcast(grad.shape(), &bshape, |li, ri| {
                        gb.data_mut()[ri] = gb.data_mut()[ri] - grad.data()[li];
                    });
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bshape = nodes[b].value.shape().to_vec();
                    {
                        let bval = &nodes[b].value;
                        let ga = ensure(&mut grads, nodes, a);
                        zip_broadcast(grad.shape(), &bshape, |li, ri| {
                            ga.data_mut()[li] = ga.data_mut()[li] + grad.data()[li] * bval.data()[ri];
                        });
                    }
                    {
                        let aval = &nodes[a].value;
                        let gb = ensure(&mut grads, nodes, b);
                        zip_broadcast(grad.shape(), &bshape, |li, ri| {
                            gb.data_mut()[ri] = gb.data_mut()[ri] + grad.data()[li] * aval.data()[li];
                        });
                    }
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    backward_matmul(&mut grads, nodes, a, b, &grad);
                }
                Op::Unary(a, kind) => {
                    let (a, kind) = (*a, *kind);
                    let out_val = &nodes[id].value;
                    let in_val = &nodes[a].value;
                    let ga = ensure(&mut grads, nodes, a);
                    backward_unary(kind, in_val, out_val, &grad, ga);
                }
                Op::SumLast(a) => {
                    let a = *a;
                    let d = nodes[a].value.last_dim();
                    let ga = ensure(&mut grads, nodes, a);
                    for (r, &g) in grad.data().iter().enumerate() {
                        for v in &mut ga.data_mut()[r * d..(r + 1) * d] {
                            *v = *v + g;
                        }
                    }
                }
                Op::NormLast(a) => {
                    let a = *a;
                    let d = nodes[a].value.last_dim();
                    let (norms, xs) = (&nodes[id].value, &nodes[a].value);
                    let ga = ensure(&mut grads, nodes, a);
                    for (r, &g) in grad.data().iter().enumerate() {
                        let norm = norms.data()[r];
                        if norm > T::zero() {
                            let scale = g / norm;
                            let row = &xs.data()[r * d..(r + 1) * d];
                            for (v, &x) in ga.data_mut()[r * d..(r + 1) * d].iter_mut().zip(row) {
                                *v = *v + scale * x;
                            }
                        }
                        // gradient at the zero vector is zero by convention
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let y = &nodes[id].value;
                    let d = y.last_dim();
                    let ga = ensure(&mut grads, nodes, a);
                    for r in 0..y.row_count() {
                        let yrow = &y.data()[r * d..(r + 1) * d];
                        let grow = &grad.data()[r * d..(r + 1) * d];
                        let dot = yrow
                            .iter()
                            .zip(grow)
                            .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for ((v, &yv), &gv) in ga.data_mut()[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(yrow)
                            .zip(grow)
                        {
                            *v = *v + yv * (gv - dot);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    let logits = *logits;
                    let lval = &nodes[logits].value;
                    let vocab = lval.last_dim();
                    let rows = lval.row_count();
                    debug_assert_eq!(rows, targets.len());
                    let scale = grad.scalar_value() / T::from_f64(rows as f64);
                    let ga = ensure(&mut grads, nodes, logits);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lval.data()[r * vocab..(r + 1) * vocab];
                        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                        let denom = row
                            .iter()
                            .fold(T::zero(), |acc, &v| acc + (v - max).exp());
                        let out = &mut ga.data_mut()[r * vocab..(r + 1) * vocab];
                        for (j, (g, &v)) in out.iter_mut().zip(row).enumerate() {
                            let p = (v - max).exp() / denom;
                            let delta = if j == t { T::one() } else { T::zero() };
                            *g = *g + scale * (p - delta);
                        }
                    }
                }
                Op::Gather { table, indices } => {
                    let table = *table;
                    let dim = nodes[table].value.shape()[1];
                    let gt = ensure(&mut grads, nodes, table);
                    for (pos, &ix) in indices.iter().enumerate() {
                        let src = &grad.data()[pos * dim..(pos + 1) * dim];
                        for (v, &g) in gt.data_mut()[ix * dim..(ix + 1) * dim]
                            .iter_mut()
                            .zip(src)
                        {
                            *v = *v + g;
                        }
                    }
                }
                Op::SwapAxes { input, a, b } => {
                    let (input, a, b) = (*input, *a, *b);
                    let back = swap_axes_copy(grad.data(), grad.shape(), a, b);
                    accumulate_same(&mut grads, nodes, input, &back.1);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    accumulate_same(&mut grads, nodes, a, grad.data());
                }
            }
            grads[id] = Some(grad);
        }

        for (node_id, pid) in inner.bindings.clone() {
            if let Some(g) = &grads[node_id] {
                let dst = store.grad_mut(pid);
                for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d = *d + s;
                }
            }
        }
        inner.grads = grads;
        Ok(())
    }
}

fn ensure<'g, T: Real>(
    grads: &'g mut [Option<DenseTensor<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> &'g mut DenseTensor<T> {
    grads[id].get_or_insert_with(|| DenseTensor::zeros(nodes[id].value.shape().to_vec()))
}

fn accumulate_same<T: Real>(
    grads: &mut [Option<DenseTensor<T>>],
    nodes: &[Node<T>],
    id: usize,
    src: &[T],
) {
    let g = ensure(grads, nodes, id);
    for (d, &s) in g.data_mut().iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backward_unary<T: Real>(
    kind: UnaryKind<T>,
    input: &DenseTensor<T>,
    output: &DenseTensor<T>,
    grad: &DenseTensor<T>,
    ga: &mut DenseTensor<T>,
) {
    let gd = grad.data();
    let xd = input.data();
    let yd = output.data();
    let out = ga.data_mut();
    match kind {
        UnaryKind::Sin => {
            for i in 0..out.len() {
                out[i] = out[i] + gd[i] * xd[i].cos();
            }
        }
        UnaryKind::Cos => {
            for i in 0..out.len() {
                out[i] = out[i] - gd[i] * xd[i].sin();
            }
        }
        UnaryKind::Sqrt => {
            let two = T::from_f64(2.0);
            for i in 0..out.len() {
                out[i] = out[i] + gd[i] / (two * yd[i]);
            }
        }
        UnaryKind::Recip => {
            for i in 0..out.len() {
                out[i] = out[i] - gd[i] * yd[i] * yd[i];
            }
        }
        UnaryKind::Gelu => {
            let c0 = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
            let c1 = T::from_f64(GELU_COEFF);
            let half = T::from_f64(0.5);
            let three = T::from_f64(3.0);
            for i in 0..out.len() {
                let x = xd[i];
                let u = c0 * (x + c1 * x * x * x);
                let t = u.tanh();
                let du = c0 * (T::one() + three * c1 * x * x);
                let d = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                out[i] = out[i] + gd[i] * d;
            }
        }
        UnaryKind::Scale(c) => {
            for i in 0..out.len() {
                out[i] = out[i] + gd[i] * c;
            }
        }
        UnaryKind::AddScalar(_) => {
            for i in 0..out.len() {
                out[i] = out[i] + gd[i];
            }
        }
        // exact boundary passes gradient through (unclamped branch)
        UnaryKind::ClampMax(c) => {
            for i in 0..out.len() {
                if xd[i] <= c {
                    out[i] = out[i] + gd[i];
                }
            }
        }
        UnaryKind::ClampMin(c) => {
            for i in 0..out.len() {
                if xd[i] >= c {
                    out[i] = out[i] + gd[i];
                }
            }
        }
    }
}

impl<T: Real> TensorRef<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> DenseTensor<T> {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Gradient recorded for this tensor by the last backward pass.
    pub fn grad(&self) -> Option<DenseTensor<T>> {
        self.tape.grad_of(self)
    }

    fn same_tape(&self, other: &Self) -> Result<(), TensorError> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(TensorError::TapeMismatch)
        }
    }

    fn binary_elementwise(
        &self,
        other: &Self,
        op_name: &'static str,
        make_op: fn(usize, usize) -> Op<T>,
        f: fn(T, T) -> T,
    ) -> Result<Self, TensorError> {
        self.same_tape(other)?;
        let inner = self.tape.inner.borrow();
        let lhs = &inner.nodes[self.id].value;
        let rhs = &inner.nodes[other.id].value;
        if !broadcastable(lhs.shape(), rhs.shape()) {
            return Err(TensorError::DimensionMismatch {
                op: op_name,
                lhs: lhs.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let mut data = vec![T::zero(); lhs.numel()];
        {
            let (ld, rd) = (lhs.data(), rhs.data());
            if lhs.shape() == rhs.shape() {
                for (o, (&a, &b)) in data.iter_mut().zip(ld.iter().zip(rd)) {
                    *o = f(a, b);
                }
            } else {
                zip_broadcast(lhs.shape(), rhs.shape(), |li, ri| {
                    data[li] = f(ld[li], rd[ri]);
                });
            }
        }
        let value = DenseTensor::from_vec(lhs.shape().to_vec(), data)?;
        drop(inner);
        Ok(self.tape.push(value, make_op(self.id, other.id)))
    }

    /// Elementwise sum. `other` may broadcast into `self` (right-aligned,
    /// each trailing dimension equal or 1).
    pub fn add(&self, other: &Self) -> Result<Self, TensorError> {
        self.binary_elementwise(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TensorError> {
        self.binary_elementwise(other, "sub", Op::Sub, |a, b| a - b)
    }

    /// Hadamard product with the same broadcasting rule as [`Self::add`].
    pub fn mul(&self, other: &Self) -> Result<Self, TensorError> {
        self.binary_elementwise(other, "mul", Op::Mul, |a, b| a * b)
    }

    /// Matrix product over the two trailing axes. Leading axes must match,
    /// or the right operand may be a plain matrix shared across them.
    pub fn matmul(&self, other: &Self) -> Result<Self, TensorError> {
        self.same_tape(other)?;
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[other.id].value;
        let dims = matmul_dims(a.shape(), b.shape()).ok_or_else(|| {
            TensorError::DimensionMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }
        })?;
        let MatmulDims {
            batches,
            m,
            k,
            n,
            rhs_batched,
            out_shape,
        } = dims;
        let mut data = vec![T::zero(); batches * m * n];
        for bi in 0..batches {
            let a_off = bi * m * k;
            let b_off = if rhs_batched { bi * k * n } else { 0 };
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[a_off..a_off + m * k],
                k as isize,
                1,
                &b.data()[b_off..b_off + k * n],
                n as isize,
                1,
                T::zero(),
                &mut data[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        let value = DenseTensor::from_vec(out_shape, data)?;
        drop(inner);
        Ok(self.tape.push(value, Op::Matmul(self.id, other.id)))
    }

    fn unary(&self, kind: UnaryKind<T>, f: impl Fn(T) -> T) -> Self {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
        let value = DenseTensor::from_vec(x.shape().to_vec(), data).expect("shape preserved");
        drop(inner);
        self.tape.push(value, Op::Unary(self.id, kind))
    }

    pub fn sin(&self) -> Self {
        self.unary(UnaryKind::Sin, |v| v.sin())
    }

    pub fn cos(&self) -> Self {
        self.unary(UnaryKind::Cos, |v| v.cos())
    }

    pub fn sqrt(&self) -> Result<Self, TensorError> {
        {
            let inner = self.tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            if let Some(bad) = x.data().iter().find(|v| **v < T::zero()) {
                return Err(TensorError::SqrtDomain {
                    value: bad.as_f64(),
                });
            }
        }
        Ok(self.unary(UnaryKind::Sqrt, |v| v.sqrt()))
    }

    pub fn recip(&self) -> Self {
        self.unary(UnaryKind::Recip, |v| T::one() / v)
    }

    pub fn gelu(&self) -> Self {
        let c0 = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let c1 = T::from_f64(GELU_COEFF);
        let half = T::from_f64(0.5);
        self.unary(UnaryKind::Gelu, move |v| {
            half * v * (T::one() + (c0 * (v + c1 * v * v * v)).tanh())
        })
    }

    pub fn scale(&self, c: T) -> Self {
        self.unary(UnaryKind::Scale(c), move |v| v * c)
    }

    pub fn add_scalar(&self, c: T) -> Self {
        self.unary(UnaryKind::AddScalar(c), move |v| v + c)
    }

    pub fn clamp_max(&self, c: T) -> Self {
        self.unary(UnaryKind::ClampMax(c), move |v| v.min(c))
    }

    pub fn clamp_min(&self, c: T) -> Self {
        self.unary(UnaryKind::ClampMin(c), move |v| v.max(c))
    }

    fn reduce_last(&self, op: fn(usize) -> Op<T>, f: impl Fn(&[T]) -> T) -> Self {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let d = x.last_dim();
        let rows = x.row_count();
        let data: Vec<T> = (0..rows).map(|r| f(&x.data()[r * d..(r + 1) * d])).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let value = DenseTensor::from_vec(shape, data).expect("reduced shape");
        drop(inner);
        self.tape.push(value, op(self.id))
    }

    /// Sum along the trailing axis, keeping it with size 1.
    pub fn sum_lastdim(&self) -> Self {
        self.reduce_last(Op::SumLast, |row| {
            row.iter().fold(T::zero(), |acc, &v| acc + v)
        })
    }

    /// Euclidean norm along the trailing axis, keeping it with size 1.
    /// The gradient at an all-zero row is zero.
    pub fn norm_lastdim(&self) -> Self {
        self.reduce_last(Op::NormLast, |row| {
            row.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
        })
    }

    /// Numerically stable softmax along the trailing axis.
    pub fn softmax_lastdim(&self) -> Self {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let d = x.last_dim();
        let mut data = vec![T::zero(); x.numel()];
        for r in 0..x.row_count() {
            let row = &x.data()[r * d..(r + 1) * d];
            let out = &mut data[r * d..(r + 1) * d];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                denom = denom + *o;
            }
            for o in out.iter_mut() {
                *o = *o / denom;
            }
        }
        let value = DenseTensor::from_vec(x.shape().to_vec(), data).expect("shape preserved");
        drop(inner);
        self.tape.push(value, Op::Softmax(self.id))
    }

    /// Mean negative log-likelihood of `targets` under the trailing-axis
    /// logits; reduces over every leading position. Returns a scalar.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Self, TensorError> {
        let inner = self.tape.inner.borrow();
        let logits = &inner.nodes[self.id].value;
        let vocab = logits.last_dim();
        let rows = logits.row_count();
        if targets.len() != rows {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    index: t,
                    size: vocab,
                });
            }
            let row = &logits.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let denom = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
            total = total + (denom.ln() + max - row[t]);
        }
        let value = DenseTensor::scalar(total / T::from_f64(rows as f64));
        drop(inner);
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Swaps two axes, materializing the permuted layout.
    pub fn swap_axes(&self, a: usize, b: usize) -> Result<Self, TensorError> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let rank = x.shape().len();
        if a >= rank || b >= rank {
            return Err(TensorError::AxisOutOfRange {
                axis: a.max(b),
                rank,
            });
        }
        let (shape, data) = swap_axes_copy(x.data(), x.shape(), a, b);
        let value = DenseTensor::from_vec(shape, data)?;
        drop(inner);
        Ok(self.tape.push(
            value,
            Op::SwapAxes {
                input: self.id,
                a,
                b,
            },
        ))
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Result<Self, TensorError> {
        let inner = self.tape.inner.borrow();
        let x = &inner.nodes[self.id].value;
        let numel: usize = new_shape.iter().product();
        if numel != x.numel() || new_shape.is_empty() {
            return Err(TensorError::InvalidShape {
                shape: new_shape,
                len: x.numel(),
            });
        }
        let value = DenseTensor::from_vec(new_shape, x.data().to_vec())?;
        drop(inner);
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }
}

struct MatmulDims {
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(lhs: &[usize], rhs: &[usize]) -> Option<MatmulDims> {
    if lhs.len() < 2 || rhs.len() < 2 {
        return None;
    }
    let (m, k) = (lhs[lhs.len() - 2], lhs[lhs.len() - 1]);
    let (rk, n) = (rhs[rhs.len() - 2], rhs[rhs.len() - 1]);
    if k != rk {
        return None;
    }
    let lead = &lhs[..lhs.len() - 2];
    let rhs_batched = rhs.len() > 2;
    if rhs_batched && &rhs[..rhs.len() - 2] != lead {
        return None;
    }
    let batches = lead.iter().product::<usize>().max(1);
    let mut out_shape = lead.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Some(MatmulDims {
        batches,
        m,
        k,
        n,
        rhs_batched,
        out_shape,
    })
}

fn backward_matmul<T: Real>(
    grads: &mut [Option<DenseTensor<T>>],
    nodes: &[Node<T>],
    a: usize,
    b: usize,
    grad: &DenseTensor<T>,
) {
    let aval = &nodes[a].value;
    let bval = &nodes[b].value;
    let dims = matmul_dims(aval.shape(), bval.shape()).expect("validated at forward");
    let MatmulDims {
        batches,
        m,
        k,
        n,
        rhs_batched,
        ..
    } = dims;
    {
        let ga = ensure(grads, nodes, a);
        for bi in 0..batches {
            let g_off = bi * m * n;
            let b_off = if rhs_batched { bi * k * n } else { 0 };
            // ga += g . b^T
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &grad.data()[g_off..g_off + m * n],
                n as isize,
                1,
                &bval.data()[b_off..b_off + k * n],
                1,
                n as isize,
                T::one(),
                &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
            );
        }
    }
    {
        let gb = ensure(grads, nodes, b);
        for bi in 0..batches {
            let g_off = bi * m * n;
            let a_off = bi * m * k;
            let gb_off = if rhs_batched { bi * k * n } else { 0 };
            // gb += a^T . g
            T::gemm(
                k,
                m,
                n,
                T::one(),
                &aval.data()[a_off..a_off + m * k],
                1,
                k as isize,
                &grad.data()[g_off..g_off + m * n],
                n as isize,
                1,
                T::one(),
                &mut gb.data_mut()[gb_off..gb_off + k * n],
                n as isize,
                1,
            );
        }
    }
}

/// True when `rhs` broadcasts into `lhs` right-aligned: every trailing
/// dimension of `rhs` equals the matching `lhs` dimension or is 1.
fn broadcastable(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len()
        && rhs
            .iter()
            .rev()
            .zip(lhs.iter().rev())
            .all(|(&r, &l)| r == l || r == 1)
}

/// Visits every flat index of `lhs_shape` together with the flat index of
/// the broadcast `rhs_shape` element it pairs with.
fn zip_broadcast(lhs_shape: &[usize], rhs_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = lhs_shape.len();
    let offset = rank - rhs_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rhs_shape.len()).rev() {
        strides[offset + i] = if rhs_shape[i] == 1 { 0 } else { s };
        s *= rhs_shape[i];
    }
    let numel: usize = lhs_shape.iter().product();
    let mut coords = vec![0usize; rank];
    let mut ri = 0usize;
    for li in 0..numel {
        f(li, ri);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ri += strides[d];
            if coords[d] < lhs_shape[d] {
                break;
            }
            coords[d] = 0;
            ri -= strides[d] * lhs_shape[d];
        }
    }
}

fn swap_axes_copy<T: Copy>(data: &[T], shape: &[usize], a: usize, b: usize) -> (Vec<usize>, Vec<T>) {
    if a == b {
        return (shape.to_vec(), data.to_vec());
    }
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let mut src_strides = in_strides.clone();
    src_strides.swap(a, b);
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        out.push(data[src]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
    (out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> DenseTensor<f64> {
        DenseTensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_factors() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(
            a.matmul(&eye).unwrap().value().data(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        let col = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        assert_eq!(eye.matmul(&col).unwrap().value().data(), &[5.0, 7.0]);
    }

    #[test]
    fn matmul_hand_evaluated_inner_product() {
        let tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(DenseTensor::zeros(vec![2, 3]));
        let b = tape.constant(DenseTensor::zeros(vec![2, 2]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_against_shared_matrix() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let out = a.matmul(&w).unwrap();
        assert_eq!(out.shape(), vec![2, 1, 2]);
        assert_eq!(out.value().data(), &[1.0, 4.0, 3.0, 8.0]);
    }

    #[test]
    fn norm_lastdim_hand_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        assert_eq!(x.norm_lastdim().value().data(), &[5.0]);
        let z = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        assert_eq!(z.norm_lastdim().value().data(), &[0.0]);
        let ones = tape.constant(t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
        assert_eq!(ones.norm_lastdim().value().data(), &[2.0]);
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[0.0]));
        assert_eq!(x.cos().value().data(), &[1.0]);
        let half_pi = tape.constant(t(&[1], &[std::f64::consts::FRAC_PI_2]));
        let clamped = half_pi.clamp_max(std::f64::consts::FRAC_PI_4);
        assert!((clamped.value().data()[0] - 0.7853981633974483).abs() < 1e-15);
        assert!((half_pi.sin().value().data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sqrt_rejects_negative_input() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1], &[-1.0]));
        assert!(matches!(x.sqrt(), Err(TensorError::SqrtDomain { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[0.0, 0.0, 0.0, 0.0]));
        assert_eq!(x.softmax_lastdim().value().data(), &[0.25, 0.25, 0.25, 0.25]);
        let big = tape.constant(t(&[1, 2], &[1000.0, 1000.0]));
        assert_eq!(big.softmax_lastdim().value().data(), &[0.5, 0.5]);
        let skew = tape.constant(t(&[1, 2], &[0.0, 3.0f64.ln()]));
        let sm = skew.softmax_lastdim().value();
        assert!((sm.data()[0] - 0.25).abs() < 1e-12);
        assert!((sm.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_certain() {
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(DenseTensor::zeros(vec![1, 4]));
        let loss = uniform.cross_entropy(&[2]).unwrap().value().scalar_value();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        let mut data = vec![0.0; 4];
        data[1] = 1000.0;
        let sharp = tape.constant(t(&[1, 4], &data));
        let loss = sharp.cross_entropy(&[1]).unwrap().value().scalar_value();
        assert!(loss.abs() < 1e-9);

        let uniform256 = tape.constant(DenseTensor::zeros(vec![1, 256]));
        let loss = uniform256
            .cross_entropy(&[17])
            .unwrap()
            .value()
            .scalar_value();
        assert!((loss - 256.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(DenseTensor::zeros(vec![1, 4]));
        assert!(matches!(
            logits.cross_entropy(&[4]),
            Err(TensorError::IndexOutOfRange { index: 4, size: 4 })
        ));
    }

    #[test]
    fn backward_square_and_constant() {
        let mut store = ParamStore::new();
        let x = store.register("x", DenseTensor::scalar(3.0f64));
        let tape = Tape::new();
        let xr = tape.param(&store, x);
        let y = xr.mul(&xr).unwrap();
        tape.backward(&y, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[6.0]);

        // constant: gradient never reaches x
        store.zero_grad();
        let tape = Tape::new();
        let _xr = tape.param(&store, x);
        let c = tape.constant(DenseTensor::scalar(5.0f64));
        let d = c.scale(1.0);
        tape.backward(&d, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[0.0]);
    }

    #[test]
    fn backward_norm_gives_unit_direction() {
        let mut store = ParamStore::new();
        let x = store.register("x", t(&[1, 2], &[3.0, 4.0]));
        let tape = Tape::new();
        let xr = tape.param(&store, x);
        let n = xr.norm_lastdim();
        let loss = n.reshape(vec![1]).unwrap();
        tape.backward(&loss, &mut store).unwrap();
        let g = store.grad(x).data().to_vec();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::<f64>::new();
        let tape = Tape::new();
        let x = tape.constant(DenseTensor::zeros(vec![2, 2]));
        assert!(matches!(
            tape.backward(&x, &mut store),
            Err(TensorError::NotScalar { .. })
        ));
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let mut store = ParamStore::new();
        let x = store.register("x", DenseTensor::scalar(3.0f64));
        let tape = Tape::new();
        let xr = tape.param(&store, x);
        let y = xr.mul(&xr).unwrap();
        tape.backward(&y, &mut store).unwrap();
        tape.backward(&y, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[12.0]);
        store.zero_grad();
        tape.backward(&y, &mut store).unwrap();
        assert_eq!(store.grad(x).data(), &[6.0]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut store = ParamStore::new();
        let w = store.register("w", t(&[2, 2], &[0.3, -0.7, 1.1, 0.2]));
        let run = |store: &mut ParamStore<f64>| {
            store.zero_grad();
            let tape = Tape::new();
            let wr = tape.param(store, w);
            let x = tape.constant(t(&[1, 2], &[0.5, -0.25]));
            let h = x.matmul(&wr).unwrap().gelu().softmax_lastdim();
            let loss = h.cross_entropy(&[1]).unwrap();
            tape.backward(&loss, store).unwrap();
            store.grad(w).data().to_vec()
        };
        let g1 = run(&mut store);
        let g2 = run(&mut store);
        let bits1: Vec<u64> = g1.iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = g2.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut store = ParamStore::new();
        let bias = store.register("b", t(&[2], &[0.0, 0.0]));
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let br = tape.param(&store, bias);
        let y = x.add(&br).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let loss = y
            .reshape(vec![1, 4])
            .unwrap()
            .sum_lastdim()
            .reshape(vec![1])
            .unwrap();
        tape.backward(&loss, &mut store).unwrap();
        assert_eq!(store.grad(bias).data(), &[2.0, 2.0]);
    }

    #[test]
    fn swap_axes_roundtrip() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let xt = x.swap_axes(0, 1).unwrap();
        assert_eq!(xt.shape(), vec![3, 2]);
        assert_eq!(xt.value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = xt.swap_axes(0, 1).unwrap();
        assert_eq!(back.value().data(), x.value().data());
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut store = ParamStore::new();
        let table = store.register("emb", t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let tape = Tape::new();
        let tr = tape.param(&store, table);
        let out = tape.embedding(&tr, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(out.value().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = out
            .reshape(vec![1, 6])
            .unwrap()
            .sum_lastdim()
            .reshape(vec![1])
            .unwrap();
        tape.backward(&loss, &mut store).unwrap();
        assert_eq!(store.grad(table).data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_index() {
        let mut store = ParamStore::new();
        let table = store.register("emb", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let tape = Tape::new();
        let tr = tape.param(&store, table);
        assert!(matches!(
            tape.embedding(&tr, &[2], &[1]),
            Err(TensorError::IndexOutOfRange { index: 2, size: 2 })
        ));
    }

    #[test]
    fn tapes_do_not_mix() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.constant(DenseTensor::scalar(1.0));
        let b = t2.constant(DenseTensor::scalar(2.0));
        assert!(matches!(a.add(&b), Err(TensorError::TapeMismatch)));
    }
}
