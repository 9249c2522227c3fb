use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use super::kernels;
use super::{Scalar, Tensor, TensorError};

/// Wengert list of executed operations.
///
/// Ops are appended in execution order, so a node's parents always precede
/// it; [`Tape::backward`] walks the list once in reverse. A tape created with
/// [`Tape::no_grad`] records values only and never retains saved
/// activations.
pub struct Tape<T: Scalar = f32> {
    inner: RefCell<Inner<T>>,
    grad_enabled: bool,
}

struct Inner<T: Scalar> {
    nodes: Vec<Node<T>>,
    /// Parameter storage id -> node, so a parameter used twice is one leaf.
    bound: HashMap<usize, usize>,
    generation: u64,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, bias: usize },
    Scale(usize, T),
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    GatherRows { x: usize, index: Vec<usize> },
    ConcatRows(usize, usize),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(usize),
    Sum(usize),
    Mean(usize),
    MeanAxis { x: usize, axis: usize },
    Mse(usize, usize),
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
    generation: u64,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    generation: u64,
    by_node: HashMap<usize, Tensor<T>>,
    by_storage: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf recorded on the (now cleared) tape.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        if var.generation != self.generation {
            return None;
        }
        self.by_node.get(&var.id)
    }

    /// Gradient of a parameter bound with [`Tape::param`].
    pub fn of(&self, param: &Tensor<T>) -> Option<&Tensor<T>> {
        self.by_storage.get(&param.storage_id())
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Inference tape: nothing requires grad, no activations are saved.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            inner: RefCell::new(Inner { nodes: Vec::new(), bound: HashMap::new(), generation: 0 }),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are tracked only on a grad-enabled tape.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push_node(Node { value, op: Op::Leaf, requires_grad })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Binds a trainable parameter. Binding the same storage twice yields
    /// the same leaf, so gradients from every use accumulate in one place.
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        let key = value.storage_id();
        let existing = self.inner.borrow().bound.get(&key).copied();
        if let Some(id) = existing {
            let generation = self.inner.borrow().generation;
            return Var { tape: self, id, generation };
        }
        let var = self.leaf(value.clone(), true);
        self.inner.borrow_mut().bound.insert(key, var.id);
        var
    }

    fn push_node(&self, node: Node<T>) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var { tape: self, id: inner.nodes.len() - 1, generation: inner.generation }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let requires_grad = {
            let inner = self.inner.borrow();
            self.grad_enabled && parents.iter().any(|&p| inner.nodes[p].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(Node { value, op, requires_grad })
    }

    fn value_of(&self, id: usize) -> Tensor<T> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn check(&self, var: &Var<'_, T>) -> Result<(), TensorError> {
        let inner = self.inner.borrow();
        if !std::ptr::eq(var.tape, self) || var.generation != inner.generation || var.id >= inner.nodes.len() {
            return Err(TensorError::OffTape);
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Clears the tape afterwards; vars
    /// recorded before the call become stale.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        self.check(&loss)?;
        let mut inner = self.inner.borrow_mut();
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: loss_shape });
        }
        let nodes = std::mem::take(&mut inner.nodes);
        let bound = std::mem::take(&mut inner.bound);
        let generation = inner.generation;
        inner.generation += 1;
        drop(inner);

        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut by_node = HashMap::new();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                by_node.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        let by_storage = bound
            .into_iter()
            .filter_map(|(key, id)| by_node.get(&id).map(|g| (key, g.clone())))
            .collect();
        Ok(Gradients { generation, by_node, by_storage })
    }
}

/// Adds `contribution` into the gradient slot of `id` if that node tracks grads.
fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, contribution: &[T]) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => buf.iter_mut().zip(contribution).for_each(|(b, &c)| *b = *b + c),
        slot => *slot = Some(contribution.to_vec()),
    }
}

fn grad_slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], id: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = kernels::matmul_dims(av.shape(), bv.shape()).expect("validated in forward");
            let batches = if av.rank() == 3 { av.shape()[0] } else { 1 };
            for bi in 0..batches {
                let gs = &g[bi * m * n..(bi + 1) * m * n];
                if let Some(da) = grad_slot(nodes, grads, *a) {
                    let bs = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    kernels::gemm(m, n, k, gs, false, bs, true, &mut da[bi * m * k..(bi + 1) * m * k], true);
                }
                if let Some(db) = grad_slot(nodes, grads, *b) {
                    let as_ = &av.data()[bi * m * k..(bi + 1) * m * k];
                    kernels::gemm(k, m, n, as_, true, gs, false, &mut db[bi * k * n..(bi + 1) * k * n], true);
                }
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g);
            accumulate(nodes, grads, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g);
            if nodes[*b].requires_grad {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                accumulate(nodes, grads, *b, &neg);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if nodes[*a].requires_grad {
                let da: Vec<T> = g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect();
                accumulate(nodes, grads, *a, &da);
            }
            if nodes[*b].requires_grad {
                let db: Vec<T> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                accumulate(nodes, grads, *b, &db);
            }
        }
        Op::AddRow { x, bias } => {
            accumulate(nodes, grads, *x, g);
            if let Some(db) = grad_slot(nodes, grads, *bias) {
                let w = db.len();
                for row in g.chunks_exact(w) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
        Op::Scale(x, c) => {
            let dx: Vec<T> = g.iter().map(|&v| v * *c).collect();
            accumulate(nodes, grads, *x, &dx);
        }
        Op::Permute { x, axes } => {
            let dx = kernels::permute(g, out.shape(), &kernels::inverse_permutation(axes));
            accumulate(nodes, grads, *x, &dx);
        }
        Op::Reshape(x) => accumulate(nodes, grads, *x, g),
        Op::GatherRows { x, index } => {
            if let Some(dx) = grad_slot(nodes, grads, *x) {
                let w = nodes[*x].value.row_len();
                for (r, &src) in index.iter().enumerate() {
                    let dst = &mut dx[src * w..(src + 1) * w];
                    dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(d, &v)| *d = *d + v);
                }
            }
        }
        Op::ConcatRows(a, b) => {
            let split = nodes[*a].value.numel();
            accumulate(nodes, grads, *a, &g[..split]);
            accumulate(nodes, grads, *b, &g[split..]);
        }
        Op::Softmax { x, axis } => {
            let dx = kernels::softmax_backward(out.data(), g, out.shape(), *axis);
            accumulate(nodes, grads, *x, &dx);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gm = nodes[*gamma].value.data();
            let (dx, dgamma, dbeta) = kernels::layernorm_backward(g, xhat, rstd, gm, gm.len());
            accumulate(nodes, grads, *x, &dx);
            accumulate(nodes, grads, *gamma, &dgamma);
            accumulate(nodes, grads, *beta, &dbeta);
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.data();
            let dx: Vec<T> = g.iter().zip(xv).map(|(&gi, &xi)| gi * kernels::gelu_grad(xi)).collect();
            accumulate(nodes, grads, *x, &dx);
        }
        Op::Sum(x) => {
            let dx = vec![g[0]; nodes[*x].value.numel()];
            accumulate(nodes, grads, *x, &dx);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            let dx = vec![g[0] / T::from_f64(n as f64); n];
            accumulate(nodes, grads, *x, &dx);
        }
        Op::MeanAxis { x, axis } => {
            let shape = nodes[*x].value.shape();
            let (outer, n, inner) = kernels::axis_split(shape, *axis);
            let inv = T::one() / T::from_f64(n as f64);
            let mut dx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        dx[(o * n + j) * inner + i] = g[o * inner + i] * inv;
                    }
                }
            }
            accumulate(nodes, grads, *x, &dx);
        }
        Op::Mse(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            let scale = T::from_f64(2.0) * g[0] / T::from_f64(av.len() as f64);
            let da: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * scale).collect();
            accumulate(nodes, grads, *a, &da);
            if nodes[*b].requires_grad {
                let db: Vec<T> = da.iter().map(|&v| -v).collect();
                accumulate(nodes, grads, *b, &db);
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes.get(self.id).map(|n| n.value.shape().to_vec()).unwrap_or_default()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes.get(self.id).is_some_and(|n| n.requires_grad)
    }

    /// The tape this value was recorded on.
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn operand(&self, other: &Var<'_, T>) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        self.tape.check(self)?;
        self.tape.check(other)?;
        Ok((self.value(), other.value()))
    }

    fn unary(&self) -> Result<Tensor<T>, TensorError> {
        self.tape.check(self)?;
        Ok(self.value())
    }

    fn same_shape(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        Ok(())
    }

    /// Matrix product; rank-3 operands are multiplied batch by batch.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = self.operand(other)?;
        let (m, k, n) = kernels::matmul_dims(a.shape(), b.shape())?;
        let batches = if a.rank() == 3 { a.shape()[0] } else { 1 };
        let mut c = vec![T::zero(); batches * m * n];
        for bi in 0..batches {
            kernels::gemm_nn(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut c[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if a.rank() == 3 { vec![batches, m, n] } else { vec![m, n] };
        Ok(self.tape.push(Tensor::new(shape, c)?, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn zip_with(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = self.operand(other)?;
        Self::same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.tape.push(Tensor::new(a.shape().to_vec(), data)?, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds a rank-1 `bias` to every row along the last axis.
    pub fn add_row(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (x, b) = self.operand(bias)?;
        let w = x.shape().last().copied().unwrap_or(1);
        if b.rank() != 1 || b.numel() != w {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs: x.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(w) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v = *v + bb);
        }
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), data)?, Op::AddRow { x: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    pub fn scale(&self, c: T) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        let data = x.data().iter().map(|&v| v * c).collect();
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), data)?, Op::Scale(self.id, c), &[self.id]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        let mut seen = vec![false; x.rank()];
        if axes.len() != x.rank() || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidPermutation { axes: axes.to_vec(), rank: x.rank() });
        }
        let data = kernels::permute(x.data(), x.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::Permute { x: self.id, axes: axes.to_vec() }, &[self.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>, TensorError> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(TensorError::AxisOutOfRange { axis: 1, rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        let y = x.reshape(shape.to_vec())?;
        Ok(self.tape.push(y, Op::Reshape(self.id), &[self.id]))
    }

    /// Selects rows of the leading axis; repeated indices are allowed and
    /// their gradients are summed.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        if x.rank() == 0 {
            return Err(TensorError::AxisOutOfRange { axis: 0, rank: 0 });
        }
        if index.is_empty() {
            return Err(TensorError::EmptyIndex);
        }
        let w = x.row_len();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            if i >= x.rows() {
                return Err(TensorError::IndexOutOfRange { index: i, extent: x.rows() });
            }
            data.extend_from_slice(x.row(i));
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::GatherRows { x: self.id, index: index.to_vec() }, &[self.id]))
    }

    /// Stacks `other` below `self` along the leading axis.
    pub fn concat_rows(&self, other: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = self.operand(other)?;
        if a.rank() == 0 || a.rank() != b.rank() || a.shape()[1..] != b.shape()[1..] {
            return Err(TensorError::ShapeMismatch { op: "concat_rows", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let mut shape = a.shape().to_vec();
        shape[0] += b.shape()[0];
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::ConcatRows(self.id, other.id), &[self.id, other.id]))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: x.rank() });
        }
        let y = kernels::softmax(x.data(), x.shape(), axis);
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), y)?, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: T) -> Result<Var<'t, T>, TensorError> {
        let (x, gm) = self.operand(gamma)?;
        self.tape.check(beta)?;
        let bt = beta.value();
        let d = x.shape().last().copied().unwrap_or(1);
        if gm.shape() != [d] || bt.shape() != [d] {
            return Err(TensorError::ShapeMismatch { op: "layernorm", lhs: x.shape().to_vec(), rhs: gm.shape().to_vec() });
        }
        let (y, xhat, rstd) = kernels::layernorm(x.data(), d, gm.data(), bt.data(), eps);
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd };
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), y)?, op, &[self.id, gamma.id, beta.id]))
    }

    pub fn gelu(&self) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
        Ok(self.tape.push(Tensor::new(x.shape().to_vec(), data)?, Op::Gelu(self.id), &[self.id]))
    }

    pub fn sum(&self) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        let s = x.data().iter().copied().sum();
        Ok(self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id]))
    }

    pub fn mean(&self) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        let s = x.data().iter().copied().sum::<T>() / T::from_f64(x.numel() as f64);
        Ok(self.tape.push(Tensor::scalar(s), Op::Mean(self.id), &[self.id]))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let x = self.unary()?;
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: x.rank() });
        }
        let (outer, n, inner) = kernels::axis_split(x.shape(), axis);
        let inv = T::one() / T::from_f64(n as f64);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + x.data()[(o * n + j) * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = if shape.is_empty() { Tensor::scalar(data[0]) } else { Tensor::new(shape, data)? };
        Ok(self.tape.push(value, Op::MeanAxis { x: self.id, axis }, &[self.id]))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, target: &Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = self.operand(target)?;
        Self::same_shape("mse", &a, &b)?;
        let s = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>()
            / T::from_f64(a.numel() as f64);
        Ok(self.tape.push(Tensor::scalar(s), Op::Mse(self.id, target.id), &[self.id, target.id]))
    }
}
