//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Node ids are
//! assigned in creation order, so the tape is already a topological order and
//! the backward pass is a single reverse sweep.

use std::cell::RefCell;

use crate::error::{NumericsError, Result};
use crate::scalar::Float;
use crate::tensor::Tensor;

const GELU_COEFF: f64 = 0.044_715;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    MatMulTransposed(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    ConcatCols(Vec<usize>),
    NarrowCols { input: usize, start: usize },
    Transpose(usize),
    Softmax(usize),
    LayerNorm { input: usize, inv_std: Vec<T> },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    ScaledSigmoid { input: usize, lo: T, hi: T },
    ScaledTanh { input: usize, scale: T },
    Abs(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Persistent accumulator, only used for leaves.
    grad: Option<Tensor<T>>,
}

/// Recording of a computation, owning every intermediate value.
#[derive(Debug, Default)]
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Fresh adjoints of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.adjoints.get(var.id).and_then(Option::as_ref)
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&id| nodes[id].requires_grad)
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        if parts.is_empty() {
            return Err(NumericsError::Invalid {
                op: "concat_cols",
                message: "nothing to concatenate".into(),
            });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (rows, _) = nodes[parts[0].id].value.dims2("concat_cols")?;
            let mut widths = Vec::with_capacity(parts.len());
            for part in parts {
                let t = &nodes[part.id].value;
                let (r, c) = t.dims2("concat_cols")?;
                if r != rows {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat_cols",
                        left: nodes[parts[0].id].value.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (part, &w) in parts.iter().zip(&widths) {
                    data.extend_from_slice(&nodes[part.id].value.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::new([rows, total], data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires_grad(&ids);
        Ok(self.push(value, Op::ConcatCols(ids), rg))
    }

    /// Copy of the value held by `var`.
    pub fn value(&self, var: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[var.id].value.clone()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Backpropagates from a scalar `loss` and adds the result into the
    /// gradient accumulators of every trainable leaf it reaches.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        let mut nodes = self.nodes.borrow_mut();
        for (node, adjoint) in nodes.iter_mut().zip(grads.adjoints) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            if let Some(adjoint) = adjoint {
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&adjoint)?,
                    None => node.grad = Some(adjoint),
                }
            }
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss` without touching the accumulators.
    pub fn gradients(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(NumericsError::NotScalar(root.value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        adjoints[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = adjoints[id].take() else {
                continue;
            };
            for (input, grad) in input_grads(&nodes, node, &upstream)? {
                match adjoints[input].as_mut() {
                    Some(acc) => acc.add_assign(&grad)?,
                    None => adjoints[input] = Some(grad),
                }
            }
            adjoints[id] = Some(upstream);
        }
        Ok(Gradients { adjoints })
    }
}

/// Vector-Jacobian products of `node` with respect to each of its inputs that
/// requires a gradient.
fn input_grads<T: Float>(
    nodes: &[Node<T>],
    node: &Node<T>,
    upstream: &Tensor<T>,
) -> Result<Vec<(usize, Tensor<T>)>> {
    let needs = |id: usize| nodes[id].requires_grad;
    let val = |id: usize| &nodes[id].value;
    let out = &node.value;
    let g = upstream.data();
    let mut grads = Vec::new();

    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2("matmul")?;
            let (_, n) = val(b).dims2("matmul")?;
            if needs(a) {
                // dA = dC · Bᵀ
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, (n, 1), val(b).data(), (1, n), T::zero(), &mut da);
                grads.push((a, Tensor::new([m, k], da)?));
            }
            if needs(b) {
                // dB = Aᵀ · dC
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, val(a).data(), (1, k), g, (n, 1), T::zero(), &mut db);
                grads.push((b, Tensor::new([k, n], db)?));
            }
        }
        &Op::MatMulTransposed(a, b) => {
            let (m, k) = val(a).dims2("matmul_t")?;
            let (n, _) = val(b).dims2("matmul_t")?;
            if needs(a) {
                // dA = dC · B
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, (n, 1), val(b).data(), (k, 1), T::zero(), &mut da);
                grads.push((a, Tensor::new([m, k], da)?));
            }
            if needs(b) {
                // dB = dCᵀ · A
                let mut db = vec![T::zero(); n * k];
                T::gemm(n, m, k, g, (1, n), val(a).data(), (k, 1), T::zero(), &mut db);
                grads.push((b, Tensor::new([n, k], db)?));
            }
        }
        &Op::Add(a, b) => {
            if needs(a) {
                grads.push((a, upstream.clone()));
            }
            if needs(b) {
                grads.push((b, upstream.clone()));
            }
        }
        &Op::Sub(a, b) => {
            if needs(a) {
                grads.push((a, upstream.clone()));
            }
            if needs(b) {
                grads.push((b, upstream.map(|v| -v)));
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                grads.push((a, zip_map(upstream, val(b), |g, y| g * y)));
            }
            if needs(b) {
                grads.push((b, zip_map(upstream, val(a), |g, x| g * x)));
            }
        }
        &Op::AddRow(a, row) => {
            if needs(a) {
                grads.push((a, upstream.clone()));
            }
            if needs(row) {
                let (_, cols) = out.dims2("add_row")?;
                let mut dr = vec![T::zero(); cols];
                for chunk in g.chunks(cols) {
                    for (acc, &v) in dr.iter_mut().zip(chunk) {
                        *acc = *acc + v;
                    }
                }
                grads.push((row, Tensor::new(val(row).shape().to_vec(), dr)?));
            }
        }
        &Op::MulRow(a, row) => {
            let (_, cols) = out.dims2("mul_row")?;
            let r = val(row).data();
            if needs(a) {
                let data = g
                    .chunks(cols)
                    .flat_map(|chunk| chunk.iter().zip(r).map(|(&gv, &rv)| gv * rv))
                    .collect();
                grads.push((a, Tensor::new(out.shape().to_vec(), data)?));
            }
            if needs(row) {
                let mut dr = vec![T::zero(); cols];
                for (gc, xc) in g.chunks(cols).zip(val(a).data().chunks(cols)) {
                    for ((acc, &gv), &xv) in dr.iter_mut().zip(gc).zip(xc) {
                        *acc = *acc + gv * xv;
                    }
                }
                grads.push((row, Tensor::new(val(row).shape().to_vec(), dr)?));
            }
        }
        &Op::Scale(a, factor) => {
            if needs(a) {
                grads.push((a, upstream.map(|v| v * factor)));
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = out.dims2("concat_cols")?;
            let mut offset = 0;
            for &part in parts {
                let (_, w) = val(part).dims2("concat_cols")?;
                if needs(part) {
                    let mut data = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        data.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    grads.push((part, Tensor::new([rows, w], data)?));
                }
                offset += w;
            }
        }
        &Op::NarrowCols { input, start } => {
            if needs(input) {
                let (rows, cols) = val(input).dims2("narrow_cols")?;
                let (_, w) = out.dims2("narrow_cols")?;
                let mut data = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    data[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                grads.push((input, Tensor::new([rows, cols], data)?));
            }
        }
        &Op::Transpose(a) => {
            if needs(a) {
                grads.push((a, transpose(upstream)?));
            }
        }
        &Op::Softmax(a) => {
            if needs(a) {
                let (_, cols) = out.dims2("softmax")?;
                let mut data = Vec::with_capacity(out.len());
                for (yc, gc) in out.data().chunks(cols).zip(g.chunks(cols)) {
                    let dot = yc.iter().zip(gc).fold(T::zero(), |acc, (&y, &gv)| acc + y * gv);
                    data.extend(yc.iter().zip(gc).map(|(&y, &gv)| y * (gv - dot)));
                }
                grads.push((a, Tensor::new(out.shape().to_vec(), data)?));
            }
        }
        Op::LayerNorm { input, inv_std } => {
            if needs(*input) {
                let (_, cols) = out.dims2("layer_norm")?;
                let n = T::cast_from(cols as f64);
                let mut data = Vec::with_capacity(out.len());
                for ((yc, gc), &inv) in out.data().chunks(cols).zip(g.chunks(cols)).zip(inv_std) {
                    let mean_g = gc.iter().copied().sum::<T>() / n;
                    let mean_gy = yc.iter().zip(gc).fold(T::zero(), |acc, (&y, &gv)| acc + y * gv) / n;
                    data.extend(
                        yc.iter()
                            .zip(gc)
                            .map(|(&y, &gv)| inv * (gv - mean_g - y * mean_gy)),
                    );
                }
                grads.push((*input, Tensor::new(out.shape().to_vec(), data)?));
            }
        }
        &Op::Relu(a) => {
            if needs(a) {
                grads.push((
                    a,
                    zip_map(upstream, val(a), |gv, x| if x > T::zero() { gv } else { T::zero() }),
                ));
            }
        }
        &Op::Gelu(a) => {
            if needs(a) {
                grads.push((a, zip_map(upstream, val(a), |gv, x| gv * gelu_derivative(x))));
            }
        }
        &Op::Sigmoid(a) => {
            if needs(a) {
                grads.push((a, zip_map(upstream, out, |gv, s| gv * s * (T::one() - s))));
            }
        }
        &Op::Tanh(a) => {
            if needs(a) {
                grads.push((a, zip_map(upstream, out, |gv, t| gv * (T::one() - t * t))));
            }
        }
        &Op::ScaledSigmoid { input, lo, hi } => {
            if needs(input) {
                let span = hi - lo;
                grads.push((
                    input,
                    zip_map(upstream, out, |gv, y| {
                        let s = (y - lo) / span;
                        gv * span * s * (T::one() - s)
                    }),
                ));
            }
        }
        &Op::ScaledTanh { input, scale } => {
            if needs(input) {
                grads.push((
                    input,
                    zip_map(upstream, val(input), |gv, x| {
                        let t = x.tanh();
                        gv * scale * (T::one() - t * t)
                    }),
                ));
            }
        }
        &Op::Abs(a) => {
            if needs(a) {
                grads.push((
                    a,
                    zip_map(upstream, val(a), |gv, x| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    }),
                ));
            }
        }
        &Op::Sum(a) => {
            if needs(a) {
                grads.push((a, Tensor::full(val(a).shape().to_vec(), g[0])));
            }
        }
    }
    Ok(grads)
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

fn transpose<T: Float>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = t.dims2("transpose")?;
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    for c in 0..cols {
        data.extend((0..rows).map(|r| src[r * cols + c]));
    }
    Tensor::new([cols, rows], data)
}

fn gelu<T: Float>(x: T) -> T {
    let c = T::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let k = T::cast_from(GELU_COEFF);
    let half = T::cast_from(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_derivative<T: Float>(x: T) -> T {
    let c = T::cast_from((2.0 / std::f64::consts::PI).sqrt());
    let k = T::cast_from(GELU_COEFF);
    let half = T::cast_from(0.5);
    let three = T::cast_from(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

impl<'t, T: Float> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The single value of a scalar var.
    pub fn item(&self) -> Result<T> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>) -> Result<Self> {
        let value = f(&self.tape.nodes.borrow()[self.id].value)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    fn binary(
        self,
        other: Self,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        Ok(self.tape.push(value, op, rg))
    }

    fn elementwise(
        self,
        other: Self,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        self.binary(other, op, |a, b| {
            if a.shape() != b.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: name,
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            Ok(zip_map(a, b, f))
        })
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(self, other: Self) -> Result<Self> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            let (m, k) = a.dims2("matmul")?;
            let (k2, n) = b.dims2("matmul")?;
            if k != k2 {
                return Err(NumericsError::ShapeMismatch {
                    op: "matmul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), T::zero(), &mut c);
            Tensor::new([m, n], c)
        })
    }

    /// `[m,k] · [n,k]ᵀ → [m,n]` without materializing the transpose.
    pub fn matmul_t(self, other: Self) -> Result<Self> {
        self.binary(other, Op::MatMulTransposed(self.id, other.id), |a, b| {
            let (m, k) = a.dims2("matmul_t")?;
            let (n, k2) = b.dims2("matmul_t")?;
            if k != k2 {
                return Err(NumericsError::ShapeMismatch {
                    op: "matmul_t",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut c = vec![T::zero(); m * n];
            T::gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), T::zero(), &mut c);
            Tensor::new([m, n], c)
        })
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    fn row_broadcast(
        self,
        row: Self,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Self> {
        self.binary(row, op, |a, r| {
            let (_, cols) = a.dims2(name)?;
            if r.shape() != [cols] {
                return Err(NumericsError::ShapeMismatch {
                    op: name,
                    left: a.shape().to_vec(),
                    right: r.shape().to_vec(),
                });
            }
            let data = a
                .data()
                .chunks(cols)
                .flat_map(|chunk| chunk.iter().zip(r.data()).map(|(&x, &y)| f(x, y)))
                .collect();
            Tensor::new(a.shape().to_vec(), data)
        })
    }

    /// Adds a `[n]` row vector to every row of an `[m,n]` matrix.
    pub fn add_row(self, row: Self) -> Result<Self> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// Multiplies every row of an `[m,n]` matrix by a `[n]` row vector.
    pub fn mul_row(self, row: Self) -> Result<Self> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    pub fn scale(self, factor: f64) -> Result<Self> {
        let factor = T::cast_from(factor);
        self.unary(Op::Scale(self.id, factor), |a| Ok(a.map(|v| v * factor)))
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn narrow_cols(self, start: usize, width: usize) -> Result<Self> {
        self.unary(Op::NarrowCols { input: self.id, start }, |a| {
            let (rows, cols) = a.dims2("narrow_cols")?;
            if start + width > cols {
                return Err(NumericsError::Invalid {
                    op: "narrow_cols",
                    message: format!("columns {start}..{} out of {cols}", start + width),
                });
            }
            let mut data = Vec::with_capacity(rows * width);
            for chunk in a.data().chunks(cols) {
                data.extend_from_slice(&chunk[start..start + width]);
            }
            Tensor::new([rows, width], data)
        })
    }

    pub fn transpose(self) -> Result<Self> {
        self.unary(Op::Transpose(self.id), transpose)
    }

    /// Row-wise softmax over all columns.
    pub fn softmax(self) -> Result<Self> {
        self.unary(Op::Softmax(self.id), |a| softmax_rows(a, None))
    }

    /// Row-wise softmax where columns with `key_mask[j] == false` are treated
    /// as `-inf` logits and receive exactly zero probability.
    pub fn masked_softmax(self, key_mask: &[bool]) -> Result<Self> {
        self.unary(Op::Softmax(self.id), |a| softmax_rows(a, Some(key_mask)))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm(self, eps: f64) -> Result<Self> {
        let (value, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let (_, cols) = a.dims2("layer_norm")?;
            let n = T::cast_from(cols as f64);
            let eps = T::cast_from(eps);
            let mut data = Vec::with_capacity(a.len());
            let mut inv_std = Vec::new();
            for chunk in a.data().chunks(cols) {
                let mean = chunk.iter().copied().sum::<T>() / n;
                let var = chunk.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
                let inv = T::one() / (var + eps).sqrt();
                data.extend(chunk.iter().map(|&x| (x - mean) * inv));
                inv_std.push(inv);
            }
            (Tensor::new(a.shape().to_vec(), data)?, inv_std)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                input: self.id,
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(Op::Relu(self.id), |a| {
            Ok(a.map(|v| if v > T::zero() { v } else { T::zero() }))
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Self> {
        self.unary(Op::Gelu(self.id), |a| Ok(a.map(gelu)))
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary(Op::Sigmoid(self.id), |a| Ok(a.map(sigmoid)))
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary(Op::Tanh(self.id), |a| Ok(a.map(|v| v.tanh())))
    }

    /// `lo + (hi - lo) * sigmoid(x)`, mapping onto the open interval `(lo, hi)`.
    pub fn scaled_sigmoid(self, lo: f64, hi: f64) -> Result<Self> {
        let (lo, hi) = (T::cast_from(lo), T::cast_from(hi));
        self.unary(Op::ScaledSigmoid { input: self.id, lo, hi }, |a| {
            Ok(a.map(|v| lo + (hi - lo) * sigmoid(v)))
        })
    }

    /// `scale * tanh(x)`, mapping onto `(-scale, scale)`.
    pub fn scaled_tanh(self, scale: f64) -> Result<Self> {
        let scale = T::cast_from(scale);
        self.unary(Op::ScaledTanh { input: self.id, scale }, |a| {
            Ok(a.map(|v| scale * v.tanh()))
        })
    }

    pub fn abs(self) -> Result<Self> {
        self.unary(Op::Abs(self.id), |a| Ok(a.map(|v| v.abs())))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Result<Self> {
        self.unary(Op::Sum(self.id), |a| Ok(Tensor::scalar(a.data().iter().copied().sum())))
    }
}

fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softmax_rows<T: Float>(a: &Tensor<T>, key_mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let (_, cols) = a.dims2("softmax")?;
    if let Some(mask) = key_mask {
        if mask.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_softmax",
                left: a.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
    }
    let keep = |j: usize| key_mask.map_or(true, |m| m[j]);
    let mut data = Vec::with_capacity(a.len());
    for chunk in a.data().chunks(cols) {
        let max = chunk
            .iter()
            .enumerate()
            .filter(|&(j, _)| keep(j))
            .map(|(_, &v)| v)
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            data.extend(std::iter::repeat(T::zero()).take(cols));
            continue;
        }
        let start = data.len();
        let mut total = T::zero();
        for (j, &v) in chunk.iter().enumerate() {
            let e = if keep(j) { (v - max).exp() } else { T::zero() };
            total = total + e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v = *v / total;
        }
    }
    Tensor::new(a.shape().to_vec(), data)
}
