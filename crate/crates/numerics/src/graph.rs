//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]; the node
//! keeps the forward value and whatever the backward rule needs. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the accumulated [`Gradients`]. A graph is built for one forward pass and
//! dropped afterwards.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::conv::{conv1d_backward, conv1d_forward, ConvGeometry};
use crate::error::{Error, Result};
use crate::gru::{gru_backward, gru_forward, GruCache, GruWeights};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

type CustomBackward<T> = Rc<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowBias { a: usize, bias: usize },
    AddColBias { a: usize, bias: usize },
    Affine { a: usize, mul: T },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Ln { a: usize },
    Clamp { a: usize, lo: T, hi: T },
    SmoothL1 { a: usize },
    Softmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, inv_std: Vec<T> },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    Transpose { a: usize },
    Reshape { a: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    Sum { a: usize },
    Conv1d { seq: usize, filters: usize, bias: usize, geom: ConvGeometry },
    Gru { x: usize, w_ih: usize, w_hh: usize, b_ih: usize, b_hh: usize, cache: GruCache<T> },
    Custom { inputs: Vec<usize>, backward: CustomBackward<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value, op, requires_grad });
        Ok(Var { graph: self, id: nodes.len() - 1 })
    }

    /// Concatenates rank-2 tensors along the feature axis.
    pub fn concat_cols(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let rows = nodes[first.id].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &nodes[p.id].value;
            if v.rank() != 2 || v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: nodes[first.id].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(nodes[p.id].value.row(r));
            }
        }
        drop(nodes);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("concat_cols", Tensor::matrix(rows, total, out)?, Op::ConcatCols { parts: ids.clone() }, &ids)
    }

    /// Stacks rank-2 tensors along the row axis.
    pub fn concat_rows(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or_else(|| Error::Config("concat of nothing".into()))?;
        let cols = nodes[first.id].value.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.rank() != 2 || v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: nodes[first.id].value.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        drop(nodes);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push("concat_rows", Tensor::matrix(rows, cols, out)?, Op::ConcatRows { parts: ids.clone() }, &ids)
    }

    /// Runs a GRU over the first `valid` rows of `x` (all rows when `None`),
    /// optionally in reverse time order. Rows at or past `valid` are zero.
    ///
    /// Gate layout inside the weight columns is `[reset | update | candidate]`.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_sequence<'g>(
        &'g self,
        x: Var<'g, T>,
        w_ih: Var<'g, T>,
        w_hh: Var<'g, T>,
        b_ih: Var<'g, T>,
        b_hh: Var<'g, T>,
        reverse: bool,
        valid: Option<usize>,
    ) -> Result<Var<'g, T>> {
        let nodes = self.nodes.borrow();
        let weights = GruWeights {
            w_ih: &nodes[w_ih.id].value,
            w_hh: &nodes[w_hh.id].value,
            b_ih: &nodes[b_ih.id].value,
            b_hh: &nodes[b_hh.id].value,
        };
        let xv = &nodes[x.id].value;
        let valid = valid.unwrap_or(xv.rows());
        let (out, cache) = gru_forward(xv, &weights, reverse, valid)?;
        drop(nodes);
        let ids = [x.id, w_ih.id, w_hh.id, b_ih.id, b_hh.id];
        self.push(
            "gru_sequence",
            out,
            Op::Gru { x: x.id, w_ih: w_ih.id, w_hh: w_hh.id, b_ih: b_ih.id, b_hh: b_hh.id, cache },
            &ids,
        )
    }

    /// Records an operation with a user-supplied backward rule. `backward`
    /// receives the input values, the output value and the output gradient
    /// and returns one gradient per input.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g, T>],
        value: Tensor<T>,
        backward: impl Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>> + 'static,
    ) -> Result<Var<'g, T>> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        self.push("custom", value, Op::Custom { inputs: ids.clone(), backward: Rc::new(backward) }, &ids)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            backprop(&nodes, id, &dy, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad matches value shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e = *e + v),
        slot @ None => *slot = Some(g),
    }
}

fn wants<T>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.rows(), av.cols());
            let n = node.value.cols();
            let dy_mat = MatRef::dense(dy, m, n);
            if wants(nodes, *a) {
                let mut da = vec![T::zero(); m * k];
                let bt = if *trans_b { MatRef::dense(bv.data(), n, k) } else { MatRef::dense_t(bv.data(), k, n) };
                gemm(dy_mat, bt, &mut da, false);
                accumulate(nodes, grads, *a, da);
            }
            if wants(nodes, *b) {
                let mut db = vec![T::zero(); k * n];
                if *trans_b {
                    gemm(MatRef::dense_t(dy, m, n), av.as_mat(), &mut db, false);
                } else {
                    gemm(MatRef::dense_t(av.data(), m, k), dy_mat, &mut db, false);
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, dy.to_vec());
            accumulate(nodes, grads, *b, dy.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, dy.to_vec());
            accumulate(nodes, grads, *b, dy.iter().map(|&v| -v).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if wants(nodes, *a) {
                accumulate(nodes, grads, *a, dy.iter().zip(bv).map(|(&g, &v)| g * v).collect());
            }
            if wants(nodes, *b) {
                accumulate(nodes, grads, *b, dy.iter().zip(av).map(|(&g, &v)| g * v).collect());
            }
        }
        Op::AddRowBias { a, bias } => {
            accumulate(nodes, grads, *a, dy.to_vec());
            if wants(nodes, *bias) {
                let cols = node.value.cols();
                let mut db = vec![T::zero(); cols];
                for row in dy.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                }
                accumulate(nodes, grads, *bias, db);
            }
        }
        Op::AddColBias { a, bias } => {
            accumulate(nodes, grads, *a, dy.to_vec());
            if wants(nodes, *bias) {
                let cols = node.value.cols();
                let db = dy.chunks(cols).map(|row| row.iter().copied().sum()).collect();
                accumulate(nodes, grads, *bias, db);
            }
        }
        Op::Affine { a, mul } => {
            accumulate(nodes, grads, *a, dy.iter().map(|&g| g * *mul).collect());
        }
        Op::Sigmoid { a } => {
            let g = dy.iter().zip(y).map(|(&g, &s)| g * s * (T::one() - s)).collect();
            accumulate(nodes, grads, *a, g);
        }
        Op::Tanh { a } => {
            let g = dy.iter().zip(y).map(|(&g, &t)| g * (T::one() - t * t)).collect();
            accumulate(nodes, grads, *a, g);
        }
        Op::Relu { a } => {
            let x = nodes[*a].value.data();
            let g = dy.iter().zip(x).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
            accumulate(nodes, grads, *a, g);
        }
        Op::Ln { a } => {
            let x = nodes[*a].value.data();
            accumulate(nodes, grads, *a, dy.iter().zip(x).map(|(&g, &v)| g / v).collect());
        }
        Op::Clamp { a, lo, hi } => {
            let x = nodes[*a].value.data();
            let g = dy
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, g);
        }
        Op::SmoothL1 { a } => {
            let x = nodes[*a].value.data();
            let g = dy
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v.abs() < T::one() { g * v } else { g * v.signum() })
                .collect();
            accumulate(nodes, grads, *a, g);
        }
        Op::Softmax { a } => {
            let cols = node.value.cols();
            let mut dx = vec![T::zero(); dy.len()];
            for ((dxr, dyr), yr) in dx.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                let dot: T = dyr.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                for ((d, &g), &p) in dxr.iter_mut().zip(dyr).zip(yr) {
                    *d = p * (g - dot);
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let cols = node.value.cols();
            let gv = nodes[*gain].value.data();
            if wants(nodes, *gain) {
                let mut dg = vec![T::zero(); cols];
                for (dyr, xr) in dy.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((d, &g), &h) in dg.iter_mut().zip(dyr).zip(xr) {
                        *d = *d + g * h;
                    }
                }
                accumulate(nodes, grads, *gain, dg);
            }
            if wants(nodes, *bias) {
                let mut db = vec![T::zero(); cols];
                for dyr in dy.chunks(cols) {
                    db.iter_mut().zip(dyr).for_each(|(d, &g)| *d = *d + g);
                }
                accumulate(nodes, grads, *bias, db);
            }
            if wants(nodes, *x) {
                let n = T::from_f64(cols as f64);
                let mut dx = vec![T::zero(); dy.len()];
                for (r, ((dxr, dyr), xr)) in dx.chunks_mut(cols).zip(dy.chunks(cols)).zip(xhat.chunks(cols)).enumerate() {
                    let dxhat: Vec<T> = dyr.iter().zip(gv).map(|(&g, &w)| g * w).collect();
                    let mean_d: T = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx: T = dxhat.iter().zip(xr).map(|(&d, &h)| d * h).sum::<T>() / n;
                    for ((o, &d), &h) in dxr.iter_mut().zip(&dxhat).zip(xr) {
                        *o = inv_std[r] * (d - mean_d - h * mean_dx);
                    }
                }
                accumulate(nodes, grads, *x, dx);
            }
        }
        Op::ConcatCols { parts } => {
            let total = node.value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if wants(nodes, p) {
                    let g = dy.chunks(total).flat_map(|row| row[offset..offset + w].iter().copied()).collect();
                    accumulate(nodes, grads, p, g);
                }
                offset += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(nodes, grads, p, dy[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::SliceCols { a, start } => {
            let src_cols = nodes[*a].value.cols();
            let w = node.value.cols();
            let mut g = vec![T::zero(); nodes[*a].value.len()];
            for (grow, dyr) in g.chunks_mut(src_cols).zip(dy.chunks(w)) {
                grow[*start..*start + w].copy_from_slice(dyr);
            }
            accumulate(nodes, grads, *a, g);
        }
        Op::SliceRows { a, start } => {
            let cols = node.value.cols();
            let mut g = vec![T::zero(); nodes[*a].value.len()];
            g[start * cols..start * cols + dy.len()].copy_from_slice(dy);
            accumulate(nodes, grads, *a, g);
        }
        Op::Transpose { a } => {
            let (r, c) = (node.value.rows(), node.value.cols());
            let t = Tensor::matrix(r, c, dy.to_vec()).expect("shape").transpose();
            accumulate(nodes, grads, *a, t.into_data());
        }
        Op::Reshape { a } => accumulate(nodes, grads, *a, dy.to_vec()),
        Op::GatherRows { table, indices } => {
            let cols = node.value.cols();
            let mut g = vec![T::zero(); nodes[*table].value.len()];
            for (&i, dyr) in indices.iter().zip(dy.chunks(cols)) {
                g[i * cols..(i + 1) * cols].iter_mut().zip(dyr).for_each(|(o, &v)| *o = *o + v);
            }
            accumulate(nodes, grads, *table, g);
        }
        Op::Sum { a } => {
            accumulate(nodes, grads, *a, vec![dy[0]; nodes[*a].value.len()]);
        }
        Op::Conv1d { seq, filters, bias, geom } => {
            let (dseq, dfilt, dbias) = conv1d_backward(
                &nodes[*seq].value,
                &nodes[*filters].value,
                dy,
                geom,
                wants(nodes, *seq),
            );
            if let Some(ds) = dseq {
                accumulate(nodes, grads, *seq, ds);
            }
            accumulate(nodes, grads, *filters, dfilt);
            accumulate(nodes, grads, *bias, dbias);
        }
        Op::Gru { x, w_ih, w_hh, b_ih, b_hh, cache } => {
            let weights = GruWeights {
                w_ih: &nodes[*w_ih].value,
                w_hh: &nodes[*w_hh].value,
                b_ih: &nodes[*b_ih].value,
                b_hh: &nodes[*b_hh].value,
            };
            let g = gru_backward(&nodes[*x].value, &weights, cache, dy, wants(nodes, *x));
            if let Some(dx) = g.dx {
                accumulate(nodes, grads, *x, dx);
            }
            accumulate(nodes, grads, *w_ih, g.dw_ih);
            accumulate(nodes, grads, *w_hh, g.dw_hh);
            accumulate(nodes, grads, *b_ih, g.db_ih);
            accumulate(nodes, grads, *b_hh, g.db_hh);
        }
        Op::Custom { inputs, backward } => {
            let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| &nodes[i].value).collect();
            let dyt = Tensor::new(node.value.shape().to_vec(), dy.to_vec()).expect("shape");
            let gs = backward(&values, &node.value, &dyt);
            for (&i, g) in inputs.iter().zip(gs) {
                accumulate(nodes, grads, i, g.into_data());
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        Ref::map(self.graph.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn mismatch(&self, op: &'static str, other: &Var<'g, T>) -> Error {
        Error::ShapeMismatch { op, lhs: self.shape(), rhs: other.shape() }
    }

    fn unary(&self, name: &'static str, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'g, T>> {
        let out = self.value().map(f);
        self.graph.push(name, out, op, &[self.id])
    }

    fn zip(&self, other: &Var<'g, T>, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            drop((a, b));
            return Err(self.mismatch(name, other));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        drop((a, b));
        self.graph.push(name, out, op, &[self.id, other.id])
    }

    /// `self · other` for rank-2 operands.
    pub fn matmul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let out = self.value().matmul(&other.value())?;
        self.graph.push("matmul", out, Op::MatMul { a: self.id, b: other.id, trans_b: false }, &[self.id, other.id])
    }

    /// `self · otherᵀ` for rank-2 operands.
    pub fn matmul_t(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
            drop((a, b));
            return Err(self.mismatch("matmul_t", other));
        }
        let (m, n) = (a.rows(), b.rows());
        let mut out = vec![T::zero(); m * n];
        gemm(a.as_mat(), MatRef::dense_t(b.data(), n, b.cols()), &mut out, false);
        drop((a, b));
        let out = Tensor::matrix(m, n, out)?;
        self.graph.push("matmul_t", out, Op::MatMul { a: self.id, b: other.id, trans_b: true }, &[self.id, other.id])
    }

    pub fn add(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip(other, "add", |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip(other, "sub", |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.zip(other, "mul", |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row_bias(&self, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), bias.value());
        if b.len() != a.cols() {
            drop((a, b));
            return Err(self.mismatch("add_row_bias", bias));
        }
        let cols = a.cols();
        let data = a.data().iter().enumerate().map(|(i, &v)| v + b.data()[i % cols]).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        drop((a, b));
        self.graph.push("add_row_bias", out, Op::AddRowBias { a: self.id, bias: bias.id }, &[self.id, bias.id])
    }

    /// Adds a length-`rows` vector across every column of a rank-2 tensor.
    pub fn add_col_bias(&self, bias: &Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), bias.value());
        if a.rank() != 2 || b.len() != a.rows() {
            drop((a, b));
            return Err(self.mismatch("add_col_bias", bias));
        }
        let cols = a.cols();
        let data = a.data().iter().enumerate().map(|(i, &v)| v + b.data()[i / cols]).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        drop((a, b));
        self.graph.push("add_col_bias", out, Op::AddColBias { a: self.id, bias: bias.id }, &[self.id, bias.id])
    }

    /// `mul · self + add`, elementwise.
    pub fn affine(&self, mul: f64, add: f64) -> Result<Var<'g, T>> {
        let (m, c) = (T::from_f64(mul), T::from_f64(add));
        self.unary("affine", |v| v * m + c, Op::Affine { a: self.id, mul: m })
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'g, T>> {
        self.affine(factor, 0.0)
    }

    pub fn sigmoid(&self) -> Result<Var<'g, T>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid { a: self.id })
    }

    pub fn tanh(&self) -> Result<Var<'g, T>> {
        self.unary("tanh", |v| v.tanh(), Op::Tanh { a: self.id })
    }

    pub fn relu(&self) -> Result<Var<'g, T>> {
        self.unary("relu", |v| v.max(T::zero()), Op::Relu { a: self.id })
    }

    pub fn ln(&self) -> Result<Var<'g, T>> {
        self.unary("ln", |v| v.ln(), Op::Ln { a: self.id })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'g, T>> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        self.unary("clamp", |v| v.max(lo).min(hi), Op::Clamp { a: self.id, lo, hi })
    }

    /// `0.5·x²` for `|x| < 1`, `|x| − 0.5` otherwise.
    pub fn smooth_l1(&self) -> Result<Var<'g, T>> {
        self.unary("smooth_l1", smooth_l1, Op::SmoothL1 { a: self.id })
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Var<'g, T>> {
        self.softmax_rows_masked(None)
    }

    /// Row-wise softmax where columns with `allowed[j] == false` receive zero
    /// weight (an additive −∞ logit). Fully masked rows are all zero.
    pub fn softmax_rows_masked(&self, allowed: Option<&[bool]>) -> Result<Var<'g, T>> {
        let x = self.value();
        let cols = x.cols();
        if let Some(mask) = allowed {
            if mask.len() != cols {
                let shape = x.shape().to_vec();
                return Err(Error::ShapeMismatch { op: "softmax_mask", lhs: shape, rhs: vec![mask.len()] });
            }
        }
        let mut out = vec![T::zero(); x.len()];
        for (orow, xrow) in out.chunks_mut(cols).zip(x.data().chunks(cols)) {
            softmax_row(xrow, orow, allowed);
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        drop(x);
        self.graph.push("softmax_rows", out, Op::Softmax { a: self.id }, &[self.id])
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'g, T>, bias: &Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let cols = x.cols();
        if gv.len() != cols || bv.len() != cols {
            drop((x, gv, bv));
            return Err(self.mismatch("layer_norm", gain));
        }
        let eps = T::from_f64(eps);
        let n = T::from_f64(cols as f64);
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        drop((x, gv, bv));
        self.graph.push(
            "layer_norm",
            out,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, inv_std },
            &[self.id, gain.id, bias.id],
        )
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 2 || start >= end || end > x.cols() {
            let shape = x.shape().to_vec();
            return Err(Error::InvalidShape { op: "slice_cols", shape, reason: format!("range {start}..{end}") });
        }
        let cols = x.cols();
        let data = x.data().chunks(cols).flat_map(|r| r[start..end].iter().copied()).collect();
        let out = Tensor::matrix(x.rows(), end - start, data)?;
        drop(x);
        self.graph.push("slice_cols", out, Op::SliceCols { a: self.id, start }, &[self.id])
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 2 || start >= end || end > x.rows() {
            let shape = x.shape().to_vec();
            return Err(Error::InvalidShape { op: "slice_rows", shape, reason: format!("range {start}..{end}") });
        }
        let cols = x.cols();
        let out = Tensor::matrix(end - start, cols, x.data()[start * cols..end * cols].to_vec())?;
        drop(x);
        self.graph.push("slice_rows", out, Op::SliceRows { a: self.id, start }, &[self.id])
    }

    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let out = self.value().transpose();
        self.graph.push("transpose", out, Op::Transpose { a: self.id }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().clone().reshape(shape.to_vec())?;
        self.graph.push("reshape", out, Op::Reshape { a: self.id }, &[self.id])
    }

    /// Row lookup into a rank-2 table (embedding).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().gather_rows(indices)?;
        self.graph.push("gather_rows", out, Op::GatherRows { table: self.id, indices: indices.to_vec() }, &[self.id])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Var<'g, T>> {
        let s = self.value().data().iter().copied().sum();
        self.graph.push("sum", Tensor::scalar(s), Op::Sum { a: self.id }, &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Strided 1-D convolution over the rows of `self` (`L × d`).
    ///
    /// `filters` is `C × k × d` (or `C × k·d`), `bias` has `C` entries; the
    /// result is `windows × C` where window `w` covers rows
    /// `[w·stride, w·stride + k)`.
    pub fn conv1d(&self, filters: &Var<'g, T>, bias: &Var<'g, T>, kernel: usize, stride: usize) -> Result<Var<'g, T>> {
        let (seq, f, b) = (self.value(), filters.value(), bias.value());
        let (out, geom) = conv1d_forward(&seq, &f, &b, kernel, stride)?;
        drop((seq, f, b));
        self.graph.push(
            "conv1d",
            out,
            Op::Conv1d { seq: self.id, filters: filters.id, bias: bias.id, geom },
            &[self.id, filters.id, bias.id],
        )
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn smooth_l1<T: Scalar>(v: T) -> T {
    let half = T::from_f64(0.5);
    if v.abs() < T::one() {
        half * v * v
    } else {
        v.abs() - half
    }
}

fn softmax_row<T: Scalar>(x: &[T], out: &mut [T], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| ok(j))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut total = T::zero();
    for (j, (o, &v)) in out.iter_mut().zip(x).enumerate() {
        *o = if ok(j) { (v - max).exp() } else { T::zero() };
        total = total + *o;
    }
    out.iter_mut().for_each(|o| *o = *o / total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let g = Graph::new();
        let i = g.constant(Tensor::eye(2));
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        assert_eq!(i.matmul(&x).unwrap().to_tensor(), x.to_tensor());
    }

    #[test]
    fn row_times_column() {
        let g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(a.matmul(&b).unwrap().to_tensor().data(), &[11.0]);
    }

    #[test]
    fn softmax_examples() {
        let g = Graph::new();
        let one = g.constant(t(&[1, 1], &[5.0])).softmax_rows().unwrap();
        assert_eq!(one.to_tensor().data(), &[1.0]);
        let even = g.constant(t(&[1, 2], &[0.0, 0.0])).softmax_rows().unwrap();
        assert_eq!(even.to_tensor().data(), &[0.5, 0.5]);
        let big = g.constant(t(&[1, 2], &[1000.0, 0.0])).softmax_rows().unwrap().to_tensor();
        // stabilized reference: exp(0)/(exp(0)+exp(-1000))
        assert!((big.data()[0] - 1.0).abs() < 1e-12);
        assert!(big.data()[1] >= 0.0 && big.data()[1] < 1e-300);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let g = Graph::new();
        let s = g
            .constant(t(&[1, 3], &[1.0, 50.0, 1.0]))
            .softmax_rows_masked(Some(&[true, false, true]))
            .unwrap()
            .to_tensor();
        assert_eq!(s.data(), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Graph::new();
        let gain = g.constant(t(&[2], &[1.0, 1.0]));
        let bias = g.constant(t(&[2], &[0.0, 0.0]));
        let c = g.constant(t(&[1, 2], &[3.0, 3.0])).layer_norm(&gain, &bias, 1e-5).unwrap();
        assert_eq!(c.to_tensor().data(), &[0.0, 0.0]);
        let y = g.constant(t(&[1, 2], &[1.0, -1.0])).layer_norm(&gain, &bias, 1e-5).unwrap().to_tensor();
        // mean 0, var 1 → x / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15 && (y.data()[1] + expect).abs() < 1e-15);
        let zero_gain = g.constant(t(&[2], &[0.0, 0.0]));
        let b2 = g.constant(t(&[2], &[0.25, -4.0]));
        let z = g.constant(t(&[2, 2], &[1.0, 7.0, -2.0, 3.0])).layer_norm(&zero_gain, &b2, 1e-5).unwrap();
        assert_eq!(z.to_tensor().data(), &[0.25, -4.0, 0.25, -4.0]);
    }

    #[test]
    fn pointwise_examples() {
        let g = Graph::new();
        let x = g.constant(t(&[2], &[-3.0, 3.0]));
        assert_eq!(x.relu().unwrap().to_tensor().data(), &[0.0, 3.0]);
        assert_eq!(g.constant(t(&[1], &[0.0])).sigmoid().unwrap().to_tensor().data(), &[0.5]);
        let s = g.constant(t(&[2], &[-800.0, 800.0])).sigmoid().unwrap().to_tensor();
        assert!(s.data()[0] >= 0.0 && s.data()[1] <= 1.0);
        let a = g.constant(Tensor::zeros(vec![4, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 3]));
        assert_eq!(g.concat_cols(&[a, b]).unwrap().shape(), vec![4, 6]);
        let c = g.constant(Tensor::zeros(vec![5, 3]));
        assert!(g.concat_cols(&[a, c]).is_err());
        assert!(a.mul(&c).is_err());
    }

    #[test]
    fn backward_simple_rules() {
        let g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let loss = x.sum().unwrap();
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let x = g.variable(t(&[3], &[1.0, -2.0, 0.5]));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let g = Graph::new();
        let x = g.variable(t(&[2], &[1.5, -0.5]));
        let y = x.scale(3.0).unwrap();
        // loss = sum(y) + sum(y ⊙ x) = 3Σx + 3Σx² → grad = 3 + 6x
        let loss = y.sum().unwrap().add(&y.mul(&x).unwrap().sum().unwrap()).unwrap();
        let gr = g.backward(loss).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[12.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let g = Graph::new();
        let x = g.constant(t(&[1], &[0.0]));
        assert!(matches!(x.ln(), Err(Error::NonFinite { op: "ln" })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.variable(t(&[2], &[3.0, 4.0]));
        let gr = g.backward(c.mul(&x).unwrap().sum().unwrap()).unwrap();
        assert!(gr.get(c).is_none());
        assert_eq!(gr.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
