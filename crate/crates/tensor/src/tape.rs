use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{broadcast, gemm_nn, gemm_nt, gemm_tn};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are only meaningful for the tape that issued them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
        batch: usize,
        shared_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Shift {
        x: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Softmax {
        x: Var,
        divisor: f64,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        x: Var,
    },
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Concat {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records operations in execution order; the order is topological by
/// construction since a node can only reference already-recorded values.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

// sqrt(2/pi) and the cubic coefficient of the tanh approximation of GELU.
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value"))
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// Batched product `a[..,M,K] · b[..,K,N]`. `b` may be a plain matrix
    /// shared by every batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched product with the last two axes of `b` transposed:
    /// `a[..,M,K] · b[..,N,K]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let op_name = if transpose_b { "matmul_t" } else { "matmul" };
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::shape(op_name, sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if transpose_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(TensorError::shape(op_name, sa, sb));
        }
        let lead_a = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead_a != &sb[..sb.len() - 2] {
            return Err(TensorError::shape(op_name, sa, sb));
        }
        let lead: usize = lead_a.iter().product();
        // A shared right operand lets every batch entry fold into one tall matrix.
        let (batch, rows) = if shared_b { (1, lead * m) } else { (lead, m) };

        let mut out = vec![T::zero(); lead * m * n];
        let (ad, bd) = (av.data(), bv.data());
        for bi in 0..batch {
            let a_blk = &ad[bi * rows * k..(bi + 1) * rows * k];
            let b_blk = if shared_b {
                bd
            } else {
                &bd[bi * k * n..(bi + 1) * k * n]
            };
            let o_blk = &mut out[bi * rows * n..(bi + 1) * rows * n];
            if transpose_b {
                gemm_nt(a_blk, b_blk, o_blk, rows, k, n);
            } else {
                gemm_nn(a_blk, b_blk, o_blk, rows, k, n);
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                transpose_b,
                batch,
                shared_b,
                m: rows,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// Affine map `x · w + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(TensorError::shape("linear", sx, sw));
        }
        if sb != [sw[1]] {
            return Err(TensorError::shape("linear", sw, sb));
        }
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let plan = broadcast(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let numel: usize = plan.out_shape.iter().product();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = match (&plan.lhs, &plan.rhs) {
            (None, None) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            (None, Some(mb)) => (0..numel).map(|j| f(ad[j], bd[mb[j]])).collect(),
            (Some(ma), None) => (0..numel).map(|j| f(ad[ma[j]], bd[j])).collect(),
            (Some(ma), Some(mb)) => (0..numel).map(|j| f(ad[ma[j]], bd[mb[j]])).collect(),
        };
        let value = Tensor::new(plan.out_shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Broadcasting sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Broadcasting product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::from_f64(factor);
        let data = self.nodes[x.0].value.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let data = self.nodes[x.0].value.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Shift { x }, &[x])
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let k = T::from_f64(GELU_K);
        let c = T::from_f64(GELU_C);
        let half = T::from_f64(0.5);
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(T::zero()),
                UnaryKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
                UnaryKind::Gelu => half * v * (T::one() + (k * (v + c * v * v * v)).tanh()),
            })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// Softmax over the trailing axis of `x / divisor`, with the row maximum
    /// subtracted before exponentiation. Entries equal to `-inf` get zero
    /// weight as long as each row has at least one finite entry.
    pub fn softmax_rows(&mut self, x: Var, divisor: f64) -> Result<Var> {
        if divisor.is_nan() || divisor <= 0.0 {
            return Err(TensorError::contract(format!(
                "softmax divisor must be positive, got {divisor}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let n = *xv.shape().last().unwrap_or(&1);
        let inv = T::one() / T::from_f64(divisor);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = ((*v - max) * inv).exp();
                sum += *v;
            }
            let rs = T::one() / sum;
            for v in row.iter_mut() {
                *v *= rs;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { x, divisor }, &[x]))
    }

    // ------------------------------------------------------------------
    // Reductions and data movement
    // ------------------------------------------------------------------

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::contract(format!(
                "mean_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = T::one() / T::from_f64(len as f64);
        for v in &mut out {
            *v *= inv;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MeanAxis { x, outer, len, inner }, &[x]))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`. Indices may
    /// repeat (gradients then accumulate) or skip elements.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let xd = self.nodes[x.0].value.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(TensorError::contract(format!(
                "gather: index {bad} out of range for {} elements",
                xd.len()
            )));
        }
        let out = index.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    /// Concatenation along the trailing axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::contract("concat_last: no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        let lead = &s0[..s0.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len() || &s[..s.len() - 1] != lead {
                return Err(TensorError::shape("concat_last", &s0, s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[v.0].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                widths,
            },
            xs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates d(loss)/d(·) to every leaf created with `requires_grad`,
    /// adding into any gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<(usize, Vec<T>)> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::MatMul {
                    a,
                    b,
                    transpose_b,
                    batch,
                    shared_b,
                    m,
                    k,
                    n,
                } => {
                    let (m, k, n, batch) = (*m, *k, *n, *batch);
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    let b_len = if *shared_b { k * n } else { batch * k * n };
                    if nodes[a.0].requires_grad {
                        let da = slot(&mut adj, *a, ad.len());
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let bb = if *shared_b {
                                bd
                            } else {
                                &bd[bi * k * n..(bi + 1) * k * n]
                            };
                            let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                            if *transpose_b {
                                gemm_nn(gb, bb, dab, m, n, k);
                            } else {
                                gemm_nt(gb, bb, dab, m, n, k);
                            }
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let db = slot(&mut adj, *b, b_len);
                        for bi in 0..batch {
                            let gb = &g[bi * m * n..(bi + 1) * m * n];
                            let ab = &ad[bi * m * k..(bi + 1) * m * k];
                            let dbb = if *shared_b {
                                &mut db[..]
                            } else {
                                &mut db[bi * k * n..(bi + 1) * k * n]
                            };
                            if *transpose_b {
                                gemm_tn(gb, ab, dbb, m, n, k);
                            } else {
                                gemm_tn(ab, gb, dbb, m, k, n);
                            }
                        }
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let plan = broadcast("backward", av.shape(), bv.shape())?;
                    let (ad, bd) = (av.data(), bv.data());
                    let ia = |j: usize| plan.lhs.as_ref().map_or(j, |m| m[j]);
                    let ib = |j: usize| plan.rhs.as_ref().map_or(j, |m| m[j]);
                    if nodes[a.0].requires_grad {
                        let da = slot(&mut adj, *a, ad.len());
                        for (j, &gj) in g.iter().enumerate() {
                            da[ia(j)] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => gj,
                                BinaryKind::Mul => gj * bd[ib(j)],
                                BinaryKind::Div => gj / bd[ib(j)],
                            };
                        }
                    }
                    if nodes[b.0].requires_grad {
                        let db = slot(&mut adj, *b, bd.len());
                        for (j, &gj) in g.iter().enumerate() {
                            let y = bd[ib(j)];
                            db[ib(j)] += match kind {
                                BinaryKind::Add => gj,
                                BinaryKind::Sub => -gj,
                                BinaryKind::Mul => gj * ad[ia(j)],
                                BinaryKind::Div => -gj * ad[ia(j)] / (y * y),
                            };
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let c = T::from_f64(*factor);
                    let dx = slot(&mut adj, *x, g.len());
                    for (d, &gj) in dx.iter_mut().zip(&g) {
                        *d += gj * c;
                    }
                }
                Op::Shift { x } | Op::Reshape { x } => {
                    let dx = slot(&mut adj, *x, g.len());
                    for (d, &gj) in dx.iter_mut().zip(&g) {
                        *d += gj;
                    }
                }
                Op::Unary { kind, x } => {
                    let xd = nodes[x.0].value.data();
                    let yd = node.value.data();
                    let dx = slot(&mut adj, *x, g.len());
                    let k = T::from_f64(GELU_K);
                    let c = T::from_f64(GELU_C);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    for j in 0..g.len() {
                        let v = xd[j];
                        dx[j] += g[j]
                            * match kind {
                                UnaryKind::Relu => {
                                    if v > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnaryKind::Sigmoid => yd[j] * (T::one() - yd[j]),
                                UnaryKind::Gelu => {
                                    let t = (k * (v + c * v * v * v)).tanh();
                                    half * (T::one() + t)
                                        + half * v * (T::one() - t * t) * k * (T::one() + three * c * v * v)
                                }
                            };
                    }
                }
                Op::Softmax { x, divisor } => {
                    let yd = node.value.data();
                    let n = *node.value.shape().last().unwrap_or(&1);
                    let inv = T::one() / T::from_f64(*divisor);
                    let dx = slot(&mut adj, *x, g.len());
                    for ((dxr, yr), gr) in dx.chunks_mut(n).zip(yd.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gy)| y * gy).sum();
                        for j in 0..n {
                            dxr[j] += yr[j] * (gr[j] - dot) * inv;
                        }
                    }
                }
                Op::MeanAxis { x, outer, len, inner } => {
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let inv = T::one() / T::from_f64(len as f64);
                    let dx = slot(&mut adj, *x, outer * len * inner);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s * inv;
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    let n = nodes[x.0].value.numel();
                    let dx = slot(&mut adj, *x, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Gather { x, index } => {
                    let n = nodes[x.0].value.numel();
                    let dx = slot(&mut adj, *x, n);
                    for (&src, &gj) in index.iter().zip(&g) {
                        dx[src] += gj;
                    }
                }
                Op::Concat { xs, widths } => {
                    let total: usize = widths.iter().sum();
                    let rows = g.len() / total;
                    let mut offset = 0;
                    for (&v, &w) in xs.iter().zip(widths) {
                        if nodes[v.0].requires_grad {
                            let dx = slot(&mut adj, v, rows * w);
                            for r in 0..rows {
                                let src = &g[r * total + offset..r * total + offset + w];
                                for (d, &s) in dx[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        offset += w;
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn slot<T: Real>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}
