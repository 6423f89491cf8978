//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to [`Var`] handles in
//! creation order, which is a topological order. [`Graph::backward`] walks
//! that list in reverse exactly once and accumulates gradients into leaves
//! created with `requires_grad`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Taps};
use crate::tensor::{numel, Scalar, Tensor};

/// One measured FLOP contribution (multiply-adds count as 2).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopRecord {
    pub scope: String,
    pub op: &'static str,
    pub flops: u64,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    AddChannel(usize, usize),
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_transposed: bool,
    },
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        axis: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Gelu(usize),
    Reshape(usize),
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Pad {
        x: usize,
        axis: usize,
        before: usize,
    },
    Roll {
        x: usize,
        axis: usize,
        shift: isize,
    },
    Resample {
        x: usize,
        axis: usize,
        taps: Vec<Taps>,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Rc<[u8]>,
        probs: Vec<T>,
    },
    Dice {
        probs: usize,
        labels: Rc<[u8]>,
        eps: f64,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    flops: RefCell<Vec<FlopRecord>>,
    scope: RefCell<Vec<String>>,
}

/// Handle to a value recorded in a [`Graph`].
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

/// Pops a FLOP scope when dropped.
pub struct ScopeGuard<'g, T: Scalar> {
    graph: &'g Graph<T>,
}

impl<T: Scalar> Drop for ScopeGuard<'_, T> {
    fn drop(&mut self) {
        self.graph.scope.borrow_mut().pop();
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            flops: RefCell::new(Vec::new()),
            scope: RefCell::new(Vec::new()),
        }
    }

    /// A graph that never tracks gradients (inference, FLOP counting).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn enter(&self, name: impl Into<String>) -> ScopeGuard<'_, T> {
        self.scope.borrow_mut().push(name.into());
        ScopeGuard { graph: self }
    }

    pub fn flop_records(&self) -> Vec<FlopRecord> {
        self.flops.borrow().clone()
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.borrow().iter().map(|r| r.flops).sum()
    }

    fn record_flops(&self, op: &'static str, flops: u64) {
        let scope = self.scope.borrow().join("/");
        self.flops.borrow_mut().push(FlopRecord { scope, op, flops });
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.requires(i));
        let op = if requires_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Backpropagates from a single-element `loss`. Gradients add onto any
    /// already accumulated by earlier calls.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let leaf_grads = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.numel() != 1 {
                return Err(Error::shape(
                    "backward",
                    format!("loss must be scalar, got shape {:?}", root.value.shape()),
                ));
            }
            let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
            grads[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
            let mut leaf_grads = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                match &node.op {
                    Op::Leaf => leaf_grads.push((id, g)),
                    op => backprop(op, &node.value, g, &nodes, &mut grads),
                }
            }
            leaf_grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn backprop<T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: Tensor<T>,
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let shaped = |id: usize, data: Vec<T>| Tensor::from_parts(nodes[id].value.shape().to_vec(), data);
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let ga: Vec<T> = g.data().iter().zip(bv).map(|(&x, &y)| x * y).collect();
            let gb: Vec<T> = g.data().iter().zip(av).map(|(&x, &y)| x * y).collect();
            accumulate(nodes, grads, *a, shaped(*a, ga));
            accumulate(nodes, grads, *b, shaped(*b, gb));
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(nodes, grads, *a, g.map(|v| v * s));
        }
        Op::AddRow(x, b) => {
            let c = val(*b).numel();
            let mut gb = vec![T::zero(); c];
            for row in g.data().chunks(c) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            accumulate(nodes, grads, *b, shaped(*b, gb));
            accumulate(nodes, grads, *x, g);
        }
        Op::AddChannel(x, b) => {
            let shape = val(*x).shape();
            let c = shape[1];
            let inner: usize = shape[2..].iter().product();
            let mut gb = vec![T::zero(); c];
            for (i, chunk) in g.data().chunks(inner).enumerate() {
                gb[i % c] += chunk.iter().copied().sum::<T>();
            }
            accumulate(nodes, grads, *b, shaped(*b, gb));
            accumulate(nodes, grads, *x, g);
        }
        Op::Matmul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_transposed,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (av, bv) = (val(*a).data(), val(*b).data());
            let gd = g.data();
            if nodes[*a].requires_grad {
                // non-transposed: dA = dC · Bᵀ; transposed: dA = dC · B
                let ga = kernels::bmm(gd, bv, batch, m, n, k, !*b_transposed);
                accumulate(nodes, grads, *a, shaped(*a, ga));
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![T::zero(); batch * k * n];
                for bi in 0..batch {
                    let a_i = &av[bi * m * k..(bi + 1) * m * k];
                    let g_i = &gd[bi * m * n..(bi + 1) * m * n];
                    let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if *b_transposed {
                        // dB = dCᵀ · A  ([n, m] · [m, k])
                        let gt = kernels::transpose(g_i, m, n);
                        kernels::matmul_acc(&gt, a_i, dst, n, m, k);
                    } else {
                        // dB = Aᵀ · dC  ([k, m] · [m, n])
                        let at = kernels::transpose(a_i, m, k);
                        kernels::matmul_acc(&at, g_i, dst, k, m, n);
                    }
                }
                accumulate(nodes, grads, *b, shaped(*b, gb));
            }
        }
        Op::Conv { x, w, geom } => {
            if nodes[*x].requires_grad {
                let gx = kernels::conv_backward_input(g.data(), val(*w).data(), geom);
                accumulate(nodes, grads, *x, shaped(*x, gx));
            }
            if nodes[*w].requires_grad {
                let gw = kernels::conv_backward_weight(g.data(), val(*x).data(), geom);
                accumulate(nodes, grads, *w, shaped(*w, gw));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            axis,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let (dx, dg, db) = kernels::layer_norm_backward(
                xv.data(),
                g.data(),
                xv.shape(),
                *axis,
                val(*gamma).data(),
                mean,
                rstd,
            );
            accumulate(nodes, grads, *x, shaped(*x, dx));
            accumulate(nodes, grads, *gamma, shaped(*gamma, dg));
            accumulate(nodes, grads, *beta, shaped(*beta, db));
        }
        Op::Softmax { x, axis } => {
            let gx = kernels::softmax_backward(out.data(), g.data(), out.shape(), *axis);
            accumulate(nodes, grads, *x, shaped(*x, gx));
        }
        Op::Gelu(x) => {
            let gx: Vec<T> = val(*x)
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xv, &gv)| gv * kernels::gelu_grad(xv))
                .collect();
            accumulate(nodes, grads, *x, shaped(*x, gx));
        }
        Op::Reshape(x) => {
            let data = g.into_data();
            accumulate(nodes, grads, *x, shaped(*x, data));
        }
        Op::Permute { x, perm } => {
            let gx = kernels::permute(g.data(), out.shape(), &kernels::inverse_perm(perm));
            accumulate(nodes, grads, *x, shaped(*x, gx));
        }
        Op::Concat { inputs, axis } => {
            let mut start = 0;
            for &id in inputs {
                let len = val(id).shape()[*axis];
                let part = kernels::narrow_axis(g.data(), out.shape(), *axis, start, len);
                accumulate(nodes, grads, id, shaped(id, part));
                start += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let full = val(*x).shape()[*axis];
            let len = out.shape()[*axis];
            let gx = kernels::pad_axis(g.data(), out.shape(), *axis, *start, full - start - len);
            accumulate(nodes, grads, *x, shaped(*x, gx));
        }
        Op::Pad { x, axis, before } => {
            let len = val(*x).shape()[*axis];
            let gx = kernels::narrow_axis(g.data(), out.shape(), *axis, *before, len);
            accumulate(nodes, grads, *x, shaped(*x, gx));
        }
        Op::Roll { x, axis, shift } => {
            let gx = kernels::roll(g.data(), out.shape(), *axis, -*shift);
            accumulate(nodes, grads, *x, shaped(*x, gx));
        }
        Op::Resample { x, axis, taps } => {
            let gx = kernels::resample_axis_backward(g.data(), val(*x).shape(), *axis, taps);
            accumulate(nodes, grads, *x, shaped(*x, gx));
        }
        Op::Sum(x) => {
            let gv = g.data()[0];
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, shaped(*x, vec![gv; n]));
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let shape = val(*logits).shape();
            let classes = shape[0];
            let vox = labels.len();
            let scale = g.data()[0] / T::lit(vox as f64);
            let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (v, &l) in labels.iter().enumerate() {
                gx[l as usize * vox + v] -= scale;
            }
            debug_assert_eq!(gx.len(), classes * vox);
            accumulate(nodes, grads, *logits, shaped(*logits, gx));
        }
        Op::Dice { probs, labels, eps } => {
            let p = val(*probs);
            let classes = p.shape()[0];
            let vox = labels.len();
            let eps = T::lit(*eps);
            let two = T::lit(2.0);
            let scale = -g.data()[0] / T::lit((classes - 1) as f64);
            let mut gx = vec![T::zero(); p.numel()];
            for c in 1..classes {
                let pc = &p.data()[c * vox..(c + 1) * vox];
                let (inter, union) = dice_terms(pc, labels, c);
                let denom = union + eps;
                let num = two * inter + eps;
                let inv = T::one() / (denom * denom);
                for (v, &l) in labels.iter().enumerate() {
                    let gt = if l as usize == c { T::one() } else { T::zero() };
                    // d/dp [num / denom] = (2 g denom - num) / denom²
                    gx[c * vox + v] = scale * (two * gt * denom - num) * inv;
                }
            }
            accumulate(nodes, grads, *probs, shaped(*probs, gx));
        }
    }
}

/// Returns (Σ p·g, Σ p + Σ g) for class `c`.
fn dice_terms<T: Scalar>(pc: &[T], labels: &[u8], c: usize) -> (T, T) {
    let mut inter = T::zero();
    let mut psum = T::zero();
    let mut gsum = T::zero();
    for (&p, &l) in pc.iter().zip(labels) {
        psum += p;
        if l as usize == c {
            inter += p;
            gsum += T::one();
        }
    }
    (inter, psum + gsum)
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_labels(op: &'static str, classes: usize, vox: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != vox {
        return Err(Error::shape(op, format!("{} labels for {vox} voxels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid(op, format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Output extent of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 || len + 2 * p < k {
        return None;
    }
    Some((len + 2 * p - k) / s + 1)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Same value, cut off from the gradient tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var<'g, T>> {
        self.graph.push(name, value, op, inputs)
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same("add", a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), data);
        self.push("add", t, Op::Add(self.id, other.id), &[self.id, other.id])
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        check_same("mul", a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_parts(a.shape().to_vec(), data);
        self.push("mul", t, Op::Mul(self.id, other.id), &[self.id, other.id])
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g, T>> {
        let s = T::lit(s);
        let t = self.value().map(|v| v * s);
        self.push("scale", t, Op::Scale(self.id, s), &[self.id])
    }

    /// `x[..., C] + b[C]`.
    pub fn add_row(&self, b: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, bv) = (self.value(), b.value());
        let c = bv.numel();
        if bv.rank() != 1 || x.shape().last() != Some(&c) {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", x.shape(), bv.shape())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("add_row", t, Op::AddRow(self.id, b.id), &[self.id, b.id])
    }

    /// `x[N, C, ...] + b[C]` broadcast over every other axis.
    pub fn add_channel(&self, b: Var<'g, T>) -> Result<Var<'g, T>> {
        let (x, bv) = (self.value(), b.value());
        let shape = x.shape();
        if bv.rank() != 1 || shape.len() < 2 || shape[1] != bv.numel() {
            return Err(Error::shape("add_channel", format!("{:?} + {:?}", shape, bv.shape())));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut data = x.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bb = bv.data()[i % c];
            for v in chunk {
                *v += bb;
            }
        }
        let t = Tensor::from_parts(shape.to_vec(), data);
        self.push("add_channel", t, Op::AddChannel(self.id, b.id), &[self.id, b.id])
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&self, b: Var<'g, T>) -> Result<Var<'g, T>> {
        let (sa, sb) = (self.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        self.matmul_impl(b, 1, sa[0], sa[1], sb[1], false, vec![sa[0], sb[1]])
    }

    /// `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ` when `b_transposed`.
    pub fn bmm(&self, b: Var<'g, T>, b_transposed: bool) -> Result<Var<'g, T>> {
        let (sa, sb) = (self.shape(), b.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if b_transposed { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", format!("{sa:?} x {sb:?} (transposed: {b_transposed})")));
        }
        let n = if b_transposed { sb[1] } else { sb[2] };
        self.matmul_impl(b, sa[0], sa[1], sa[2], n, b_transposed, vec![sa[0], sa[1], n])
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_impl(
        &self,
        b: Var<'g, T>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_transposed: bool,
        shape: Vec<usize>,
    ) -> Result<Var<'g, T>> {
        let data = kernels::bmm(self.value().data(), b.value().data(), batch, m, k, n, b_transposed);
        self.graph.record_flops("matmul", 2 * (batch * m * k * n) as u64);
        let op = Op::Matmul {
            a: self.id,
            b: b.id,
            batch,
            m,
            k,
            n,
            b_transposed,
        };
        self.push("matmul", Tensor::from_parts(shape, data), op, &[self.id, b.id])
    }

    /// Grouped 3D cross-correlation: `x: [N, C, D, H, W]`,
    /// `w: [O, C/groups, kd, kh, kw]`.
    pub fn conv3d(
        &self,
        w: Var<'g, T>,
        stride: [usize; 3],
        pad: [usize; 3],
        groups: usize,
    ) -> Result<Var<'g, T>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 5 || sw.len() != 5 {
            return Err(Error::shape("conv3d", format!("input {sx:?}, weight {sw:?}")));
        }
        if groups == 0 || sx[1] % groups != 0 || sw[0] % groups != 0 {
            return Err(Error::invalid(
                "conv3d",
                format!("{} input / {} output channels not divisible by {groups} groups", sx[1], sw[0]),
            ));
        }
        if sw[1] != sx[1] / groups {
            return Err(Error::shape("conv3d", format!("weight {sw:?} for {} input channels", sx[1])));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out_len(sx[2 + a], sw[2 + a], stride[a], pad[a]).ok_or_else(|| {
                Error::invalid(
                    "conv3d",
                    format!("kernel {:?} larger than padded input {:?}", &sw[2..], &sx[2..]),
                )
            })?;
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            cout: sw[0],
            groups,
            input: [sx[2], sx[3], sx[4]],
            kernel: [sw[2], sw[3], sw[4]],
            stride,
            pad,
            output,
        };
        let data = kernels::conv_forward(self.value().data(), w.value().data(), &geom);
        self.graph.record_flops("conv", 2 * geom.macs());
        let shape = vec![geom.n, geom.cout, output[0], output[1], output[2]];
        let op = Op::Conv {
            x: self.id,
            w: w.id,
            geom,
        };
        self.push("conv", Tensor::from_parts(shape, data), op, &[self.id, w.id])
    }

    /// Grouped 2D cross-correlation: `x: [N, C, H, W]`, `w: [O, C/groups, kh, kw]`.
    pub fn conv2d(&self, w: Var<'g, T>, stride: [usize; 2], pad: [usize; 2], groups: usize) -> Result<Var<'g, T>> {
        let (sx, sw) = (self.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        let x5 = self.reshape(&[sx[0], sx[1], 1, sx[2], sx[3]])?;
        let w5 = w.reshape(&[sw[0], sw[1], 1, sw[2], sw[3]])?;
        let y = x5.conv3d(w5, [1, stride[0], stride[1]], [0, pad[0], pad[1]], groups)?;
        let sy = y.shape();
        y.reshape(&[sy[0], sy[1], sy[3], sy[4]])
    }

    pub fn layer_norm(&self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        self.layer_norm_axis(rank - 1, gamma, beta, eps)
    }

    /// Normalizes each vector along `axis` to zero mean and unit variance,
    /// then applies the per-entry affine `gamma`, `beta`.
    pub fn layer_norm_axis(&self, axis: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape("layer_norm", format!("axis {axis} of {shape:?}")));
        }
        let c = shape[axis];
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} for {c} features", gv.shape(), bv.shape()),
            ));
        }
        let (out, mean, rstd) = kernels::layer_norm(x.data(), shape, axis, gv.data(), bv.data(), T::lit(eps));
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            axis,
            mean,
            rstd,
        };
        let t = Tensor::from_parts(shape.to_vec(), out);
        self.push("layer_norm", t, op, &[self.id, gamma.id, beta.id])
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", x.shape())));
        }
        let out = kernels::softmax(x.data(), x.shape(), axis);
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        self.push("softmax", t, Op::Softmax { x: self.id, axis }, &[self.id])
    }

    pub fn gelu(&self) -> Result<Var<'g, T>> {
        let t = self.value().map(kernels::gelu);
        self.push("gelu", t, Op::Gelu(self.id), &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let t = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        self.push("reshape", t, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} of {:?}", x.shape())));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(*self);
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let data = kernels::permute(x.data(), x.shape(), perm);
        let op = Op::Permute {
            x: self.id,
            perm: perm.to_vec(),
        };
        self.push("permute", Tensor::from_parts(out_shape, data), op, &[self.id])
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat {
            inputs: ids.clone(),
            axis,
        };
        first.push("concat", Tensor::from_parts(shape, data), op, &ids)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        if start == 0 && len == shape[axis] {
            return Ok(*self);
        }
        let data = kernels::narrow_axis(x.data(), shape, axis, start, len);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let op = Op::Narrow { x: self.id, axis, start };
        self.push("narrow", Tensor::from_parts(out_shape, data), op, &[self.id])
    }

    /// Zero padding along `axis`.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape("pad", format!("axis {axis} of {shape:?}")));
        }
        if before == 0 && after == 0 {
            return Ok(*self);
        }
        let data = kernels::pad_axis(x.data(), shape, axis, before, after);
        let mut out_shape = shape.to_vec();
        out_shape[axis] += before + after;
        let op = Op::Pad { x: self.id, axis, before };
        self.push("pad", Tensor::from_parts(out_shape, data), op, &[self.id])
    }

    /// Cyclic shift along `axis`; element `i` moves to `(i + shift) mod len`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("roll", format!("axis {axis} of {:?}", x.shape())));
        }
        if shift.rem_euclid(x.shape()[axis] as isize) == 0 {
            return Ok(*self);
        }
        let data = kernels::roll(x.data(), x.shape(), axis, shift);
        let op = Op::Roll { x: self.id, axis, shift };
        self.push("roll", Tensor::from_parts(x.shape().to_vec(), data), op, &[self.id])
    }

    /// Resamples one axis to `len` using nearest or linear taps.
    pub fn resample_axis(&self, axis: usize, len: usize, linear: bool) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() || len == 0 {
            return Err(Error::invalid("interpolate", format!("axis {axis} to length {len} of {:?}", x.shape())));
        }
        if x.shape()[axis] == len {
            return Ok(*self);
        }
        let taps = kernels::interp_taps(x.shape()[axis], len, linear);
        let data = kernels::resample_axis(x.data(), x.shape(), axis, &taps);
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let op = Op::Resample { x: self.id, axis, taps };
        self.push("interpolate", Tensor::from_parts(shape, data), op, &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'g, T>> {
        let t = Tensor::scalar(self.value().sum());
        self.push("sum", t, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean cross-entropy. `self: [C, spatial...]` logits with the class
    /// axis first; `labels` holds one class index per spatial position.
    pub fn cross_entropy(&self, labels: Rc<[u8]>) -> Result<Var<'g, T>> {
        let x = self.value();
        let classes = x.shape()[0];
        let vox = x.numel() / classes;
        check_labels("cross_entropy", classes, vox, &labels)?;
        let probs = kernels::softmax(x.data(), x.shape(), 0);
        // log-sum-exp per voxel for an accurate -log p at the true class
        let mut total = 0.0f64;
        for (v, &l) in labels.iter().enumerate() {
            let mut m = x.data()[v];
            for c in 1..classes {
                m = m.max(x.data()[c * vox + v]);
            }
            let mut s = 0.0f64;
            for c in 0..classes {
                s += (x.data()[c * vox + v] - m).as_f64().exp();
            }
            total += m.as_f64() + s.ln() - x.data()[l as usize * vox + v].as_f64();
        }
        let t = Tensor::scalar(T::lit(total / vox as f64));
        let op = Op::CrossEntropy {
            logits: self.id,
            labels,
            probs,
        };
        self.push("cross_entropy", t, op, &[self.id])
    }

    /// Soft Dice loss over foreground classes (class 0 excluded).
    /// `self: [C, spatial...]` holds probabilities.
    pub fn dice_loss(&self, labels: Rc<[u8]>, eps: f64) -> Result<Var<'g, T>> {
        let p = self.value();
        let classes = p.shape()[0];
        if classes < 2 {
            return Err(Error::invalid("dice_loss", "needs at least two classes"));
        }
        let vox = p.numel() / classes;
        check_labels("dice_loss", classes, vox, &labels)?;
        let e = T::lit(eps);
        let mut acc = T::zero();
        for c in 1..classes {
            let (inter, union) = dice_terms(&p.data()[c * vox..(c + 1) * vox], &labels, c);
            acc += (T::lit(2.0) * inter + e) / (union + e);
        }
        let loss = T::one() - acc / T::lit((classes - 1) as f64);
        let op = Op::Dice {
            probs: self.id,
            labels,
            eps,
        };
        self.push("dice_loss", Tensor::scalar(loss), op, &[self.id])
    }
}
