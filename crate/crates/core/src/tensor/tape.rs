use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rand::Rng as _;

use super::kernels::{self, ConvGeom, Mat, PoolGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Records operations in execution order. Reverse-mode differentiation
/// replays that order backwards, so the record is already topologically
/// sorted.
///
/// A tape is single-owner (`!Sync`); independent tapes may run on different
/// threads.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
    grad: Option<Tensor<T>>,
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Softplus(usize),
    Sum(usize),
    SumRows(usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    AddBias(usize, usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool { input: usize, argmax: Vec<u32> },
    Dropout { input: usize, mask: Vec<T> },
    LogSoftmax(usize),
    Softmax(usize),
    L2Normalize { input: usize, norms: Vec<T> },
    RepeatRows { input: usize, times: usize },
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Leaves with `requires_grad` receive gradients from
    /// [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            retain: false,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf (or retained node), if any.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into the gradient
    /// buffers of every differentiable leaf and every retained node.
    /// Repeated calls add up until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.value.shape()
                )));
            }
            grads.resize_with(loss.id + 1, || None);
            if !root.requires_grad {
                return Ok(());
            }
            grads[loss.id] = Some(vec![T::one()]);
            let mut finished: Vec<(usize, Vec<T>)> = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                propagate(&nodes, node, &g, &mut grads);
                if node.retain || matches!(node.op, Op::Leaf) {
                    finished.push((id, g));
                }
            }
            drop(nodes);
            let mut nodes = self.nodes.borrow_mut();
            for (id, g) in finished {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + *b;
                        }
                    }
                    None => {
                        node.grad = Some(
                            Tensor::new(node.value.shape().to_vec(), g)
                                .expect("gradient shape matches value"),
                        )
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: usize,
    f: impl FnOnce(&mut [T]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]);
    f(slot);
}

fn propagate<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, |d| add_into(d, g));
            accumulate(nodes, grads, b, |d| add_into(d, g));
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |d| add_into(d, g));
            accumulate(nodes, grads, b, |d| {
                for (d, &g) in d.iter_mut().zip(g) {
                    *d = *d - g;
                }
            });
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
            accumulate(nodes, grads, a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                    *d = *d + g * y;
                }
            });
            accumulate(nodes, grads, b, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                    *d = *d + g * x;
                }
            });
        }
        &Op::Scale(a, c) => accumulate(nodes, grads, a, |d| {
            for (d, &g) in d.iter_mut().zip(g) {
                *d = *d + c * g;
            }
        }),
        &Op::AddScalar(a) | &Op::Reshape(a) => accumulate(nodes, grads, a, |d| add_into(d, g)),
        &Op::Exp(a) => accumulate(nodes, grads, a, |d| {
            for ((d, &g), &y) in d.iter_mut().zip(g).zip(out) {
                *d = *d + g * y;
            }
        }),
        &Op::Log(a) => {
            let x = nodes[a].value.data();
            accumulate(nodes, grads, a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    *d = *d + g / x;
                }
            })
        }
        &Op::Relu(a) => {
            let x = nodes[a].value.data();
            accumulate(nodes, grads, a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    if x > T::zero() {
                        *d = *d + g;
                    }
                }
            })
        }
        &Op::Softplus(a) => {
            let x = nodes[a].value.data();
            accumulate(nodes, grads, a, |d| {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
                    *d = *d + g * sigmoid(x);
                }
            })
        }
        &Op::Sum(a) => accumulate(nodes, grads, a, |d| {
            for d in d.iter_mut() {
                *d = *d + g[0];
            }
        }),
        &Op::SumRows(a) => {
            let width = nodes[a].value.shape()[1];
            accumulate(nodes, grads, a, |d| {
                for (row, &g) in d.chunks_mut(width.max(1)).zip(g) {
                    for d in row {
                        *d = *d + g;
                    }
                }
            })
        }
        &Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = node.value.shape()[1];
            let gm = Mat::row_major(g, m, n);
            let bmat = if trans_b {
                Mat::row_major(bv.data(), n, k).t()
            } else {
                Mat::row_major(bv.data(), k, n)
            };
            accumulate(nodes, grads, a, |d| kernels::gemm(gm, bmat.t(), T::one(), d));
            let amat = Mat::row_major(av.data(), m, k);
            accumulate(nodes, grads, b, |d| {
                if trans_b {
                    kernels::gemm(gm.t(), amat, T::one(), d)
                } else {
                    kernels::gemm(amat.t(), gm, T::one(), d)
                }
            });
        }
        &Op::AddBias(x, b) => {
            accumulate(nodes, grads, x, |d| add_into(d, g));
            let shape = nodes[x].value.shape();
            let channels = shape[1];
            let inner: usize = shape[2..].iter().product();
            accumulate(nodes, grads, b, |d| {
                for (i, chunk) in g.chunks(inner).enumerate() {
                    let c = i % channels;
                    d[c] = d[c] + chunk.iter().copied().sum::<T>();
                }
            });
        }
        &Op::Conv2d {
            input,
            kernel,
            bias,
            ref geom,
        } => {
            let mut dx = nodes[input]
                .requires_grad
                .then(|| grads[input].take().unwrap_or_else(|| vec![T::zero(); nodes[input].value.len()]));
            let mut dk = nodes[kernel]
                .requires_grad
                .then(|| grads[kernel].take().unwrap_or_else(|| vec![T::zero(); nodes[kernel].value.len()]));
            let mut db = bias.filter(|&b| nodes[b].requires_grad).map(|b| {
                grads[b]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); nodes[b].value.len()])
            });
            kernels::conv2d_backward(
                geom,
                nodes[input].value.data(),
                nodes[kernel].value.data(),
                g,
                dx.as_deref_mut(),
                dk.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                grads[input] = Some(dx);
            }
            if let Some(dk) = dk {
                grads[kernel] = Some(dk);
            }
            if let (Some(b), Some(db)) = (bias, db) {
                grads[b] = Some(db);
            }
        }
        Op::MaxPool { input, argmax } => accumulate(nodes, grads, *input, |d| {
            for (&i, &g) in argmax.iter().zip(g) {
                d[i as usize] = d[i as usize] + g;
            }
        }),
        Op::Dropout { input, mask } => accumulate(nodes, grads, *input, |d| {
            for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask) {
                *d = *d + g * m;
            }
        }),
        &Op::LogSoftmax(a) => {
            let width = node.value.shape()[1];
            accumulate(nodes, grads, a, |d| {
                for ((d, g), y) in d
                    .chunks_mut(width)
                    .zip(g.chunks(width))
                    .zip(out.chunks(width))
                {
                    let total: T = g.iter().copied().sum();
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + g - y.exp() * total;
                    }
                }
            })
        }
        &Op::Softmax(a) => {
            let width = node.value.shape()[1];
            accumulate(nodes, grads, a, |d| {
                for ((d, g), s) in d
                    .chunks_mut(width)
                    .zip(g.chunks(width))
                    .zip(out.chunks(width))
                {
                    let dot: T = g.iter().zip(s).map(|(&g, &s)| g * s).sum();
                    for ((d, &g), &s) in d.iter_mut().zip(g).zip(s) {
                        *d = *d + s * (g - dot);
                    }
                }
            })
        }
        Op::L2Normalize { input, norms } => {
            let width = node.value.shape()[1];
            accumulate(nodes, grads, *input, |d| {
                for (((d, g), y), &n) in d
                    .chunks_mut(width)
                    .zip(g.chunks(width))
                    .zip(out.chunks(width))
                    .zip(norms)
                {
                    let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                        *d = *d + (g - y * dot) / n;
                    }
                }
            })
        }
        &Op::RepeatRows { input, times } => {
            let width = node.value.shape()[1];
            accumulate(nodes, grads, input, |d| {
                for (r, g) in g.chunks(width).enumerate() {
                    let row = &mut d[(r / times) * width..][..width];
                    add_into(row, g);
                }
            })
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    for (d, &g) in d.iter_mut().zip(g) {
        *d = *d + g;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            "all",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

fn require_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::dim(op, "rank", 2, s.len())),
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    /// Keeps this node's gradient after `backward`, so intermediate values
    /// (e.g. feature maps for Grad-CAM) can be inspected.
    pub fn retain_grad(self) -> Self {
        self.tape.nodes.borrow_mut()[self.id].retain = true;
        self
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let value = self.value().map(f);
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self
            .tape
            .push(value, op, self.requires_grad() || other.requires_grad()))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(c);
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), T::exp)
    }

    pub fn ln(&self) -> Var<'t, T> {
        self.unary(Op::Log(self.id), T::ln)
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |x| x.max(T::zero()))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t, T> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.tape
            .push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums each row of a 2-D value, giving a vector of row totals.
    pub fn sum_rows(&self) -> Result<Var<'t, T>> {
        let v = self.value();
        let (rows, _) = require_2d("sum_rows", &v)?;
        let data: Vec<T> = v.rows().map(|r| r.iter().copied().sum()).collect();
        Ok(self.tape.push(
            Tensor::new([rows], data)?,
            Op::SumRows(self.id),
            self.requires_grad(),
        ))
    }

    /// `self · other`, both 2-D.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ`; `other` is `n×k`, as in a linear layer's weight.
    pub fn matmul_t(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(&self, other: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = require_2d("matmul", &a)?;
        let (br, bc) = require_2d("matmul", &b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if bk != k {
            return Err(Error::dim("matmul", "inner", k, bk));
        }
        let bmat = if trans_b {
            Mat::row_major(b.data(), n, k).t()
        } else {
            Mat::row_major(b.data(), k, n)
        };
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(Mat::row_major(a.data(), m, k), bmat, T::zero(), &mut out);
        Ok(self.tape.push(
            Tensor::new([m, n], out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            self.requires_grad() || other.requires_grad(),
        ))
    }

    /// Adds a per-channel bias along axis 1 (`B×C` or `B×C×…`).
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        if x.ndim() < 2 {
            return Err(Error::dim("add_bias", "rank", ">= 2", x.ndim()));
        }
        let channels = x.shape()[1];
        if b.shape() != [channels] {
            return Err(Error::dim("add_bias", "1 (channels)", channels, format!("{:?}", b.shape())));
        }
        let inner: usize = x.shape()[2..].iter().product();
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let bv = b.data()[i % channels];
            for v in chunk {
                *v = *v + bv;
            }
        }
        Ok(self.tape.push(
            out,
            Op::AddBias(self.id, bias.id),
            self.requires_grad() || bias.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self
            .tape
            .push(value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&self) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let rest: usize = shape.iter().skip(1).product();
        self.reshape([shape[0], rest])
    }

    /// 2-D convolution of an `N×C×H×W` input with an `O×C×Kh×Kw` kernel.
    pub fn conv2d(
        &self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        let (x, k) = (self.value(), kernel.value());
        let &[batch, in_ch, height, width] = x.shape() else {
            return Err(Error::dim("conv2d", "input rank", 4, x.ndim()));
        };
        let &[out_ch, k_in, kh, kw] = k.shape() else {
            return Err(Error::dim("conv2d", "kernel rank", 4, k.ndim()));
        };
        if k_in != in_ch {
            return Err(Error::dim("conv2d", "1 (input channels)", k_in, in_ch));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        if height + 2 * padding < kh {
            return Err(Error::dim("conv2d", "2 (height)", format!(">= {kh} after padding"), height + 2 * padding));
        }
        if width + 2 * padding < kw {
            return Err(Error::dim("conv2d", "3 (width)", format!(">= {kw} after padding"), width + 2 * padding));
        }
        let bias_value = bias.map(|b| b.value());
        if let Some(b) = &bias_value {
            if b.shape() != [out_ch] {
                return Err(Error::dim("conv2d", "bias", out_ch, format!("{:?}", b.shape())));
            }
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), k.data(), bias_value.as_ref().map(|b| b.data()));
        let value = Tensor::new([batch, out_ch, geom.out_h, geom.out_w], out)?;
        let requires = self.requires_grad()
            || kernel.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            requires,
        ))
    }

    /// Max pooling over square windows of an `N×C×H×W` input. The gradient
    /// goes to the first maximum (lowest linear index) of each window.
    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[batch, ch, height, width] = x.shape() else {
            return Err(Error::dim("maxpool2d", "input rank", 4, x.ndim()));
        };
        if window == 0 || stride == 0 {
            return Err(Error::Parameter("maxpool2d window and stride must be >= 1".into()));
        }
        if window > height {
            return Err(Error::dim("maxpool2d", "2 (height)", format!(">= window {window}"), height));
        }
        if window > width {
            return Err(Error::dim("maxpool2d", "3 (width)", format!(">= window {window}"), width));
        }
        let geom = PoolGeom {
            planes: batch * ch,
            height,
            width,
            window,
            stride,
            out_h: (height - window) / stride + 1,
            out_w: (width - window) / stride + 1,
        };
        let (out, argmax) = kernels::maxpool_forward(&geom, x.data());
        let value = Tensor::new([batch, ch, geom.out_h, geom.out_w], out)?;
        Ok(self.tape.push(
            value,
            Op::MaxPool {
                input: self.id,
                argmax,
            },
            self.requires_grad(),
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`.
    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout p must be in [0,1), got {p}")));
        }
        let x = self.value();
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(
            value,
            Op::Dropout {
                input: self.id,
                mask,
            },
            self.requires_grad(),
        ))
    }

    /// Row-wise log-softmax of a 2-D value.
    pub fn log_softmax(&self) -> Result<Var<'t, T>> {
        let mut value = (*self.value()).clone();
        let (_, width) = require_2d("log_softmax", &value)?;
        for row in value.data_mut().chunks_mut(width.max(1)) {
            kernels::log_softmax_row(row);
        }
        Ok(self
            .tape
            .push(value, Op::LogSoftmax(self.id), self.requires_grad()))
    }

    /// Row-wise softmax at temperature `tau`.
    pub fn softmax(&self, tau: f64) -> Result<Var<'t, T>> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {tau}"
            )));
        }
        let scaled = self.scale(1.0 / tau);
        let mut value = (*scaled.value()).clone();
        let (_, width) = require_2d("softmax", &value)?;
        for row in value.data_mut().chunks_mut(width.max(1)) {
            kernels::softmax_row(row, T::one());
        }
        Ok(self
            .tape
            .push(value, Op::Softmax(scaled.id), scaled.requires_grad()))
    }

    /// Scales each row of a 2-D value to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t, T>> {
        let mut value = (*self.value()).clone();
        let (_, width) = require_2d("l2_normalize_rows", &value)?;
        let tiny = T::from_f64_lossy(1e-12);
        let mut norms = Vec::new();
        for row in value.data_mut().chunks_mut(width.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            for v in row.iter_mut() {
                *v = *v / n;
            }
            norms.push(n);
        }
        Ok(self.tape.push(
            value,
            Op::L2Normalize {
                input: self.id,
                norms,
            },
            self.requires_grad(),
        ))
    }

    /// Repeats each row `times` times consecutively: `B×d → (B·times)×d`.
    pub fn repeat_rows(&self, times: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, width) = require_2d("repeat_rows", &x)?;
        let mut data = Vec::with_capacity(rows * times * width);
        for row in x.rows() {
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        Ok(self.tape.push(
            Tensor::new([rows * times, width], data)?,
            Op::RepeatRows {
                input: self.id,
                times,
            },
            self.requires_grad(),
        ))
    }
}
