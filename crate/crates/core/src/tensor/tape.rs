use std::f64::consts::PI;

use super::kernels::{self, BatchNormSaved};
use super::{dim_err, Scalar, Tensor, TensorError};

/// Environment variable that turns on a finite-value check after every op.
pub const CHECK_FINITE_ENV: &str = "SPIKEATTN_CHECK_FINITE";

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: F },
    Sigmoid(Var),
    Relu(Var),
    Spike { x: Var, threshold: F, alpha: F },
    SmoothSpike { x: Var, threshold: F, alpha: F },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    AvgPool { x: Var, k: usize },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, saved: BatchNormSaved<F> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Tensor<F>, inv_std: Vec<F> },
    Reshape(Var),
    Expand(Var),
    Permute { x: Var, axes: Vec<usize> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    MeanLastAxis(Var),
    Sum(Var),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Spike { .. } => "spike",
            Op::SmoothSpike { .. } => "smooth_spike",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::AvgPool { .. } => "avgpool2d",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batchnorm",
            Op::Reshape(_) => "reshape",
            Op::Expand(_) => "expand",
            Op::Permute { .. } => "permute",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::MeanLastAxis(_) => "mean_last_axis",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Surrogate derivative of the arctan spike function:
/// `(α/2) / (1 + (π/2 · α · (v − θ))²)`.
#[inline]
pub fn arctan_surrogate_grad<F: Scalar>(v: F, threshold: F, alpha: F) -> F {
    let two = F::lit(2.0);
    let z = F::lit(PI) / two * alpha * (v - threshold);
    alpha / two / (F::one() + z * z)
}

/// Smooth arctan spike `arctan(π/2 · α · (v − θ)) / π + 1/2`.
#[inline]
pub fn arctan_spike<F: Scalar>(v: F, threshold: F, alpha: F) -> F {
    let pi = F::lit(PI);
    (pi / F::lit(2.0) * alpha * (v - threshold)).atan() / pi + F::lit(0.5)
}

/// Wengert list recording a single forward pass.
///
/// Nodes are appended in evaluation order, so the list is already a
/// topological order and `backward` is a single reverse sweep. Gradients
/// are kept for leaves only and accumulate across `backward` calls until
/// [`Tape::zero_grad`].
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    check_finite: bool,
    fault: Option<TensorError>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        let check_finite = std::env::var(CHECK_FINITE_ENV).is_ok_and(|v| !v.is_empty() && v != "0");
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite,
            fault: None,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First non-finite value seen while finite checks were on.
    pub fn status(&self) -> Result<(), TensorError> {
        match &self.fault {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.check_finite && self.fault.is_none() && !value.all_finite() {
            self.fault = Some(TensorError::NonFinite { op: op.name(), node: id });
        }
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(id)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = kernels::broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let v = self.value(x).map(|e| scale * e + shift);
        let rg = self.rg(x);
        self.push(v, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: F) -> Var {
        let v = self.value(x).map(|e| scale * e);
        let rg = self.rg(x);
        self.push(v, Op::Affine { x, scale }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| F::one() / (F::one() + (-e).exp()));
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > F::zero() { e } else { F::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Heaviside spike `v ≥ θ` with the arctan surrogate in the backward pass.
    pub fn spike(&mut self, x: Var, threshold: F, alpha: F) -> Var {
        let v = self.value(x).map(|e| if e >= threshold { F::one() } else { F::zero() });
        let rg = self.rg(x);
        self.push(v, Op::Spike { x, threshold, alpha }, rg)
    }

    /// Differentiable arctan spike; its backward is the exact derivative.
    pub fn smooth_spike(&mut self, x: Var, threshold: F, alpha: F) -> Var {
        let v = self.value(x).map(|e| arctan_spike(e, threshold, alpha));
        let rg = self.rg(x);
        self.push(v, Op::SmoothSpike { x, threshold, alpha }, rg)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let v = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(v, Op::Conv2d { input, weight, bias, stride, padding }, rg))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let v = kernels::linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(v, Op::Linear { input, weight, bias }, rg))
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let v = kernels::avgpool2d(self.value(x), k)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::AvgPool { x, k }, rg))
    }

    /// Batch normalization with batch statistics; returns the output plus
    /// the per-channel batch mean and biased variance.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<(Var, Vec<F>, Vec<F>), TensorError> {
        let (y, saved) = kernels::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (saved.mean.clone(), saved.var.clone());
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let out = self.push(y, Op::BatchNormTrain { x, gamma, beta, saved }, rg);
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        var: &[F],
        eps: F,
    ) -> Result<Var, TensorError> {
        let (y, xhat, inv_std) =
            kernels::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(y, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Inverted dropout with a caller-held mask. Identity when `train` is false.
    pub fn dropout(&mut self, x: Var, rate: f64, mask: &Tensor<F>, train: bool) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Parameter {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if mask.shape() != self.shape(x) {
            return Err(dim_err("dropout", format!("mask {:?} vs input {:?}", mask.shape(), self.shape(x))));
        }
        if !train {
            return Ok(x);
        }
        let keep = F::one() / F::lit(1.0 - rate);
        let m = self.constant(mask.map(|e| e * keep));
        self.mul(x, m)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = kernels::expand(self.value(x), shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Expand(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let v = kernels::permute(self.value(x), axes)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Permute { x, axes: axes.to_vec() }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let v = kernels::slice_rows(self.value(x), start, len)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = kernels::concat_rows(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = kernels::mean_last_axis(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::MeanLastAxis(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, F::one() / F::lit(n as f64))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.status()?;
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<F>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::ones(loss_shape));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let mut send = |v: Var, t: Tensor<F>| {
                if needs(v) {
                    accumulate(&mut pending[v.0], t);
                }
            };
            match &node.op {
                Op::Leaf => {
                    accumulate(&mut self.grads[i], g);
                }
                Op::Add(a, b) => {
                    send(*a, kernels::reduce_to_shape(&g, val(*a).shape()));
                    send(*b, kernels::reduce_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    send(*a, kernels::reduce_to_shape(&g, val(*a).shape()));
                    send(*b, kernels::reduce_to_shape(&g, val(*b).shape()).map(|e| -e));
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let ga = kernels::broadcast_binary(&g, val(*b), |x, y| x * y)?;
                        send(*a, kernels::reduce_to_shape(&ga, val(*a).shape()));
                    }
                    if needs(*b) {
                        let gb = kernels::broadcast_binary(&g, val(*a), |x, y| x * y)?;
                        send(*b, kernels::reduce_to_shape(&gb, val(*b).shape()));
                    }
                }
                Op::Affine { x, scale } => send(*x, g.map(|e| e * *scale)),
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let d = zip(&g, y, |gi, yi| gi * yi * (F::one() - yi));
                    send(*x, d);
                }
                Op::Relu(x) => {
                    let d = zip(&g, val(*x), |gi, xi| if xi > F::zero() { gi } else { F::zero() });
                    send(*x, d);
                }
                Op::Spike { x, threshold, alpha } | Op::SmoothSpike { x, threshold, alpha } => {
                    let d = zip(&g, val(*x), |gi, vi| gi * arctan_surrogate_grad(vi, *threshold, *alpha));
                    send(*x, d);
                }
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let (gi, gw, gb) = kernels::conv2d_backward(
                        val(*input),
                        val(*weight),
                        &g,
                        *stride,
                        *padding,
                        needs(*input),
                    )?;
                    if let Some(gi) = gi {
                        send(*input, gi);
                    }
                    send(*weight, gw);
                    if let Some(b) = bias {
                        send(*b, gb);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (gx, gw, gb) = kernels::linear_backward(val(*input), val(*weight), &g);
                    send(*input, gx);
                    send(*weight, gw);
                    if let Some(b) = bias {
                        send(*b, gb);
                    }
                }
                Op::AvgPool { x, k } => send(*x, kernels::avgpool2d_backward(&g, val(*x).shape(), *k)),
                Op::BatchNormTrain { x, gamma, beta, saved } => {
                    let (gx, gg, gb) = kernels::batchnorm_train_backward(&g, val(*gamma), saved);
                    send(*x, gx);
                    send(*gamma, gg);
                    send(*beta, gb);
                }
                Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                    let s = g.shape();
                    let (c, inner) = (s[1], s[2..].iter().product::<usize>());
                    let gam = val(*gamma).data();
                    let mut gx = Tensor::zeros(s);
                    let mut gg = vec![F::zero(); c];
                    let mut gb = vec![F::zero(); c];
                    for (i, ((dst, &gi), &h)) in gx.data_mut().iter_mut().zip(g.data()).zip(xhat.data()).enumerate() {
                        let ch = (i / inner) % c;
                        *dst = gi * gam[ch] * inv_std[ch];
                        gg[ch] += gi * h;
                        gb[ch] += gi;
                    }
                    send(*x, gx);
                    send(*gamma, Tensor::new(vec![c], gg)?);
                    send(*beta, Tensor::new(vec![c], gb)?);
                }
                Op::Reshape(x) => send(*x, g.reshape(val(*x).shape())?),
                Op::Expand(x) => send(*x, kernels::reduce_to_shape(&g, val(*x).shape())),
                Op::Permute { x, axes } => send(*x, kernels::permute(&g, &kernels::inverse_axes(axes))?),
                Op::SliceRows { x, start } => {
                    let full = val(*x).shape();
                    let row: usize = full[1..].iter().product();
                    let mut gx = Tensor::zeros(full);
                    gx.data_mut()[start * row..start * row + g.len()].copy_from_slice(g.data());
                    send(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if needs(p) {
                            let piece = Tensor::new(val(p).shape().to_vec(), g.data()[off..off + n].to_vec())?;
                            send(p, piece);
                        }
                        off += n;
                    }
                }
                Op::MeanLastAxis(x) => send(*x, kernels::mean_last_axis_backward(&g, val(*x).shape())),
                Op::Sum(x) => send(*x, Tensor::full(val(*x).shape(), g.item())),
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, t: Tensor<F>) {
    match slot {
        Some(existing) => existing.add_assign(&t).expect("gradient shape matches value"),
        None => *slot = Some(t),
    }
}

fn zip<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
