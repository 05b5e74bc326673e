//! Forward and backward numeric kernels on plain tensors.
//!
//! Every kernel here is deterministic: loop order is fixed, so the same
//! inputs give bitwise-identical outputs on a given platform.

use super::{dim_err, strides_of, Scalar, Tensor, TensorError};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err("broadcast", format!("{a:?} vs {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides that read `shape` as if it were broadcast to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Walks every index of `out_shape`, reporting the flat offsets into each
/// strided operand.
fn walk<const K: usize>(out_shape: &[usize], strides: [&[usize]; K], mut f: impl FnMut(usize, [usize; K])) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offs = [0usize; K];
    for linear in 0..total {
        f(linear, offs);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            for k in 0..K {
                offs[k] += strides[k][ax];
            }
            if idx[ax] < out_shape[ax] {
                break;
            }
            for k in 0..K {
                offs[k] -= strides[k][ax] * idx[ax];
            }
            idx[ax] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>, TensorError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![F::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    walk(&out_shape, [&sa, &sb], |i, [ia, ib]| data[i] = f(ad[ia], bd[ib]));
    Tensor::new(out_shape, data)
}

/// Materializes `x` broadcast to `shape`.
pub fn expand<F: Scalar>(x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>, TensorError> {
    let out = broadcast_shape(x.shape(), shape)?;
    if out != shape {
        return Err(dim_err("expand", format!("{:?} -> {shape:?}", x.shape())));
    }
    let sx = broadcast_strides(x.shape(), shape);
    let mut data = vec![F::zero(); shape.iter().product()];
    let xd = x.data();
    walk(shape, [&sx], |i, [ix]| data[i] = xd[ix]);
    Tensor::new(shape.to_vec(), data)
}

/// Sums a broadcast gradient back down to `shape`.
pub fn reduce_to_shape<F: Scalar>(grad: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let st = broadcast_strides(shape, grad.shape());
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let gd = grad.data();
    walk(grad.shape(), [&st], |i, [it]| od[it] += gd[i]);
    out
}

/// Output positions `o` for which `o*stride + k - pad` lands inside `[0, n_in)`.
fn valid_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad <= k {
        0
    } else {
        (n_in + pad - k).div_ceil(stride).min(n_out)
    };
    (lo, hi.max(lo))
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom, TensorError> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 4 || ws.len() != 4 {
        return Err(dim_err("conv2d", format!("input {is:?}, weight {ws:?} must be 4-D")));
    }
    if is[1] != ws[1] {
        return Err(dim_err(
            "conv2d",
            format!("input has {} channels, weight expects {}", is[1], ws[1]),
        ));
    }
    if stride == 0 {
        return Err(TensorError::Parameter {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let (h, w, kh, kw) = (is[2], is[3], ws[2], ws[3]);
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(dim_err(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        ));
    }
    Ok(ConvGeom {
        batch: is[0],
        cin: is[1],
        h,
        w,
        cout: ws[0],
        kh,
        kw,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

/// Cross-correlation `[B,Cin,H,W] * [Cout,Cin,kh,kw] + bias`.
pub fn conv2d<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>, TensorError> {
    let g = conv_geometry(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(dim_err("conv2d", format!("bias {:?} vs {} outputs", b.shape(), g.cout)));
        }
    }
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.oh, g.ow]);
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let (xd, wd) = (input.data(), weight.data());
    let od = out.data_mut();
    for n in 0..g.batch {
        for co in 0..g.cout {
            let oplane = &mut od[(n * g.cout + co) * plane_out..][..plane_out];
            if let Some(b) = bias {
                oplane.fill(b.data()[co]);
            }
            for ci in 0..g.cin {
                let iplane = &xd[(n * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wd[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = &mut oplane[oy * g.ow..(oy + 1) * g.ow];
                            let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let shift = kx as isize - g.pad as isize;
                                let src = &irow[(ox0 as isize + shift) as usize..(ox1 as isize + shift) as usize];
                                for (o, &i) in orow[ox0..ox1].iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<(Option<Tensor<F>>, Tensor<F>, Tensor<F>), TensorError> {
    let g = conv_geometry(input, weight, stride, pad)?;
    if grad_out.shape() != [g.batch, g.cout, g.oh, g.ow] {
        return Err(dim_err("conv2d_backward", format!("grad {:?}", grad_out.shape())));
    }
    let mut gi = need_input.then(|| Tensor::zeros(input.shape()));
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[g.cout]);
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let (xd, wd, god) = (input.data(), weight.data(), grad_out.data());
    for n in 0..g.batch {
        for co in 0..g.cout {
            let gplane = &god[(n * g.cout + co) * plane_out..][..plane_out];
            gb.data_mut()[co] += gplane.iter().copied().sum::<F>();
            for ci in 0..g.cin {
                let iplane = &xd[(n * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = wd[widx];
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        let mut acc = F::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * g.ow..(oy + 1) * g.ow];
                            let ibase = (n * g.cin + ci) * plane_in + iy * g.w;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad;
                                acc += grow[ox] * iplane[iy * g.w + ix];
                                if let Some(gi) = gi.as_mut() {
                                    gi.data_mut()[ibase + ix] += wv * grow[ox];
                                }
                            }
                        }
                        gw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((gi, gw, gb))
}

/// Affine map `x · Wᵀ + b` for `x: [B,F]`, `W: [O,F]`.
pub fn linear<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>, TensorError> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(dim_err("linear", format!("input {xs:?}, weight {ws:?}")));
    }
    let (b, f, o) = (xs[0], xs[1], ws[0]);
    if let Some(bias) = bias {
        if bias.shape() != [o] {
            return Err(dim_err("linear", format!("bias {:?} vs {o} outputs", bias.shape())));
        }
    }
    let mut out = vec![F::zero(); b * o];
    for r in 0..b {
        let row = &x.data()[r * f..(r + 1) * f];
        for c in 0..o {
            let wrow = &weight.data()[c * f..(c + 1) * f];
            let dot = row.iter().zip(wrow).fold(F::zero(), |acc, (&a, &w)| acc + a * w);
            out[r * o + c] = match bias {
                Some(bias) => dot + bias.data()[c],
                None => dot,
            };
        }
    }
    Tensor::new(vec![b, o], out)
}

/// Gradients of [`linear`]: `(dx, dW, db)`.
pub fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (b, f) = (x.shape()[0], x.shape()[1]);
    let o = weight.shape()[0];
    let mut gx = Tensor::zeros(&[b, f]);
    let mut gw = Tensor::zeros(&[o, f]);
    let mut gb = Tensor::zeros(&[o]);
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    for r in 0..b {
        let xrow = &xd[r * f..(r + 1) * f];
        for c in 0..o {
            let g = gd[r * o + c];
            if g == F::zero() {
                continue;
            }
            gb.data_mut()[c] += g;
            let wrow = &wd[c * f..(c + 1) * f];
            let gxrow = &mut gx.data_mut()[r * f..(r + 1) * f];
            for (dst, &w) in gxrow.iter_mut().zip(wrow) {
                *dst += g * w;
            }
            let gwrow = &mut gw.data_mut()[c * f..(c + 1) * f];
            for (dst, &xv) in gwrow.iter_mut().zip(xrow) {
                *dst += g * xv;
            }
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping `k×k` average pooling on `[B,C,H,W]`.
pub fn avgpool2d<F: Scalar>(x: &Tensor<F>, k: usize) -> Result<Tensor<F>, TensorError> {
    let s = x.shape();
    if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
        return Err(dim_err("avgpool2d", format!("input {s:?} not divisible by k={k}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = F::one() / F::lit((k * k) as f64);
    let mut out = vec![F::zero(); planes * oh * ow];
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc += plane[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    Tensor::new(vec![s[0], s[1], oh, ow], out)
}

pub fn avgpool2d_backward<F: Scalar>(grad_out: &Tensor<F>, input_shape: &[usize], k: usize) -> Tensor<F> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let planes = input_shape[0] * input_shape[1];
    let scale = F::one() / F::lit((k * k) as f64);
    let mut gi = Tensor::zeros(input_shape);
    let gid = gi.data_mut();
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                gid[(p * h + y) * w + x] = grad_out.data()[(p * oh + y / k) * ow + x / k] * scale;
            }
        }
    }
    gi
}

/// Per-channel statistics over every axis except 1.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    if shape.len() < 2 {
        return Err(dim_err("batchnorm", format!("input {shape:?} needs a channel axis")));
    }
    let inner: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

/// Saved context of a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchNormSaved<F> {
    pub xhat: Tensor<F>,
    pub mean: Vec<F>,
    /// Biased batch variance.
    pub var: Vec<F>,
    pub inv_std: Vec<F>,
}

/// Training-mode batch normalization with batch statistics per channel.
pub fn batchnorm_train<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, BatchNormSaved<F>), TensorError> {
    let (n, c, inner) = channel_layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err(
            "batchnorm",
            format!("{c} channels vs gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let m = F::lit((n * inner) as f64);
    let xd = x.data();
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let row = &xd[(b * c + ch) * inner..][..inner];
            mean[ch] += row.iter().copied().sum::<F>();
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / m);
    for b in 0..n {
        for ch in 0..c {
            let row = &xd[(b * c + ch) * inner..][..inner];
            var[ch] += row.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<F>();
        }
    }
    var.iter_mut().for_each(|v| *v = *v / m);
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma.data()[ch] * h + beta.data()[ch];
            }
        }
    }
    Ok((y, BatchNormSaved { xhat, mean, var, inv_std }))
}

/// Gradients `(dx, dgamma, dbeta)` of [`batchnorm_train`].
pub fn batchnorm_train_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    gamma: &Tensor<F>,
    saved: &BatchNormSaved<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let shape = grad_out.shape();
    let (n, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let m = F::lit((n * inner) as f64);
    let (gd, hd) = (grad_out.data(), saved.xhat.data());
    let mut sum_g = vec![F::zero(); c];
    let mut sum_gh = vec![F::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                sum_g[ch] += gd[i];
                sum_gh[ch] += gd[i] * hd[i];
            }
        }
    }
    let mut gx = Tensor::zeros(shape);
    for b in 0..n {
        for ch in 0..c {
            let k = gamma.data()[ch] * saved.inv_std[ch] / m;
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                gx.data_mut()[i] = k * (m * gd[i] - sum_g[ch] - hd[i] * sum_gh[ch]);
            }
        }
    }
    (
        gx,
        Tensor::new(vec![c], sum_gh).expect("shape"),
        Tensor::new(vec![c], sum_g).expect("shape"),
    )
}

/// Evaluation-mode batch normalization with fixed statistics.
/// Returns the output and the normalized input.
pub fn batchnorm_eval<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    mean: &[F],
    var: &[F],
    eps: F,
) -> Result<(Tensor<F>, Tensor<F>, Vec<F>), TensorError> {
    let (n, c, inner) = channel_layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(dim_err("batchnorm", format!("{c} channels vs parameter extents")));
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * inner;
            for i in base..base + inner {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = gamma.data()[ch] * h + beta.data()[ch];
            }
        }
    }
    Ok((y, xhat, inv_std))
}

/// Mean over the last axis: `[.., n] -> [..]`.
pub fn mean_last_axis<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
    let s = x.shape();
    let n = *s.last().ok_or_else(|| dim_err("mean_last_axis", "scalar input"))?;
    if n == 0 {
        return Err(dim_err("mean_last_axis", "empty last axis"));
    }
    let scale = F::one() / F::lit(n as f64);
    let data = x
        .data()
        .chunks(n)
        .map(|c| c.iter().copied().sum::<F>() * scale)
        .collect();
    Tensor::new(s[..s.len() - 1].to_vec(), data)
}

pub fn mean_last_axis_backward<F: Scalar>(grad_out: &Tensor<F>, input_shape: &[usize]) -> Tensor<F> {
    let n = *input_shape.last().expect("non-scalar");
    let scale = F::one() / F::lit(n as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, n))
        .collect();
    Tensor::new(input_shape.to_vec(), data).expect("shape")
}

/// Axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<F: Scalar>(x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>, TensorError> {
    let s = x.shape();
    let mut seen = vec![false; s.len()];
    if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(dim_err("permute", format!("axes {axes:?} for shape {s:?}")));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let read: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = vec![F::zero(); x.len()];
    let xd = x.data();
    walk(&out_shape, [&read], |i, [src]| data[i] = xd[src]);
    Tensor::new(out_shape, data)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Rows `[start, start+len)` of the first axis.
pub fn slice_rows<F: Scalar>(x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>, TensorError> {
    let s = x.shape();
    if s.is_empty() || start + len > s[0] {
        return Err(dim_err("slice_rows", format!("rows {start}..{} of {s:?}", start + len)));
    }
    let row: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = len;
    Tensor::new(shape, x.data()[start * row..(start + len) * row].to_vec())
}

/// Concatenation along the first axis.
pub fn concat_rows<F: Scalar>(parts: &[&Tensor<F>]) -> Result<Tensor<F>, TensorError> {
    let first = parts.first().ok_or_else(|| dim_err("concat_rows", "no inputs"))?;
    let tail = &first.shape()[1..];
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.shape().is_empty() || &p.shape()[1..] != tail {
            return Err(dim_err("concat_rows", format!("{:?} vs {:?}", p.shape(), first.shape())));
        }
        rows += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = rows;
    Tensor::new(shape, data)
}
