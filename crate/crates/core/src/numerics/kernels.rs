//! Forward and backward kernels on plain tensors.

use super::tensor::{broadcast_offsets, broadcast_shapes, split_axis};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Elementwise `a op b` with `b` broadcast onto `a` by the trailing rule.
pub(crate) fn binary<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let data = if a.shape() == b.shape() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    } else {
        let offs = broadcast_offsets(a.shape(), b.shape())?;
        let bd = b.data();
        a.data()
            .iter()
            .zip(offs)
            .map(|(&x, o)| f(x, bd[o]))
            .collect()
    };
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Sums `grad` down to `target` shape, inverting a trailing broadcast.
pub(crate) fn reduce_to<T: Real>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let offs = broadcast_offsets(grad.shape(), target).expect("reduce_to follows a broadcast");
    let mut out = Tensor::zeros(target.to_vec());
    let od = out.data_mut();
    for (&g, o) in grad.data().iter().zip(offs) {
        od[o] = od[o] + g;
    }
    out
}

pub(crate) fn broadcast_to<T: Real>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let offs = broadcast_offsets(shape, x.shape())?;
    let xd = x.data();
    Ok(Tensor::from_parts(
        shape.to_vec(),
        offs.into_iter().map(|o| xd[o]).collect(),
    ))
}

struct MatmulDims {
    out_shape: Vec<usize>,
    a_batch: Vec<usize>,
    b_batch: Vec<usize>,
    m: usize,
    n: usize,
    p: usize,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
        )));
    }
    let (m, n) = (a[a.len() - 2], a[a.len() - 1]);
    let (n2, p) = (b[b.len() - 2], b[b.len() - 1]);
    if n != n2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {a:?} x {b:?}"
        )));
    }
    let batch = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2])?;
    let a_batch = broadcast_offsets(&batch, &a[..a.len() - 2])?;
    let b_batch = broadcast_offsets(&batch, &b[..b.len() - 2])?;
    let mut out_shape = batch;
    out_shape.extend([m, p]);
    Ok(MatmulDims {
        out_shape,
        a_batch,
        b_batch,
        m,
        n,
        p,
    })
}

/// c[m,p] += a[m,n] . b[n,p]
fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == T::zero() {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums, combined in a fixed
/// order.
#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for j in 0..8 {
            acc[j] = acc[j] + a[j] * b[j];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail = tail + a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// a[m,n] += c[m,p] . b[n,p]^T
fn gemm_nt<T: Real>(c: &[T], b: &[T], a: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let crow = &c[i * p..(i + 1) * p];
        for k in 0..n {
            let brow = &b[k * p..(k + 1) * p];
            a[i * n + k] = a[i * n + k] + dot(crow, brow);
        }
    }
}

/// b[n,p] += a[m,n]^T . c[m,p]
fn gemm_tn<T: Real>(a: &[T], c: &[T], b: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let crow = &c[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == T::zero() {
                continue;
            }
            let brow = &mut b[k * p..(k + 1) * p];
            for (bv, &cv) in brow.iter_mut().zip(crow) {
                *bv = *bv + av * cv;
            }
        }
    }
}

pub(crate) fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let (m, n, p) = (d.m, d.n, d.p);
    let mut out = Tensor::zeros(d.out_shape.clone());
    let od = out.data_mut();
    for (bi, (&ao, &bo)) in d.a_batch.iter().zip(&d.b_batch).enumerate() {
        gemm_nn(
            &a.data()[ao * m * n..(ao + 1) * m * n],
            &b.data()[bo * n * p..(bo + 1) * n * p],
            &mut od[bi * m * p..(bi + 1) * m * p],
            m,
            n,
            p,
        );
    }
    Ok(out)
}

pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let (m, n, p) = (d.m, d.n, d.p);
    let mut da = Tensor::zeros_like(a);
    let mut db = Tensor::zeros_like(b);
    for (bi, (&ao, &bo)) in d.a_batch.iter().zip(&d.b_batch).enumerate() {
        let dcs = &dc.data()[bi * m * p..(bi + 1) * m * p];
        gemm_nt(
            dcs,
            &b.data()[bo * n * p..(bo + 1) * n * p],
            &mut da.data_mut()[ao * m * n..(ao + 1) * m * n],
            m,
            n,
            p,
        );
        gemm_tn(
            &a.data()[ao * m * n..(ao + 1) * m * n],
            dcs,
            &mut db.data_mut()[bo * n * p..(bo + 1) * n * p],
            m,
            n,
            p,
        );
    }
    (da, db)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub ker: usize,
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<ConvDims> {
    let (batch, c_in, len) = match *x {
        [c, l] => (1, c, l),
        [n, c, l] => (n, c, l),
        _ => {
            return Err(Error::shape(format!(
                "conv1d input must be [C, L] or [N, C, L], got {x:?}"
            )))
        }
    };
    let [c_out, wc_in, ker] = *w else {
        return Err(Error::shape(format!(
            "conv1d weight must be [C_out, C_in, K], got {w:?}"
        )));
    };
    if ker % 2 == 0 {
        return Err(Error::config(format!(
            "conv1d kernel size must be odd, got {ker}"
        )));
    }
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv1d weight expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if b != [c_out] {
        return Err(Error::shape(format!(
            "conv1d bias must be [{c_out}], got {b:?}"
        )));
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        len,
        ker,
    })
}

/// Valid output range `[t0, t1)` for kernel tap `k` and its input shift.
#[inline]
fn tap_range(k: usize, ker: usize, len: usize) -> (usize, usize, isize) {
    let shift = k as isize - (ker as isize - 1) / 2;
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift).clamp(0, len as isize) as usize;
    (t0, t1.max(t0), shift)
}

/// Unrolls `x[N, C, L]` into columns `[C * ker, N * L]` so the convolution
/// becomes one matrix product. Out-of-range taps stay zero.
fn im2col<T: Real>(xd: &[T], d: ConvDims) -> Vec<T> {
    let ConvDims {
        batch,
        c_in,
        len,
        ker,
        ..
    } = d;
    let cols = batch * len;
    let mut out = vec![T::zero(); c_in * ker * cols];
    for ci in 0..c_in {
        for k in 0..ker {
            let (t0, t1, shift) = tap_range(k, ker, len);
            if t0 == t1 {
                continue;
            }
            let row = &mut out[(ci * ker + k) * cols..(ci * ker + k + 1) * cols];
            for n in 0..batch {
                let src = &xd[(n * c_in + ci) * len..(n * c_in + ci + 1) * len];
                let s0 = (t0 as isize + shift) as usize;
                row[n * len + t0..n * len + t1].copy_from_slice(&src[s0..s0 + (t1 - t0)]);
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates columns back onto `dx[N, C, L]`.
fn col2im<T: Real>(cols_d: &[T], dx: &mut [T], d: ConvDims) {
    let ConvDims {
        batch,
        c_in,
        len,
        ker,
        ..
    } = d;
    let cols = batch * len;
    for ci in 0..c_in {
        for k in 0..ker {
            let (t0, t1, shift) = tap_range(k, ker, len);
            if t0 == t1 {
                continue;
            }
            let row = &cols_d[(ci * ker + k) * cols..(ci * ker + k + 1) * cols];
            for n in 0..batch {
                let s0 = (t0 as isize + shift) as usize;
                let dst =
                    &mut dx[(n * c_in + ci) * len + s0..(n * c_in + ci) * len + s0 + (t1 - t0)];
                for (o, &g) in dst.iter_mut().zip(&row[n * len + t0..n * len + t1]) {
                    *o = *o + g;
                }
            }
        }
    }
}

/// Same-padded cross-correlation. Output shape matches the input layout.
pub(crate) fn conv1d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    d: ConvDims,
) -> Tensor<T> {
    let ConvDims {
        batch,
        c_in,
        c_out,
        len,
        ker,
    } = d;
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = c_out;
    let cols = batch * len;
    let xcol = im2col(x.data(), d);
    // [c_out, N * L]
    let mut y = vec![T::zero(); c_out * cols];
    gemm_nn(w.data(), &xcol, &mut y, c_out, c_in * ker, cols);
    let bd = bias.data();
    let mut out = vec![T::zero(); batch * c_out * len];
    for n in 0..batch {
        for co in 0..c_out {
            let src = &y[co * cols + n * len..co * cols + (n + 1) * len];
            let dst = &mut out[(n * c_out + co) * len..(n * c_out + co + 1) * len];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v + bd[co];
            }
        }
    }
    Tensor::from_parts(shape, out)
}

pub(crate) fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    d: ConvDims,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ConvDims {
        batch,
        c_in,
        c_out,
        len,
        ker,
    } = d;
    let cols = batch * len;
    // dy as [c_out, N * L]
    let mut g = vec![T::zero(); c_out * cols];
    let mut db = Tensor::zeros(vec![c_out]);
    {
        let gd = dy.data();
        let dbd = db.data_mut();
        for n in 0..batch {
            for co in 0..c_out {
                let src = &gd[(n * c_out + co) * len..(n * c_out + co + 1) * len];
                g[co * cols + n * len..co * cols + (n + 1) * len].copy_from_slice(src);
                dbd[co] = src.iter().fold(dbd[co], |acc, &v| acc + v);
            }
        }
    }
    let xcol = im2col(x.data(), d);
    let mut dw = Tensor::zeros_like(w);
    gemm_nt(&g, &xcol, dw.data_mut(), c_out, c_in * ker, cols);
    let mut dcol = vec![T::zero(); c_in * ker * cols];
    gemm_tn(w.data(), &g, &mut dcol, c_out, c_in * ker, cols);
    let mut dx = Tensor::zeros_like(x);
    col2im(&dcol, dx.data_mut(), d);
    (dx, dw, db)
}

pub(crate) fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mx = (0..n).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..n {
                let e = (xd[at(j)] - mx).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let dot = (0..n).fold(T::zero(), |acc, j| acc + yd[at(j)] * gd[at(j)]);
            for j in 0..n {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

pub(crate) fn mean_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let inv = T::one() / T::of(n as f64);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..n {
            let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (v, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *v = *v + s;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * inv);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::from_parts(shape, out)
}

pub(crate) fn mean_axis_backward<T: Real>(
    dy: &Tensor<T>,
    in_shape: &[usize],
    axis: usize,
) -> Tensor<T> {
    let (outer, n, inner) = split_axis(in_shape, axis);
    let inv = T::one() / T::of(n as f64);
    let gd = dy.data();
    let mut dx = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        for _ in 0..n {
            dx.extend(gd[o * inner..(o + 1) * inner].iter().map(|&g| g * inv));
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

pub(crate) fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let r = shape.len();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..xd.len() {
        out.push(xd[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?
        .shape();
    super::tensor::check_axis(first, axis)?;
    for x in xs {
        let s = x.shape();
        let ok = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(format!(
                "concat along axis {axis}: {s:?} incompatible with {first:?}"
            )));
        }
    }
    let (outer, _, inner) = split_axis(first, axis);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape()[axis];
            out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

pub(crate) fn pad<T: Real>(x: &Tensor<T>, axis: usize, before: usize, after: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(x.shape(), axis);
    let total = before + n + after;
    let xd = x.data();
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        out[(o * total + before) * inner..(o * total + before + n) * inner]
            .copy_from_slice(&xd[o * n * inner..(o + 1) * n * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = total;
    Tensor::from_parts(shape, out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Mean cross-entropy of `logits[B, C]` against `labels`; also returns the
/// softmax probabilities for the backward pass.
pub(crate) fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [b, c] = *logits.shape() else {
        return Err(Error::shape(format!(
            "cross entropy expects [B, C] logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let probs = softmax(logits, 1);
    let ld = logits.data();
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = &ld[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx
            + row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mx).exp())
                .ln();
        total = total + (lse - row[y]);
    }
    Ok((total / T::of(b as f64), probs))
}
