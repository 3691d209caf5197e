//! Forward and adjoint kernels on plain tensors.
//!
//! Every function here is deterministic and single-threaded; the graph layer
//! composes them into recorded operations.

use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

// ── Broadcasting ────────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes (trailing alignment, size-1 stretch).
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, with zero stride on stretched axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + pad] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output offset together with the matching input offsets.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = vec![0.0; out.iter().product()];
    let (da, db) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sum a gradient of broadcast shape back down to `shape`.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let s = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    let mut acc = vec![0.0; shape.iter().product()];
    let g = grad.data();
    for_each_broadcast(out, &s, &zero, |o, i, _| acc[i] += g[o]);
    Tensor::from_parts(shape.to_vec(), acc)
}

// ── Linear algebra ──────────────────────────────────────────────────────

/// `[m,k]·[k,n]` or batched `[B,m,k]·[B,k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
        ([ba, m, k], [bb, k2, n]) if ba == bb && k == k2 => (*ba, *m, *k, *n),
        _ => return Err(mismatch("matmul", a.shape(), b.shape())),
    };
    let mut c = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..batch {
        let a0 = bi * m * k;
        let b0 = bi * k * n;
        let c0 = bi * m * n;
        for i in 0..m {
            let crow = &mut c[c0 + i * n..c0 + (i + 1) * n];
            for t in 0..k {
                let av = ad[a0 + i * k + t];
                let brow = &bd[b0 + t * n..b0 + (t + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    let shape = if a.rank() == 2 {
        vec![m, n]
    } else {
        vec![batch, m, n]
    };
    Ok(Tensor::from_parts(shape, c))
}

/// Swap the last two axes.
pub fn transpose_last2(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(invalid("transpose", format!("rank {r} < 2")));
    }
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (m * n);
    let mut out = vec![0.0; x.len()];
    let d = x.data();
    for b in 0..batch {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Ok(Tensor::from_parts(shape, out))
}

// ── Convolution ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent `floor((n + 2·pad − k)/stride) + 1`.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv_geometry(
    x: &[usize],
    w: &[usize],
    bias: Option<&[usize]>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let (c_in, h, wd) = match x {
        [c, h, w] => (*c, *h, *w),
        _ => {
            return Err(invalid(
                "conv2d",
                format!("input must be [C,H,W], got {x:?}"),
            ))
        }
    };
    let (c_out, c_in_w, k) = match w {
        [co, ci, k1, k2] if k1 == k2 => (*co, *ci, *k1),
        _ => {
            return Err(invalid(
                "conv2d",
                format!("weight must be [C_out,C_in,k,k], got {w:?}"),
            ))
        }
    };
    if c_in != c_in_w {
        return Err(mismatch("conv2d", x, w));
    }
    if k % 2 == 0 {
        return Err(invalid("conv2d", format!("kernel size {k} must be odd")));
    }
    if let Some(b) = bias {
        if b != [c_out] {
            return Err(mismatch("conv2d bias", b, &[c_out]));
        }
    }
    let (h_out, w_out) = match (
        conv_out_extent(h, k, stride, pad),
        conv_out_extent(wd, k, stride, pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(invalid(
                "conv2d",
                format!("empty output for input {h}x{wd}, k={k}, stride={stride}, pad={pad}"),
            ))
        }
    };
    Ok(ConvGeometry {
        c_in,
        c_out,
        h,
        w: wd,
        k,
        stride,
        pad,
        h_out,
        w_out,
    })
}

/// Range of output positions `o` whose input tap `o·stride + kk − pad` is in `[0, n)`.
fn valid_outputs(n: usize, n_out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o·stride + kk >= pad  and  o·stride + kk - pad < n
    let lo = if kk >= pad {
        0
    } else {
        (pad - kk).div_ceil(stride)
    };
    let hi = if n + pad > kk {
        ((n + pad - kk - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation with zero padding.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = conv_geometry(x.shape(), w.shape(), bias.map(|b| b.shape()), stride, pad)?;
    let plane = g.h_out * g.w_out;
    let mut out = vec![0.0; g.c_out * plane];
    let (xd, wd) = (x.data(), w.data());
    for co in 0..g.c_out {
        let o_base = co * plane;
        if let Some(b) = bias {
            out[o_base..o_base + plane].fill(b.data()[co]);
        }
        for ci in 0..g.c_in {
            let x_base = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy0, oy1) = valid_outputs(g.h, g.h_out, ky, stride, pad);
                for kx in 0..g.k {
                    let wv = wd[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (ox0, ox1) = valid_outputs(g.w, g.w_out, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let orow = o_base + oy * g.w_out;
                        let xrow = x_base + iy * g.w;
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            out[orow + ox] += wv * xd[xrow + ix];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.c_out, g.h_out, g.w_out], out))
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geometry(x.shape(), w.shape(), None, stride, pad)?;
    if gy.shape() != [g.c_out, g.h_out, g.w_out] {
        return Err(mismatch(
            "conv2d backward",
            gy.shape(),
            &[g.c_out, g.h_out, g.w_out],
        ));
    }
    let plane = g.h_out * g.w_out;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.c_out];
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    for co in 0..g.c_out {
        let o_base = co * plane;
        gb[co] = gyd[o_base..o_base + plane].iter().sum();
        for ci in 0..g.c_in {
            let x_base = ci * g.h * g.w;
            for ky in 0..g.k {
                let (oy0, oy1) = valid_outputs(g.h, g.h_out, ky, stride, pad);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = wd[widx];
                    let (ox0, ox1) = valid_outputs(g.w, g.w_out, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let orow = o_base + oy * g.w_out;
                        let xrow = x_base + iy * g.w;
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            let gv = gyd[orow + ox];
                            acc += gv * xd[xrow + ix];
                            gx[xrow + ix] += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        Tensor::from_parts(vec![g.c_out], gb),
    ))
}

// ── Softmax ─────────────────────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(invalid(
            "softmax",
            format!("axis {axis} for rank {}", x.rank()),
        ));
    }
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(f64::NEG_INFINITY, |m, j| m.max(d[at(j)]));
            let mut sum = 0.0;
            for j in 0..len {
                let e = (d[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Given softmax output `y` and upstream `gy`, returns `y ⊙ (gy − Σ gy·y)`.
pub fn softmax_backward(y: &Tensor, gy: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), gy.data());
    let mut gx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                gx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

// ── Group normalization ─────────────────────────────────────────────────

/// Per-group statistics saved by the forward pass.
#[derive(Clone, Debug)]
pub struct GroupStats {
    pub groups: usize,
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn group_layout(x: &Tensor, groups: usize) -> Result<(usize, usize)> {
    if x.rank() < 1 {
        return Err(invalid("group_norm", "input has no channel axis"));
    }
    let c = x.shape()[0];
    if groups == 0 || c % groups != 0 {
        return Err(invalid(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    Ok((c, x.len() / c))
}

pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, GroupStats)> {
    let (c, spatial) = group_layout(x, groups)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch("group_norm affine", gamma.shape(), &[c]));
    }
    let per_group = c / groups * spatial;
    let d = x.data();
    let mut out = vec![0.0; x.len()];
    let mut stats = GroupStats {
        groups,
        mean: Vec::with_capacity(groups),
        rstd: Vec::with_capacity(groups),
    };
    for gi in 0..groups {
        let slice = &d[gi * per_group..(gi + 1) * per_group];
        let mean = slice.iter().sum::<f64>() / per_group as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_group as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (j, &v) in slice.iter().enumerate() {
            let ch = (gi * per_group + j) / spatial;
            out[gi * per_group + j] = (v - mean) * rstd * gamma.data()[ch] + beta.data()[ch];
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), stats))
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    stats: &GroupStats,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = x.shape()[0];
    let spatial = x.len() / c;
    let per_group = c / stats.groups * spatial;
    let m = per_group as f64;
    let (xd, gyd, gd) = (x.data(), gy.data(), gamma.data());
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for gi in 0..stats.groups {
        let (mean, rstd) = (stats.mean[gi], stats.rstd[gi]);
        let base = gi * per_group;
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..per_group {
            let ch = (base + j) / spatial;
            let xhat = (xd[base + j] - mean) * rstd;
            let g = gyd[base + j] * gd[ch];
            sum_g += g;
            sum_gx += g * xhat;
            ggamma[ch] += gyd[base + j] * xhat;
            gbeta[ch] += gyd[base + j];
        }
        for j in 0..per_group {
            let ch = (base + j) / spatial;
            let xhat = (xd[base + j] - mean) * rstd;
            let g = gyd[base + j] * gd[ch];
            gx[base + j] = rstd / m * (m * g - sum_g - xhat * sum_gx);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], ggamma),
        Tensor::from_parts(vec![c], gbeta),
    )
}

// ── Bilinear resize ─────────────────────────────────────────────────────

/// Source taps `(i0, i1, frac)` for each output index, half-pixel centers.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn resize_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(invalid(
            "bilinear_resize",
            format!("input must be [C,H,W], got {s:?}"),
        )),
    }
}

pub fn bilinear_resize(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (c, h, w) = resize_dims(x)?;
    if h_out == 0 || w_out == 0 {
        return Err(invalid("bilinear_resize", "target size must be positive"));
    }
    if (h, w) == (h_out, w_out) {
        return Ok(x.clone());
    }
    let ty = resize_taps(h, h_out);
    let tx = resize_taps(w, w_out);
    let d = x.data();
    let mut out = Vec::with_capacity(c * h_out * w_out);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = d[base + y0 * w + x0] * (1.0 - fx) + d[base + y0 * w + x1] * fx;
                let bot = d[base + y1 * w + x0] * (1.0 - fx) + d[base + y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h_out, w_out], out))
}

/// Adjoint of [`bilinear_resize`]: scatters `gy` back onto the input grid.
pub fn bilinear_resize_backward(in_shape: &[usize], gy: &Tensor) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (h_out, w_out) = (gy.shape()[1], gy.shape()[2]);
    if (h, w) == (h_out, w_out) {
        return gy.clone();
    }
    let ty = resize_taps(h, h_out);
    let tx = resize_taps(w, w_out);
    let g = gy.data();
    let mut gx = vec![0.0; c * h * w];
    let mut k = 0;
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let v = g[k];
                k += 1;
                gx[base + y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                gx[base + y0 * w + x1] += v * (1.0 - fy) * fx;
                gx[base + y1 * w + x0] += v * fy * (1.0 - fx);
                gx[base + y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

// ── Axis-0 concat / slice ───────────────────────────────────────────────

pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| invalid("concat", "no inputs"))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[1..] != tail {
            return Err(mismatch("concat", first.shape(), p.shape()));
        }
        lead += p.shape()[0];
        data.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Ok(Tensor::from_parts(shape, data))
}

pub fn slice0(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if x.rank() == 0 || len == 0 || start + len > x.shape()[0] {
        return Err(invalid(
            "slice",
            format!("range {start}..{} on shape {:?}", start + len, x.shape()),
        ));
    }
    let row: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = len;
    Ok(Tensor::from_parts(
        shape,
        x.data()[start * row..(start + len) * row].to_vec(),
    ))
}
