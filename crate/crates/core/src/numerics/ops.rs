//! Forward kernels for the differentiable primitives.
//!
//! These are plain functions over [`DenseArray`]; the tape in
//! [`super::tape`] calls them for forward values and reuses several of
//! them in its adjoints.

use crate::error::{dim_err, Error, Result};

use super::array::{check_shape, precision, round_to_precision, DenseArray, Precision, MAX_RANK};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Products up to this many multiply-adds skip the packed kernel, whose
/// per-call setup dominates at the per-head slice sizes.
const SMALL_GEMM: usize = 16 * 1024;

#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if !accumulate {
        c.fill(0.0);
    }
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * rsa + p * csa];
            if csb == 1 {
                let brow = &b[p * rsb..p * rsb + n];
                row.iter_mut().zip(brow).for_each(|(r, &bv)| *r += aip * bv);
            } else {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += aip * b[p * rsb + j * csb];
                }
            }
        }
    }
}

/// `C = op(A) · op(B)` for one `m×k` by `k×n` product.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `ta`), `b` is stored `[k, n]`
/// (or `[n, k]` when `tb`). With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m * k * n <= SMALL_GEMM {
        small_gemm(m, k, n, a, (rsa as usize, csa as usize), b, (rsb as usize, csb as usize), c, accumulate);
        if precision() == Precision::F32 {
            round_to_precision(c);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    match precision() {
        Precision::F64 => unsafe {
            // SAFETY: slice lengths checked above against the strides used.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::F32 => {
            let a32: Vec<f32> = a.iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = b.iter().map(|&x| x as f32).collect();
            let mut c32: Vec<f32> = if accumulate {
                c.iter().map(|&x| x as f32).collect()
            } else {
                vec![0.0; m * n]
            };
            unsafe {
                // SAFETY: as above, on the converted buffers.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    rsa,
                    csa,
                    b32.as_ptr(),
                    rsb,
                    csb,
                    beta as f32,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (dst, src) in c.iter_mut().zip(c32) {
                *dst = src as f64;
            }
        }
    }
}

/// Shapes involved in a (possibly batched) product.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch entry.
    pub shared_b: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return dim_err(format!("matmul needs rank >= 2, got {a:?} and {b:?}"));
    }
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return dim_err(format!("matmul inner extents differ: {a:?} x {b:?}"));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let shared_b = b_batch.is_empty();
    if !shared_b && a_batch != b_batch {
        return dim_err(format!("matmul batch extents differ: {a:?} x {b:?}"));
    }
    let batch = a_batch.iter().product();
    let mut out = a_batch.to_vec();
    out.extend([m, n]);
    Ok((MatmulDims { batch, m, k, n, shared_b }, out))
}

/// Batched product over the last two axes. `b` may be rank 2 and shared.
pub(crate) fn matmul_general(a: &DenseArray, b: &DenseArray, ta: bool, tb: bool) -> Result<DenseArray> {
    let (dims, out_shape) = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    let MatmulDims { batch, m, k, n, shared_b } = dims;
    let mut out = vec![0.0; batch * m * n];
    if shared_b && !ta {
        gemm(false, tb, batch * m, k, n, a.data(), b.data(), &mut out, false);
    } else {
        for i in 0..batch {
            let bs = if shared_b { b.data() } else { &b.data()[i * k * n..(i + 1) * k * n] };
            gemm(
                ta,
                tb,
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                bs,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
    }
    DenseArray::new(&out_shape, out)
}

/// Standard matrix product of `[m×k]` by `[k×n]`.
pub fn matmul(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    if a.rank() != 2 || b.rank() != 2 {
        return dim_err(format!("matmul expects matrices, got {:?} and {:?}", a.shape(), b.shape()));
    }
    matmul_general(a, b, false, false)
}

/// Numerically stable softmax along the last axis. `-inf` entries map to 0.
pub fn softmax_lastaxis(x: &DenseArray) -> Result<DenseArray> {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for (row, chunk) in out.chunks_mut(d).enumerate() {
        let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row });
        }
        let mut total = 0.0;
        for v in chunk.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in chunk.iter_mut() {
            *v /= total;
        }
    }
    round_to_precision(&mut out);
    DenseArray::new(x.shape(), out)
}

/// `x - logsumexp(x)` along the last axis.
pub fn log_softmax_lastaxis(x: &DenseArray) -> Result<DenseArray> {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for (row, chunk) in out.chunks_mut(d).enumerate() {
        let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row });
        }
        let lse = max + chunk.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in chunk.iter_mut() {
            *v -= lse;
        }
    }
    round_to_precision(&mut out);
    DenseArray::new(x.shape(), out)
}

/// Per-vector statistics kept by layer normalization for its adjoint.
pub(crate) struct LayerNormCache {
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layernorm_with_cache(
    x: &DenseArray,
    gamma: &DenseArray,
    beta: &DenseArray,
    eps: f64,
) -> Result<(DenseArray, LayerNormCache)> {
    let d = x.last_dim();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return dim_err(format!(
            "layernorm affine shapes {:?}/{:?} do not match last axis {d}",
            gamma.shape(),
            beta.shape()
        ));
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let v = &x.data()[r * d..(r + 1) * d];
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[r] = istd;
        for j in 0..d {
            let xh = (v[j] - mean) * istd;
            normalized[r * d + j] = xh;
            out[r * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    round_to_precision(&mut out);
    Ok((DenseArray::new(x.shape(), out)?, LayerNormCache { normalized, inv_std }))
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layernorm(x: &DenseArray, gamma: &DenseArray, beta: &DenseArray, eps: f64) -> Result<DenseArray> {
    layernorm_with_cache(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Splits a shape around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Arithmetic mean along `axis`, which is removed from the shape.
pub fn avgpool_axis(x: &DenseArray, axis: usize) -> Result<DenseArray> {
    if axis >= x.rank() {
        return dim_err(format!("axis {axis} out of range for rank {}", x.rank()));
    }
    let (outer, n, inner) = axis_blocks(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let src = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for d in dst.iter_mut() {
            *d /= n as f64;
        }
    }
    round_to_precision(&mut out);
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    DenseArray::new(&shape, out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `tanh` through one `exp`; several times faster than the libm call and
/// within a few ulps in absolute terms.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// GELU, tanh form.
pub fn gelu(x: &DenseArray) -> DenseArray {
    x.map(|v| 0.5 * v * (1.0 + fast_tanh(GELU_C * (v + 0.044715 * v * v * v)))).round()
}

pub(crate) fn gelu_derivative(v: f64) -> f64 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let th = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
    0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &DenseArray, axes: &[usize]) -> Result<DenseArray> {
    let r = x.rank();
    let mut seen = [false; MAX_RANK];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return dim_err(format!("invalid permutation {axes:?} for rank {r}"));
    }
    let in_shape = pad4(x.shape());
    let in_strides = strides4(&in_shape);
    let off = MAX_RANK - r;
    let mut out_shape = [1usize; MAX_RANK];
    let mut src_strides = [0usize; MAX_RANK];
    for (i, &a) in axes.iter().enumerate() {
        out_shape[off + i] = in_shape[off + a];
        src_strides[off + i] = in_strides[off + a];
    }
    let mut out = Vec::with_capacity(x.len());
    let data = x.data();
    for i0 in 0..out_shape[0] {
        for i1 in 0..out_shape[1] {
            for i2 in 0..out_shape[2] {
                let base = i0 * src_strides[0] + i1 * src_strides[1] + i2 * src_strides[2];
                for i3 in 0..out_shape[3] {
                    out.push(data[base + i3 * src_strides[3]]);
                }
            }
        }
    }
    DenseArray::new(&out_shape[off..], out)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn pad4(shape: &[usize]) -> [usize; MAX_RANK] {
    let mut s = [1; MAX_RANK];
    s[MAX_RANK - shape.len()..].copy_from_slice(shape);
    s
}

fn strides4(shape: &[usize; MAX_RANK]) -> [usize; MAX_RANK] {
    let mut st = [1; MAX_RANK];
    for i in (0..MAX_RANK - 1).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return dim_err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    check_shape(&out)?;
    Ok(out)
}

/// Strides of `src` when read at the indices of `out` (0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize; MAX_RANK]) -> [usize; MAX_RANK] {
    let s = pad4(src);
    let st = strides4(&s);
    let mut r = [0; MAX_RANK];
    for i in 0..MAX_RANK {
        r[i] = if s[i] == out[i] { st[i] } else { 0 };
    }
    r
}

/// Elementwise binary op with broadcasting.
pub(crate) fn broadcast_binary(a: &DenseArray, b: &DenseArray, f: impl Fn(f64, f64) -> f64) -> Result<DenseArray> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(DenseArray::new(a.shape(), data)?.round());
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    // Common case: one operand is a trailing block of the other, e.g. a bias.
    if shape == a.shape() && a.shape().ends_with(b.shape()) {
        let data = a.data().chunks(b.len()).flat_map(|ch| ch.iter().zip(b.data()).map(|(&x, &y)| f(x, y))).collect();
        return Ok(DenseArray::new(&shape, data)?.round());
    }
    if shape == b.shape() && b.shape().ends_with(a.shape()) {
        let data = b.data().chunks(a.len()).flat_map(|ch| a.data().iter().zip(ch).map(|(&x, &y)| f(x, y))).collect();
        return Ok(DenseArray::new(&shape, data)?.round());
    }
    let o = pad4(&shape);
    let sa = broadcast_strides(a.shape(), &o);
    let sb = broadcast_strides(b.shape(), &o);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(o.iter().product());
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o[3] {
                    out.push(f(ad[ba + i3 * sa[3]], bd[bb + i3 * sb[3]]));
                }
            }
        }
    }
    Ok(DenseArray::new(&shape, out)?.round())
}

/// Sums `grad` (shaped like a broadcast result) back down to `target`.
pub(crate) fn reduce_to_shape(grad: &DenseArray, target: &[usize]) -> DenseArray {
    if grad.shape() == target {
        return grad.clone();
    }
    if grad.shape().ends_with(target) {
        let n: usize = target.iter().product();
        let mut out = vec![0.0; n];
        for ch in grad.data().chunks(n) {
            out.iter_mut().zip(ch).for_each(|(o, g)| *o += g);
        }
        return DenseArray::new(target, out).expect("target shape valid").round();
    }
    let o = pad4(grad.shape());
    let st = broadcast_strides(target, &o);
    let mut out = vec![0.0; target.iter().product()];
    let gd = grad.data();
    let mut g = 0;
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..o[3] {
                    out[base + i3 * st[3]] += gd[g];
                    g += 1;
                }
            }
        }
    }
    DenseArray::new(target, out).expect("target shape valid").round()
}
