//! Slice-level numeric kernels shared by the forward, tangent and adjoint rules.

use crate::element::Element;
use crate::tensor::numel;

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `ta`), `b` is stored `[k, n]`
/// (or `[n, k]` when `tb`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
    }
}

/// Geometry of a (possibly batched) matrix product `[.., m, k] x [.., k, n]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single matrix reused for every batch entry.
    pub shared_rhs: bool,
}

/// `out = a * op(b)`, batched.
pub(crate) fn matmul_forward<T: Element>(d: MatMulDims, a: &[T], b: &[T], tb: bool, out: &mut [T], beta: T) {
    if d.shared_rhs {
        gemm(d.batch * d.m, d.k, d.n, a, false, b, tb, out, beta);
        return;
    }
    let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
    for i in 0..d.batch {
        gemm(
            d.m,
            d.k,
            d.n,
            &a[i * sa..(i + 1) * sa],
            false,
            &b[i * sb..(i + 1) * sb],
            tb,
            &mut out[i * so..(i + 1) * so],
            beta,
        );
    }
}

/// Adjoint of `a` for `out = a * op(b)` given `g = d out`.
pub(crate) fn matmul_grad_lhs<T: Element>(d: MatMulDims, g: &[T], b: &[T], tb: bool, da: &mut [T]) {
    // da = g * op(b)^T; op(b)^T has storage `b` read with flipped transpose flag.
    if d.shared_rhs {
        gemm(d.batch * d.m, d.n, d.k, g, false, b, !tb, da, T::one());
        return;
    }
    let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
    for i in 0..d.batch {
        gemm(
            d.m,
            d.n,
            d.k,
            &g[i * so..(i + 1) * so],
            false,
            &b[i * sb..(i + 1) * sb],
            !tb,
            &mut da[i * sa..(i + 1) * sa],
            T::one(),
        );
    }
}

/// Adjoint of `b` (in its storage layout) for `out = a * op(b)`.
pub(crate) fn matmul_grad_rhs<T: Element>(d: MatMulDims, a: &[T], g: &[T], tb: bool, db: &mut [T]) {
    let rows = if d.shared_rhs { d.batch * d.m } else { d.m };
    let blocks = if d.shared_rhs { 1 } else { d.batch };
    let (sa, sb, so) = (rows * d.k, d.k * d.n, rows * d.n);
    for i in 0..blocks {
        let (ai, gi) = (&a[i * sa..(i + 1) * sa], &g[i * so..(i + 1) * so]);
        let dbi = &mut db[i * sb..(i + 1) * sb];
        if tb {
            // db [n, k] = g^T a
            gemm(d.n, rows, d.k, gi, true, ai, false, dbi, T::one());
        } else {
            // db [k, n] = a^T g
            gemm(d.k, rows, d.n, ai, true, gi, false, dbi, T::one());
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style right-aligned broadcast of `src` (shape `from`) to shape `to`.
pub(crate) fn broadcast<T: Element>(src: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let offset = to.len() - from.len();
    let src_strides = strides(from);
    let mut eff = vec![0usize; to.len()];
    for (i, &extent) in from.iter().enumerate() {
        eff[offset + i] = if extent == 1 { 0 } else { src_strides[i] };
    }
    let total = numel(to);
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let inner = *to.last().unwrap_or(&1);
    let inner_stride = *eff.last().unwrap_or(&0);
    let outer_shape = &to[..to.len().saturating_sub(1)];
    let mut idx = vec![0usize; outer_shape.len()];
    loop {
        let base: usize = idx.iter().zip(&eff).map(|(i, s)| i * s).sum();
        if to.is_empty() {
            out.push(src[0]);
            break;
        }
        if inner_stride == 0 {
            out.extend(std::iter::repeat_n(src[base], inner));
        } else {
            out.extend_from_slice(&src[base..base + inner]);
        }
        // advance the outer multi-index
        let mut axis = outer_shape.len();
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < outer_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    out
}

/// Sum `g` (shape `to`) back down to the pre-broadcast shape `from`.
pub(crate) fn reduce_broadcast<T: Element>(g: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let offset = to.len() - from.len();
    let src_strides = strides(from);
    let mut eff = vec![0usize; to.len()];
    for (i, &extent) in from.iter().enumerate() {
        eff[offset + i] = if extent == 1 { 0 } else { src_strides[i] };
    }
    let mut out = vec![T::zero(); numel(from)];
    let to_strides = strides(to);
    for (flat, &v) in g.iter().enumerate() {
        let mut rem = flat;
        let mut dst = 0;
        for axis in 0..to.len() {
            let i = rem / to_strides[axis];
            rem %= to_strides[axis];
            dst += i * eff[axis];
        }
        out[dst] = out[dst] + v;
    }
    out
}

/// `out[i_0..] = src[i_perm..]`: output axis `j` is input axis `perm[j]`.
pub(crate) fn permute<T: Element>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out, out_shape);
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        out.push(src[pos]);
        let mut axis = rank;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            pos += mapped[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            pos -= mapped[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Split a shape around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Copy `len` entries starting at `start` along `axis`.
pub(crate) fn slice_axis<T: Element>(src: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, extent, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    out
}

/// Accumulate `src` (the slice) into `dst` at `start` along `axis`.
pub(crate) fn unslice_axis_add<T: Element>(
    dst: &mut [T],
    dst_shape: &[usize],
    axis: usize,
    start: usize,
    src: &[T],
    len: usize,
) {
    let (outer, extent, inner) = axis_split(dst_shape, axis);
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        let s = &src[o * len * inner..(o + 1) * len * inner];
        for (d, &v) in dst[base..base + len * inner].iter_mut().zip(s) {
            *d = *d + v;
        }
    }
}

/// Softmax over the last axis, rows of width `w`.
pub(crate) fn softmax_rows<T: Element>(x: &[T], w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(w) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / total;
        }
    }
    out
}

/// Tangent/adjoint rule shared by softmax: `y * (u - <y, u>)` per row.
/// The softmax Jacobian is symmetric, so the same map serves both modes.
pub(crate) fn softmax_jacobian_apply<T: Element>(y: &[T], u: &[T], w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, ur) in y.chunks_exact(w).zip(u.chunks_exact(w)) {
        let dot: T = yr.iter().zip(ur).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(ur).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

/// Per-row `1 / sqrt(mean(x^2) + eps)`.
pub(crate) fn inv_rms_rows<T: Element>(x: &[T], w: usize, eps: T) -> Vec<T> {
    let wn = T::from_f64(w as f64);
    x.chunks_exact(w)
        .map(|row| {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / wn;
            T::one() / (ms + eps).sqrt()
        })
        .collect()
}

/// Jacobian of `x / rms(x)` applied to `u`: `u * s - x * s^3 * mean(x * u)`.
/// Symmetric, so it doubles as the adjoint rule.
pub(crate) fn rms_jacobian_apply<T: Element>(x: &[T], inv: &[T], u: &[T], w: usize) -> Vec<T> {
    let wn = T::from_f64(w as f64);
    let mut out = Vec::with_capacity(x.len());
    for ((xr, ur), &s) in x.chunks_exact(w).zip(u.chunks_exact(w)).zip(inv) {
        let m = xr.iter().zip(ur).map(|(&a, &b)| a * b).sum::<T>() / wn;
        let s3 = s * s * s;
        out.extend(xr.iter().zip(ur).map(|(&a, &b)| b * s - a * s3 * m));
    }
    out
}

/// Token-axis 1-D convolution geometry: input `[batch, len, c_in]`,
/// kernel `[taps, c_in, c_out]` with symmetric zero padding `taps / 2`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub len: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub taps: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        self.taps / 2
    }

    /// Taps that can touch at least one in-range input position; contiguous.
    pub(crate) fn live_taps(&self) -> std::ops::Range<usize> {
        let pad = self.pad();
        let lo = pad.saturating_sub(self.len - 1);
        let hi = (pad + self.len).min(self.taps);
        lo..hi
    }
}

/// Unfold `x` into `[batch * len, live_taps * c_in]` with zero padding.
pub(crate) fn im2col<T: Element>(d: ConvDims, x: &[T]) -> Vec<T> {
    let taps = d.live_taps();
    let nt = taps.len();
    let pad = d.pad() as isize;
    let mut col = vec![T::zero(); d.batch * d.len * nt * d.c_in];
    for b in 0..d.batch {
        for l in 0..d.len {
            let row = (b * d.len + l) * nt * d.c_in;
            for (ti, j) in taps.clone().enumerate() {
                let src = l as isize + j as isize - pad;
                if src < 0 || src >= d.len as isize {
                    continue;
                }
                let s = (b * d.len + src as usize) * d.c_in;
                col[row + ti * d.c_in..row + (ti + 1) * d.c_in].copy_from_slice(&x[s..s + d.c_in]);
            }
        }
    }
    col
}

/// Scatter-add the unfolded adjoint back onto the input layout.
pub(crate) fn col2im_add<T: Element>(d: ConvDims, col: &[T], dx: &mut [T]) {
    let taps = d.live_taps();
    let nt = taps.len();
    let pad = d.pad() as isize;
    for b in 0..d.batch {
        for l in 0..d.len {
            let row = (b * d.len + l) * nt * d.c_in;
            for (ti, j) in taps.clone().enumerate() {
                let src = l as isize + j as isize - pad;
                if src < 0 || src >= d.len as isize {
                    continue;
                }
                let s = (b * d.len + src as usize) * d.c_in;
                for (dst, &v) in dx[s..s + d.c_in]
                    .iter_mut()
                    .zip(&col[row + ti * d.c_in..row + (ti + 1) * d.c_in])
                {
                    *dst = *dst + v;
                }
            }
        }
    }
}

/// `out = conv(x, w)` accumulated with factor `beta` on the prior contents.
pub(crate) fn conv1d_forward<T: Element>(d: ConvDims, x: &[T], w: &[T], out: &mut [T], beta: T) {
    let taps = d.live_taps();
    let col = im2col(d, x);
    let w_live = &w[taps.start * d.c_in * d.c_out..taps.end * d.c_in * d.c_out];
    gemm(d.batch * d.len, taps.len() * d.c_in, d.c_out, &col, false, w_live, false, out, beta);
}

pub(crate) fn conv1d_grad_input<T: Element>(d: ConvDims, g: &[T], w: &[T], dx: &mut [T]) {
    let taps = d.live_taps();
    let kk = taps.len() * d.c_in;
    let w_live = &w[taps.start * d.c_in * d.c_out..taps.end * d.c_in * d.c_out];
    let mut dcol = vec![T::zero(); d.batch * d.len * kk];
    gemm(d.batch * d.len, d.c_out, kk, g, false, w_live, true, &mut dcol, T::zero());
    col2im_add(d, &dcol, dx);
}

pub(crate) fn conv1d_grad_kernel<T: Element>(d: ConvDims, x: &[T], g: &[T], dw: &mut [T]) {
    let taps = d.live_taps();
    let kk = taps.len() * d.c_in;
    let col = im2col(d, x);
    let dw_live = &mut dw[taps.start * d.c_in * d.c_out..taps.end * d.c_in * d.c_out];
    gemm(kk, d.batch * d.len, d.c_out, &col, true, g, false, dw_live, T::one());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint_shapes() {
        let src = [1.0f64, 2.0, 3.0];
        let out = broadcast(&src, &[1, 3], &[2, 2, 3]);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let back = reduce_broadcast(&out, &[1, 3], &[2, 2, 3]);
        assert_eq!(back, vec![4.0, 8.0, 12.0]);
        let col = broadcast(&[1.0f64, 2.0], &[2, 1], &[2, 3]);
        assert_eq!(col, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(broadcast(&[7.0f64], &[], &[2]), vec![7.0, 7.0]);
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let src: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let (out, shape) = permute(&src, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let src: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let perm = [2, 0, 1];
        let (out, shape) = permute(&src, &[2, 3, 4], &perm);
        let (back, back_shape) = permute(&out, &shape, &inverse_permutation(&perm));
        assert_eq!(back_shape, vec![2, 3, 4]);
        assert_eq!(back, src);
    }

    #[test]
    fn live_taps_drop_pure_padding() {
        let d = ConvDims { batch: 1, len: 1, c_in: 1, c_out: 1, taps: 3 };
        assert_eq!(d.live_taps(), 1..2);
        let d = ConvDims { len: 2, ..d };
        assert_eq!(d.live_taps(), 0..3);
    }
}
