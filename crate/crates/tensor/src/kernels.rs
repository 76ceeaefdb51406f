//! Dense kernels shared by the forward and backward passes.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::Real;

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// `a` is stored `[k, m]` when `ta` is set, otherwise `[m, k]`; likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    if m == 1 {
        // Single output row: the packed kernel wastes most of its tile here.
        row_times_matrix(tb, k, n, &a[..k], b, &mut c[..n], accumulate);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every strided access.
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

/// `c[1, n] (+)= a[1, k] * op(b)`, where `op(b)` is `b[k, n]` or `b[n, k]^T`.
fn row_times_matrix<T: Real>(tb: bool, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    if tb {
        for (cj, row) in c.iter_mut().zip(b.chunks(k)) {
            let mut acc = [T::zero(); 8];
            let (ah, at) = a.split_at(k - k % 8);
            let (rh, rt) = row.split_at(k - k % 8);
            for (xa, xr) in ah.chunks_exact(8).zip(rh.chunks_exact(8)) {
                for l in 0..8 {
                    acc[l] = acc[l] + xa[l] * xr[l];
                }
            }
            let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
            for (&x, &y) in at.iter().zip(rt) {
                s = s + x * y;
            }
            *cj = *cj + s;
        }
    } else {
        for (&ap, row) in a.iter().zip(b.chunks(n)) {
            for (cj, &y) in c.iter_mut().zip(row) {
                *cj = *cj + ap * y;
            }
        }
    }
}

/// Geometry of a square-kernel 2D convolution on a single `[C, H, W]` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output positions `[o0, o1)` whose tap `kx` lands inside `0..size`.
    fn valid_range(&self, kx: usize, size: usize, out: usize) -> (usize, usize) {
        // o * stride + kx - pad in [0, size)
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi_excl = (size + self.pad).saturating_sub(kx);
        let hi = hi_excl.div_ceil(self.stride).min(out);
        (lo.min(hi), hi)
    }
}

thread_local! {
    static SCRATCH: RefCell<HashMap<TypeId, Box<dyn Any>>> = RefCell::new(HashMap::new());
}

/// Runs `f` on a reusable thread-local buffer of `len` elements (zeroed when
/// `zero` is set). Large im2col matrices would otherwise be freshly mapped
/// and faulted in on every call.
pub(crate) fn with_scratch<T: Real, R>(len: usize, zero: bool, f: impl FnOnce(&mut [T]) -> R) -> R {
    let mut buf: Vec<T> = SCRATCH
        .with(|s| s.borrow_mut().remove(&TypeId::of::<T>()))
        .and_then(|b| b.downcast::<Vec<T>>().ok())
        .map(|b| *b)
        .unwrap_or_default();
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    if zero {
        buf[..len].iter_mut().for_each(|v| *v = T::zero());
    }
    let r = f(&mut buf[..len]);
    SCRATCH.with(|s| s.borrow_mut().insert(TypeId::of::<T>(), Box::new(buf)));
    r
}

#[cfg(test)]
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.rows() * g.cols()];
    im2col_into(x, g, &mut out);
    out
}

/// [`im2col`] into a zeroed buffer.
pub(crate) fn im2col_into<T: Real>(x: &[T], g: &ConvGeom, out: &mut [T]) {
    let k = g.kernel;
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                let (x0, x1) = g.valid_range(kx, g.width, g.out_w);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || x0 >= x1 {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let start = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst_row[x0..x1].copy_from_slice(&src_row[start..start + (x1 - x0)]);
                    } else {
                        for (i, d) in dst_row[x0..x1].iter_mut().enumerate() {
                            *d = src_row[start + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a zeroed `[C, H, W]` buffer.
#[cfg(test)]
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    col2im_add(cols, g, &mut out);
    out
}

/// Accumulating form of [`col2im`].
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let k = g.kernel;
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (x0, x1) = g.valid_range(kx, g.width, g.out_w);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || x0 >= x1 {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * g.out_w + x0..oy * g.out_w + x1];
                    let start = x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst_row[start..start + (x1 - x0)].iter_mut().zip(src_row) {
                            *d = *d + v;
                        }
                    } else {
                        for (i, &v) in src_row.iter().enumerate() {
                            let d = &mut dst_row[start + i * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear sampling table with half-pixel centres and clamped edges.
pub(crate) fn bilinear_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Visits every output element of a broadcast binary op with the flat
/// offsets into both operands.
pub(crate) fn broadcast_for_each(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let nd = out.len();
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d + off] = if shape[d] == 1 && out[d + off] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// `(outer, dim, inner)` split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 4, 5], &[3, 1, 1]), Some(vec![3, 4, 5]));
        assert_eq!(broadcast_shape(&[4, 5], &[1]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3, 4], &[4, 3]), None);
    }

    #[test]
    fn broadcast_offsets_follow_channel_bias() {
        let mut seen = Vec::new();
        broadcast_for_each(&[2, 2, 2], &[2, 2, 2], &[2, 1, 1], |o, a, b| seen.push((o, a, b)));
        let bias: Vec<usize> = seen.iter().map(|t| t.2).collect();
        assert_eq!(bias, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 6,
            kernel: 3,
            stride: 2,
            pad: 1,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f64> = (0..60).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 2, &a, &b, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, &a, &b, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, &a, &b, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
