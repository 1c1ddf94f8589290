//! Raw buffer kernels shared by the forward and backward passes.

/// `c = A·B` (or `c += A·B` when `accumulate`), with `A` logically `m×k` and
/// `B` logically `k×n`. `trans_a` means `a` is stored as `k×m`; `trans_b`
/// means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
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
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 kernel, unit stride, no padding: the unfolded input is the input.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in
/// `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> std::ops::Range<usize> {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let hi = if g.w + g.pad > kx { ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.wo) } else { 0 };
    lo..hi.max(lo)
}

/// Unfolds `x[cin×h×w]` into `[(cin·kh·kw) × (ho·wo)]` with zero padding.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let mut out = vec![0.0; g.rows() * g.cols()];
    let ncols = g.cols();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * ncols..(row + 1) * ncols];
                let span = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    let d = &mut dst[oy * g.wo..][..g.wo];
                    let first = span.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        d[span.clone()].copy_from_slice(&src[first..first + span.len()]);
                    } else {
                        for (o, ox) in span.clone().enumerate() {
                            d[ox] = src[first + o * g.stride];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let ncols = g.cols();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let span = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    let s = &src[oy * g.wo..][..g.wo];
                    let first = span.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[first..first + span.len()].iter_mut().zip(&s[span.clone()]).for_each(|(d, v)| *d += v);
                    } else {
                        for (o, ox) in span.clone().enumerate() {
                            dst[first + o * g.stride] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_all_transpose_combinations() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, if ta { &at } else { &a }, ta, if tb { &bt } else { &b }, tb, &mut c, false);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5);
            }
        }
        let mut c = want.clone();
        gemm(m, k, n, &a, false, &b, false, &mut c, true);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y.
        let g = ConvGeom { cin: 2, h: 5, w: 4, kh: 3, kw: 2, stride: 2, pad: 1, ho: 3, wo: 3 };
        let x: Vec<f32> = (0..2 * 5 * 4).map(|i| (i as f32 * 0.3).sin()).collect();
        let y: Vec<f32> = (0..g.rows() * g.cols()).map(|i| (i as f32 * 0.7).cos()).collect();
        let lhs: f32 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut dx);
        let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    fn geom(cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> ConvGeom {
        let (ho, wo) = ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1);
        ConvGeom { cin, h, w, kh, kw, stride, pad, ho, wo }
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for g in [geom(2, 5, 4, 3, 2, 2, 1), geom(1, 8, 8, 4, 4, 4, 0), geom(3, 6, 7, 3, 3, 1, 1), geom(1, 3, 3, 3, 3, 1, 2), geom(2, 4, 4, 2, 2, 2, 0)] {
            let x: Vec<f32> = (0..g.cin * g.h * g.w).map(|i| i as f32 + 1.0).collect();
            let cols = im2col(&x, &g);
            for c in 0..g.cin {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        for oy in 0..g.ho {
                            for ox in 0..g.wo {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                let inside = (0..g.h as isize).contains(&iy) && (0..g.w as isize).contains(&ix);
                                let want = if inside { x[(c * g.h + iy as usize) * g.w + ix as usize] } else { 0.0 };
                                let row = (c * g.kh + ky) * g.kw + kx;
                                assert_eq!(cols[row * g.cols() + oy * g.wo + ox], want, "{g:?}");
                            }
                        }
                    }
                }
            }
            let y: Vec<f32> = (0..cols.len()).map(|i| (i as f32 * 0.7).cos()).collect();
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
            let mut dx = vec![0.0; x.len()];
            col2im_add(&y, &g, &mut dx);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "{g:?}: {lhs} vs {rhs}");
        }
    }
}
