//! Dense kernels shared by the conv and dense ops.
//!
//! All three matmul variants accumulate into `c` so backward passes can reuse
//! them without a temporary. Loop order keeps the innermost walk contiguous
//! in both the `b` row and the `c` row.

use crate::scalar::Element;

/// `c += a @ b` with `a: m x k`, `b: k x n`, `c: m x n`, all row-major.
pub fn matmul_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// `c += a @ b^T` with `a: m x k`, `b: n x k`, `c: m x n`.
pub fn matmul_transb_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: E = arow.iter().zip(brow).map(|(&av, &bv)| av * bv).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c += a^T @ b` with `a: k x m`, `b: k x n`, `c: m x n`.
pub fn matmul_transa_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Unpacks one image `(c, h, w)` into a `c*kh*kw x oh*ow` patch matrix.
/// Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Element>(
    image: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(image.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let spatial = oh * ow;
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ch * kh + ki) * kw + kj) * spatial
                    ..((ch * kh + ki) * kw + kj + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad_top as isize;
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in out_row.iter_mut() {
                            *v = E::ZERO;
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad_left as isize;
                        out_row[ox] = if ix < 0 || ix >= w as isize {
                            E::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto the image gradient.
/// Inverse of [`im2col`] up to overlap summation.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
    image: &mut [E],
) {
    debug_assert_eq!(image.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let spatial = oh * ow;
    for ch in 0..c {
        let plane = &mut image[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ch * kh + ki) * kw + kj) * spatial
                    ..((ch * kh + ki) * kw + kj + 1) * spatial];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad_top as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad_left as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_by_hand() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a = [1.0f32, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0f32, 1.0, 0.0, -1.0, 1.5, 2.5]; // 3x2
        let mut c = [0.0f32; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);

        // a @ b == a @ (b^T)^T
        let bt = [2.0f32, 0.0, 1.5, 1.0, -1.0, 2.5]; // 2x3
        let mut c2 = [0.0f32; 4];
        matmul_transb_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);

        // a @ b == (a^T)^T @ b
        let at = [1.0f32, 3.0, -2.0, 4.0, 0.5, -1.0]; // 3x2
        let mut c3 = [0.0f32; 4];
        matmul_transa_acc(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn im2col_col2im_adjoint_dot_product() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish x, y.
        let (c, h, w, k, stride) = (2usize, 4usize, 4usize, 3usize, 1usize);
        let (oh, ow, pt, pl) = (4usize, 4usize, 1usize, 1usize);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * oh * ow)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0f64; y.len()];
        im2col(&x, c, h, w, k, k, stride, pt, pl, oh, ow, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0f64; x.len()];
        col2im_acc(&y, c, h, w, k, k, stride, pt, pl, oh, ow, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
