//! Plain-slice kernels shared by the autodiff graph and the non-differentiable paths.

use super::Scalar;

/// Guard added to every norm/range denominator.
pub const EPS_NORM: f64 = 1e-8;

/// `c (m×n) = op(a) · op(b) + beta·c` for row-major contiguous matrices.
///
/// `op(a)` is `m×k`; with `trans_a` the storage of `a` is `k×m`. Same for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: out too short");
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Geometry of a 2D convolution over an `[H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    pub fn output_dim(&self, input: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (input + 2 * self.pad).saturating_sub(span) / self.stride + 1
    }
}

/// Unfolds `[h, w, c]` into `[ho*wo, k*k*c]` patches ordered `(ky, kx, c)`.
pub fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, g: ConvGeometry) -> Vec<T> {
    let ho = g.output_dim(h);
    let wo = g.output_dim(w);
    let k = g.kernel;
    let cols = k * k * c;
    let mut out = vec![T::zero(); ho * wo * cols];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut out[(oy * wo + ox) * cols..(oy * wo + ox + 1) * cols];
            for ky in 0..k {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `[h, w, c]`.
pub fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, g: ConvGeometry) -> Vec<T> {
    let ho = g.output_dim(h);
    let wo = g.output_dim(w);
    let k = g.kernel;
    let width = k * k * c;
    let mut out = vec![T::zero(); h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * width..(oy * wo + ox + 1) * width];
            for ky in 0..k {
                let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * c;
                    let src = (ky * k + kx) * c;
                    for ch in 0..c {
                        out[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    out
}

/// One output coordinate of a bilinear resize (half-pixel centres, edge clamped).
#[derive(Clone, Copy, Debug)]
pub struct LerpTap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

pub fn bilinear_taps<T: Scalar>(input: usize, output: usize) -> Vec<LerpTap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            LerpTap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

/// Bilinear resize of `[h, w, c]` to `[oh, ow, c]`.
pub fn resize_bilinear<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, rx) in tx.iter().enumerate() {
            let weights = [
                (ry.lo, rx.lo, (T::one() - ry.frac) * (T::one() - rx.frac)),
                (ry.lo, rx.hi, (T::one() - ry.frac) * rx.frac),
                (ry.hi, rx.lo, ry.frac * (T::one() - rx.frac)),
                (ry.hi, rx.hi, ry.frac * rx.frac),
            ];
            let dst = (oy * ow + ox) * c;
            for (iy, ix, wgt) in weights {
                let src = (iy * w + ix) * c;
                for ch in 0..c {
                    out[dst + ch] += wgt * x[src + ch];
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_adjoint<T: Scalar>(
    grad: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, oh);
    let tx = bilinear_taps::<T>(w, ow);
    let mut out = vec![T::zero(); h * w * c];
    for (oy, ry) in ty.iter().enumerate() {
        for (ox, rx) in tx.iter().enumerate() {
            let weights = [
                (ry.lo, rx.lo, (T::one() - ry.frac) * (T::one() - rx.frac)),
                (ry.lo, rx.hi, (T::one() - ry.frac) * rx.frac),
                (ry.hi, rx.lo, ry.frac * (T::one() - rx.frac)),
                (ry.hi, rx.hi, ry.frac * rx.frac),
            ];
            let src = (oy * ow + ox) * c;
            for (iy, ix, wgt) in weights {
                let dst = (iy * w + ix) * c;
                for ch in 0..c {
                    out[dst + ch] += wgt * grad[src + ch];
                }
            }
        }
    }
    out
}

pub fn row_norms<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| {
            x[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| *v * *v)
                .sum::<T>()
                .sqrt()
        })
        .collect()
}

/// `out[i, j] = <a_i, b_j> / (|a_i| |b_j| + eps)` for `a: m×c`, `b: n×c`.
pub fn cosine_matrix<T: Scalar>(a: &[T], m: usize, b: &[T], n: usize, c: usize) -> Vec<T> {
    let mut dots = vec![T::zero(); m * n];
    gemm(m, c, n, a, false, b, true, T::zero(), &mut dots);
    let na = row_norms(a, m, c);
    let nb = row_norms(b, n, c);
    let eps = T::lit(EPS_NORM);
    for i in 0..m {
        for j in 0..n {
            dots[i * n + j] /= na[i] * nb[j] + eps;
        }
    }
    dots
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| argmax(&x[r * cols..(r + 1) * cols]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_output_dims() {
        assert_eq!(ConvGeometry::new(3, 1, 1, 1).output_dim(16), 16);
        assert_eq!(ConvGeometry::new(3, 2, 1, 1).output_dim(64), 32);
        assert_eq!(ConvGeometry::new(3, 1, 2, 2).output_dim(16), 16);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::new(3, 2, 1, 1);
        let (h, w, c) = (5, 4, 2);
        let x: Vec<f64> = (0..h * w * c).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, h, w, c, g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, h, w, c, g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let y = resize_bilinear(&x, 3, 4, 1, 3, 4);
        assert_eq!(x, y);
    }

    #[test]
    fn resize_adjoint_matches() {
        let (h, w, c, oh, ow) = (3, 5, 2, 7, 4);
        let x: Vec<f64> = (0..h * w * c).map(|i| (i as f64).sin()).collect();
        let g: Vec<f64> = (0..oh * ow * c).map(|i| (i as f64 * 0.3).cos()).collect();
        let y = resize_bilinear(&x, h, w, c, oh, ow);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = resize_bilinear_adjoint(&g, h, w, c, oh, ow);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5f64, 0.9, 0.9, 0.1]), 1);
        assert_eq!(argmax(&[0.0f64, 0.0]), 0);
    }
}
