use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// The lowest `k×k` orthonormal 2D DCT-II basis functions over an `H×W` grid.
///
/// Component `l = u * k + v` is `α(u) α(v) cos(π(2y+1)u / 2H) cos(π(2x+1)v / 2W)`
/// with `α(0) = √(1/N)` and `α(n>0) = √(2/N)`.
#[derive(Clone, Debug)]
pub struct DctBasis<T> {
    height: usize,
    width: usize,
    side: usize,
    basis: Vec<T>,
}

fn alpha(freq: usize, n: usize) -> f64 {
    if freq == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

impl<T: Scalar> DctBasis<T> {
    pub fn new(height: usize, width: usize, side: usize) -> Result<Self> {
        if side == 0 || side > height || side > width {
            return Err(Error::InvalidArgument(format!(
                "DCT side {side} must be in 1..=min({height}, {width})"
            )));
        }
        let mut basis = Vec::with_capacity(side * side * height * width);
        for u in 0..side {
            for v in 0..side {
                for y in 0..height {
                    let cy = (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64
                        / (2 * height) as f64)
                        .cos();
                    for x in 0..width {
                        let cx = (std::f64::consts::PI * (2 * x + 1) as f64 * v as f64
                            / (2 * width) as f64)
                            .cos();
                        basis.push(T::lit(alpha(u, height) * alpha(v, width) * cy * cx));
                    }
                }
            }
        }
        Ok(Self {
            height,
            width,
            side,
            basis,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_components(&self) -> usize {
        self.side * self.side
    }

    /// Basis function `l` as an `H*W` slice (row-major pixels).
    pub fn component(&self, l: usize) -> &[T] {
        let hw = self.height * self.width;
        &self.basis[l * hw..(l + 1) * hw]
    }

    /// Value of the DC component at any pixel: `1/√(HW)`.
    pub fn dc_scale(&self) -> T {
        T::lit(1.0 / ((self.height * self.width) as f64).sqrt())
    }

    /// `out[l] = Σ_p basis[l, p] · features[p, :]` for `features: [H, W, C]`.
    pub fn project(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w, c] = *features.shape() else {
            return Err(Error::shape("dct_project", format!("expected [H, W, C], got {:?}", features.shape())));
        };
        if h != self.height || w != self.width {
            return Err(Error::shape(
                "dct_project",
                format!("basis is {}x{}, features {h}x{w}", self.height, self.width),
            ));
        }
        let l = self.num_components();
        let mut out = vec![T::zero(); l * c];
        super::kernels::gemm(l, h * w, c, &self.basis, false, features.data(), false, T::zero(), &mut out);
        Ok(Tensor::from_parts(vec![l, c], out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_is_orthonormal() {
        let basis = DctBasis::<f64>::new(16, 16, 7).unwrap();
        let n = basis.num_components();
        assert_eq!(n, 49);
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = basis
                    .component(a)
                    .iter()
                    .zip(basis.component(b))
                    .map(|(x, y)| x * y)
                    .sum();
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-6, "<{a},{b}> = {dot}");
            }
        }
    }

    #[test]
    fn constant_map_only_excites_dc() {
        let (h, w, c) = (8, 8, 3);
        let basis = DctBasis::<f64>::new(h, w, 4).unwrap();
        let feats = Tensor::full(vec![h, w, c], 2.5);
        let out = basis.project(&feats).unwrap();
        // Direct sum: Σ_p c · 1/√(HW) = c · √(HW).
        let dc = 2.5 * basis.dc_scale() * (h * w) as f64;
        for ch in 0..c {
            assert!((out.row(0)[ch] - dc).abs() < 1e-9);
        }
        for l in 1..basis.num_components() {
            assert!(out.row(l).iter().all(|v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn impulse_reads_basis_at_pixel() {
        let (h, w) = (6, 5);
        let basis = DctBasis::<f64>::new(h, w, 3).unwrap();
        let mut feats = Tensor::zeros(vec![h, w, 1]);
        let pixel = 2 * w + 3;
        feats.data_mut()[pixel] = 1.0;
        let out = basis.project(&feats).unwrap();
        for l in 0..basis.num_components() {
            // Unrolled definition at (y=2, x=3).
            let (u, v) = (l / 3, l % 3);
            let expected = alpha(u, h)
                * alpha(v, w)
                * (std::f64::consts::PI * 5.0 * u as f64 / 12.0).cos()
                * (std::f64::consts::PI * 7.0 * v as f64 / 10.0).cos();
            assert!((out.row(l)[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_map_projects_to_zero() {
        let basis = DctBasis::<f64>::new(4, 4, 2).unwrap();
        let out = basis.project(&Tensor::zeros(vec![4, 4, 2])).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_mismatched_grid() {
        let basis = DctBasis::<f64>::new(4, 4, 2).unwrap();
        assert!(basis.project(&Tensor::zeros(vec![5, 4, 2])).is_err());
    }
}
