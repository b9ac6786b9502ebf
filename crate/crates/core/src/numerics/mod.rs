//! Tensor substrate: dense tensors, reverse-mode autodiff, and the shared
//! similarity / normalisation / frequency primitives.

mod dct;
mod graph;
pub mod kernels;
mod scalar;
mod tensor;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dct::DctBasis;
pub use graph::{BackwardCtx, Gradients, Graph, Var};
pub use kernels::{ConvGeometry, EPS_NORM};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `out[h, w, n] = cos(F[h, w], P[n])` for `F: [H, W, C]`, `P: [N, C]`.
pub fn cosine_similarity_map<T: Scalar>(features: &Tensor<T>, protos: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w, c] = *features.shape() else {
        return Err(Error::shape("cosine_similarity_map", format!("features {:?}", features.shape())));
    };
    let [n, c2] = *protos.shape() else {
        return Err(Error::shape("cosine_similarity_map", format!("prototypes {:?}", protos.shape())));
    };
    if c != c2 || c == 0 {
        return Err(Error::shape("cosine_similarity_map", format!("channels {c} vs {c2}")));
    }
    let out = kernels::cosine_matrix(features.data(), h * w, protos.data(), n, c);
    Ok(Tensor::from_parts(vec![h, w, n], out))
}

/// Full `m×n` cosine matrix between the rows of `a: [m, C]` and `b: [n, C]`.
pub fn pairwise_cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, c) = a.as_matrix_dims();
    let (n, c2) = b.as_matrix_dims();
    if c != c2 || c == 0 {
        return Err(Error::shape("pairwise_cosine", format!("channels {c} vs {c2}")));
    }
    Ok(Tensor::from_parts(vec![m, n], kernels::cosine_matrix(a.data(), m, b.data(), n, c)))
}

/// `(m - min) / (max - min + ε)`.
pub fn minmax_normalize<T: Scalar>(values: &[T]) -> Vec<T> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    let denom = hi - lo + T::lit(EPS_NORM);
    values.iter().map(|v| (*v - lo) / denom).collect()
}

/// Outcome of [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// `(param index, flat index, finite difference, analytic)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients to central finite differences.
///
/// `build` receives one leaf per entry of `params` (all gradient-tracked) and returns
/// a scalar loss node. At most `max_coords` coordinates are probed, sampled with `seed`.
/// The reported error per coordinate is `|g_fd - g_an| / max(|g_fd|, |g_an|, 1e-8)`.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor<f64>],
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone().with_grad(true))).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss);
        if value.numel() != 1 {
            return Err(Error::shape("grad_check", "loss must be scalar"));
        }
        if !value.data()[0].is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok((g, vars, loss))
    };

    let (graph, vars, loss) = eval(params)?;
    let grads = graph.backward(loss)?;
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |c| (p, c)))
        .collect();
    let chosen: Vec<(usize, usize)> = match max_coords {
        Some(k) if k < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = index::sample(&mut rng, coords.len(), k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut work = params.to_vec();
    for &(p, c) in &chosen {
        let analytic = grads.get(vars[p]).map_or(0.0, |g| g.data()[c]);
        let base = work[p].data()[c];
        let mut at = |offset: f64| -> Result<f64> {
            work[p].data_mut()[c] = base + offset;
            let (g, _, l) = eval(&work)?;
            Ok(g.value(l).data()[0])
        };
        let fd = (at(step)? - at(-step)?) / (2.0 * step);
        work[p].data_mut()[c] = base;
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
        if worst_at.is_none() || rel > worst {
            worst = rel;
            worst_at = Some((p, c, fd, analytic));
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst,
        coordinates: chosen.len(),
        worst: worst_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let f = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let par = cosine_similarity_map(&f, &t2(1, 2, vec![2.0, 0.0])).unwrap();
        assert!((par.data()[0] - 1.0).abs() < 1e-6);
        let orth = cosine_similarity_map(&f, &t2(1, 2, vec![0.0, 3.0])).unwrap();
        assert_eq!(orth.data()[0], 0.0);
        let diag = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        let out = cosine_similarity_map(&diag, &t2(1, 2, vec![1.0, 0.0])).unwrap();
        assert!((out.data()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let f = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let out = cosine_similarity_map(&f, &t2(1, 2, vec![1.0, 0.0])).unwrap();
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn cosine_rejects_channel_mismatch() {
        let f = Tensor::<f64>::zeros(vec![2, 2, 3]);
        assert!(cosine_similarity_map(&f, &Tensor::zeros(vec![1, 2])).is_err());
        assert!(pairwise_cosine(&Tensor::<f64>::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn pairwise_examples() {
        let a = t2(1, 2, vec![1.0, 0.0]);
        let self_sim = pairwise_cosine(&a, &a).unwrap();
        assert!((self_sim.data()[0] - 1.0).abs() < 1e-6);
        let b = t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let out = pairwise_cosine(&a, &b).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert_eq!(out.data()[1], 0.0);
    }

    #[test]
    fn pairwise_matches_pixelwise_map() {
        let a = Tensor::from_fn(vec![3, 4], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3 + 0.1);
        let b = Tensor::from_fn(vec![3, 4], |i| ((i * 3 % 7) as f64 - 3.0) * 0.2);
        let full = pairwise_cosine(&a, &b).unwrap();
        let as_map = a.clone().reshape(vec![3, 1, 4]).unwrap();
        let per_pixel = cosine_similarity_map(&as_map, &b).unwrap();
        assert!(full.max_abs_diff(&per_pixel.reshape(vec![3, 3]).unwrap()) < 1e-12);
    }

    #[test]
    fn minmax_examples() {
        let out = minmax_normalize(&[2.0f64, 4.0, 6.0]);
        for (o, e) in out.iter().zip([0.0, 0.5, 1.0]) {
            assert!((o - e).abs() < 1e-6);
        }
        let flat = minmax_normalize(&[5.0f64; 4]);
        assert!(flat.iter().all(|v| v.abs() < 1e-6));
        let out = minmax_normalize(&[-1.0f64, 0.0, 3.0]);
        for (o, e) in out.iter().zip([0.0, 0.25, 1.0]) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_check_quadratic() {
        let x = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let v = g.leaf(x.clone().with_grad(true));
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[3.0, 4.0]);

        let report = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &[x],
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-7, "{report:?}");
    }

    #[test]
    fn grad_check_cosine_against_fixed_vector() {
        let x = Tensor::new(vec![1, 3], vec![0.3, -1.2, 0.8]).unwrap();
        let y = Tensor::new(vec![1, 3], vec![1.0, 0.5, -0.25]).unwrap();
        let report = grad_check(
            |g, v| {
                let y = g.constant(y.clone());
                let c = g.cosine(v[0], y)?;
                Ok(g.sum(c))
            },
            &[x],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-5, "{report:?}");
    }

    #[test]
    fn grad_check_surfaces_non_finite_loss() {
        let x = Tensor::new(vec![1], vec![1e200]).unwrap();
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-6,
            None,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    proptest::proptest! {
        #[test]
        fn cosine_stays_in_unit_range(
            a in proptest::collection::vec(-5.0f64..5.0, 12),
            b in proptest::collection::vec(-5.0f64..5.0, 8),
        ) {
            let a = Tensor::new(vec![3, 4], a).unwrap();
            let b = Tensor::new(vec![2, 4], b).unwrap();
            let out = pairwise_cosine(&a, &b).unwrap();
            for v in out.data() {
                proptest::prop_assert!(*v >= -1.0 - 1e-6 && *v <= 1.0 + 1e-6);
            }
        }

        #[test]
        fn self_similarity_has_unit_diagonal(a in proptest::collection::vec(0.1f64..5.0, 12)) {
            let a = Tensor::new(vec![4, 3], a).unwrap();
            let out = pairwise_cosine(&a, &a).unwrap();
            for i in 0..4 {
                proptest::prop_assert!((out.data()[i * 4 + i] - 1.0).abs() < 1e-6);
                for j in 0..4 {
                    proptest::prop_assert!((out.data()[i * 4 + j] - out.data()[j * 4 + i]).abs() < 1e-12);
                }
            }
        }
    }
}
