//! General object mining: an objectness mask from support similarity and the
//! activation head, learnable general prototypes, and the fused general feature.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_map, kernels, minmax_normalize, Graph, Scalar, Tensor, Var};
use crate::params::{self, Bound, ParamStore};

pub const PROTOTYPES: &str = "gomm.prototypes";
pub const FUSE_W: &str = "gomm.fuse.w";
pub const FUSE_B: &str = "gomm.fuse.b";
pub const HEAD_W: &str = "gomm.head.w";
pub const HEAD_B: &str = "gomm.head.b";
pub const ATTN_Q: &str = "gomm.attn.q";
pub const ATTN_K: &str = "gomm.attn.k";
pub const ATTN_V: &str = "gomm.attn.v";
pub const ATTN_O: &str = "gomm.attn.o";

#[derive(Clone, Debug, PartialEq)]
pub struct GommConfig {
    pub num_prototypes: usize,
    pub tau: f64,
    pub init_std: f64,
}

impl Default for GommConfig {
    fn default() -> Self {
        Self {
            num_prototypes: 16,
            tau: 0.6,
            init_std: 0.02,
        }
    }
}

impl GommConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_prototypes < 2 {
            return Err(Error::Config("need at least 2 general prototypes".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// Adds the module's parameters for `c`-channel features.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &GommConfig, c: usize, rng: &mut R) {
    store.insert(PROTOTYPES, params::normal(rng, vec![config.num_prototypes, c], config.init_std));
    store.insert(FUSE_W, params::lecun(rng, vec![2 * c, c], 2 * c));
    store.insert(FUSE_B, params::zeros(vec![c]));
    store.insert(HEAD_W, params::lecun(rng, vec![c, 2], c));
    store.insert(HEAD_B, params::zeros(vec![2]));
    for name in [ATTN_Q, ATTN_K, ATTN_V] {
        store.insert(name, params::lecun(rng, vec![c, c], c));
    }
    // Output projection starts small so the residual path dominates early on.
    store.insert(ATTN_O, params::normal(rng, vec![c, c], 0.1 / (c as f64).sqrt()));
}

fn hw<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::shape(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// Per query pixel, the best cosine match among support pixels after zeroing support
/// background, min-max normalised. `support_fg` flags foreground support cells.
pub fn prior_mask<T: Scalar>(query_high: &Tensor<T>, support_high: &Tensor<T>, support_fg: &[bool]) -> Result<Vec<T>> {
    let (h, w, c) = hw("prior_mask", query_high)?;
    let (hs, ws, cs) = hw("prior_mask", support_high)?;
    if c != cs || support_fg.len() != hs * ws {
        return Err(Error::shape("prior_mask", "query, support and mask disagree".to_string()));
    }
    let fg: Vec<usize> = (0..hs * ws).filter(|&i| support_fg[i]).collect();
    if fg.is_empty() {
        return Err(Error::InvalidArgument("prior mask needs a non-empty support mask".into()));
    }
    let mut rows = Vec::with_capacity(fg.len() * c);
    for &i in &fg {
        rows.extend_from_slice(&support_high.data()[i * c..(i + 1) * c]);
    }
    let sim = kernels::cosine_matrix(query_high.data(), h * w, &rows, fg.len(), c);
    // Zeroed background pixels have cosine 0 with everything.
    let floor = if fg.len() < hs * ws { T::zero() } else { T::neg_infinity() };
    let best: Vec<T> = sim
        .chunks(fg.len())
        .map(|r| r.iter().copied().fold(floor, T::max))
        .collect();
    Ok(minmax_normalize(&best))
}

/// `max(prior, cam) ≥ τ`, pixelwise.
pub fn general_object_mask<T: Scalar>(prior: &[T], cam: &[T], tau: f64) -> Result<Vec<bool>> {
    if prior.len() != cam.len() {
        return Err(Error::shape("general_object_mask", format!("{} vs {}", prior.len(), cam.len())));
    }
    let tau = T::lit(tau);
    Ok(prior.iter().zip(cam).map(|(p, c)| p.max(*c) >= tau).collect())
}

/// Cosine of every query pixel against every general prototype: `[H, W, N_g]`.
pub fn general_prototype_masks<T: Scalar>(query: &Tensor<T>, prototypes: &Tensor<T>) -> Result<Tensor<T>> {
    cosine_similarity_map(query, prototypes)
}

/// Graph-side outputs of the module for one query.
pub struct GeneralFeatures {
    /// Per-pixel index of the nearest general prototype.
    pub guide: Vec<usize>,
    /// `[HW, C]` initial general feature.
    pub initial: Var,
    /// `[HW, 2]` general object logits.
    pub logits: Var,
    /// `[HW, C]` fused general feature.
    pub fused: Var,
    /// `[HW, HW]` attention weights.
    pub attention: Var,
}

/// Allocates the nearest prototype to each pixel, concatenates with the query
/// feature, and maps back to `C` channels. `query: [HW, C]`.
pub fn initial_general_feature<T: Scalar>(graph: &mut Graph<T>, bound: &Bound, query: Var) -> Result<(Var, Vec<usize>)> {
    let protos = bound.var(PROTOTYPES)?;
    let (n, c) = graph.value(query).as_matrix_dims();
    let (ng, _) = graph.value(protos).as_matrix_dims();
    let sim = kernels::cosine_matrix(graph.value(query).data(), n, graph.value(protos).data(), ng, c);
    let guide = kernels::argmax_rows(&sim, n, ng);
    let allocated = graph.gather_rows(protos, &guide)?;
    let cat = graph.concat_cols(allocated, query)?;
    let out = graph.linear(cat, bound.var(FUSE_W)?, Some(bound.var(FUSE_B)?))?;
    Ok((out, guide))
}

/// Two-class general object logits, `[HW, 2]`.
pub fn general_head<T: Scalar>(graph: &mut Graph<T>, bound: &Bound, initial: Var) -> Result<Var> {
    graph.linear(initial, bound.var(HEAD_W)?, Some(bound.var(HEAD_B)?))
}

/// Single-head cross-attention (queries from `query`, keys and values from
/// `initial`) plus a residual of `query`. Returns `(fused, attention)`.
pub fn fuse_general_feature<T: Scalar>(graph: &mut Graph<T>, bound: &Bound, query: Var, initial: Var) -> Result<(Var, Var)> {
    let c = graph.value(query).as_matrix_dims().1;
    let q = graph.linear(query, bound.var(ATTN_Q)?, None)?;
    let k = graph.linear(initial, bound.var(ATTN_K)?, None)?;
    let v = graph.linear(initial, bound.var(ATTN_V)?, None)?;
    let scores = graph.matmul_nt(q, k)?;
    let scores = graph.scale(scores, T::one() / T::lit(c as f64).sqrt());
    let attention = graph.softmax_rows(scores)?;
    let mixed = graph.matmul(attention, v)?;
    let out = graph.linear(mixed, bound.var(ATTN_O)?, None)?;
    Ok((graph.add(out, query)?, attention))
}

/// Runs the learnable part of the module on `query: [HW, C]`.
pub fn forward<T: Scalar>(graph: &mut Graph<T>, bound: &Bound, query: Var) -> Result<GeneralFeatures> {
    let (initial, guide) = initial_general_feature(graph, bound, query)?;
    let logits = general_head(graph, bound, initial)?;
    let (fused, attention) = fuse_general_feature(graph, bound, query, initial)?;
    Ok(GeneralFeatures {
        guide,
        initial,
        logits,
        fused,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::grad_check;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn store(c: usize, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_params(&mut s, &GommConfig::default(), c, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn prior_self_match_is_one_before_normalising() {
        let s = rand_tensor(vec![3, 3, 4], 1);
        let mut q = rand_tensor(vec![3, 3, 4], 2);
        q.data_mut()[..4].copy_from_slice(&s.data()[4 * 4..5 * 4]);
        let mut fg = vec![false; 9];
        fg[4] = true;
        let prior = prior_mask(&q, &s, &fg).unwrap();
        // Pixel 0 matched the only foreground pixel exactly, so it is the maximum.
        assert_eq!(kernels::argmax(&prior), 0);
        assert!((prior[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn prior_matches_brute_force() {
        let s = rand_tensor(vec![3, 3, 5], 3);
        let q = rand_tensor(vec![3, 3, 5], 4);
        let fg = vec![true, false, true, true, false, false, true, false, true];
        let got = prior_mask(&q, &s, &fg).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb + 1e-8)
        };
        let mut raw = vec![];
        for p in 0..9 {
            let mut best = f64::NEG_INFINITY;
            for r in 0..9 {
                let masked: Vec<f64> = s.data()[r * 5..(r + 1) * 5].iter().map(|v| if fg[r] { *v } else { 0.0 }).collect();
                best = best.max(cos(&q.data()[p * 5..(p + 1) * 5], &masked));
            }
            raw.push(best);
        }
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (g, r) in got.iter().zip(&raw) {
            assert!((g - (r - lo) / (hi - lo + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_orthogonal_is_flat_zero() {
        let mut s = Tensor::<f64>::zeros(vec![2, 2, 2]);
        let mut q = Tensor::<f64>::zeros(vec![2, 2, 2]);
        for i in 0..4 {
            s.data_mut()[i * 2] = 1.0;
            q.data_mut()[i * 2 + 1] = 1.0 + i as f64;
        }
        let prior = prior_mask(&q, &s, &[true; 4]).unwrap();
        assert!(prior.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn prior_rejects_empty_support() {
        let s = rand_tensor(vec![2, 2, 2], 1);
        assert!(prior_mask(&s, &s, &[false; 4]).is_err());
    }

    #[test]
    fn general_mask_threshold() {
        let m = general_object_mask(&[0.7, 0.3, 0.6], &[0.2, 0.5, 0.0], 0.6).unwrap();
        assert_eq!(m, vec![true, false, true]);
    }

    #[test]
    fn higher_threshold_gives_subset() {
        let p = rand_tensor(vec![50], 9).map(|v| v.abs());
        let c = rand_tensor(vec![50], 10).map(|v| v.abs());
        let lo = general_object_mask(p.data(), c.data(), 0.6).unwrap();
        let hi = general_object_mask(p.data(), c.data(), 0.8).unwrap();
        assert!(lo.iter().zip(&hi).all(|(l, h)| !h || *l));
    }

    #[test]
    fn prototype_masks_self_match_and_single_prototype() {
        let protos = rand_tensor(vec![3, 4], 5);
        let mut q = rand_tensor(vec![2, 2, 4], 6);
        q.data_mut()[8..12].copy_from_slice(protos.row(1));
        let m = general_prototype_masks(&q, &protos).unwrap();
        assert!((m.data()[2 * 3 + 1] - 1.0).abs() < 1e-6);

        let one = rand_tensor(vec![1, 4], 7);
        let m = general_prototype_masks(&q, &one).unwrap();
        assert!(kernels::argmax_rows(m.data(), 4, 1).iter().all(|&i| i == 0));
    }

    fn graph_with(store: &ParamStore<f64>, query: &Tensor<f64>) -> (Graph<f64>, Bound, Var) {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, &["gomm."]);
        let q = g.constant(query.clone());
        (g, bound, q)
    }

    #[test]
    fn allocation_rows_are_prototypes() {
        let s = store(6, 1);
        let q = rand_tensor(vec![9, 6], 2);
        let (mut g, bound, qv) = graph_with(&s, &q);
        let (_, guide) = initial_general_feature(&mut g, &bound, qv).unwrap();
        assert_eq!(guide.len(), 9);
        let protos = s.get(PROTOTYPES).unwrap();
        let sim = kernels::cosine_matrix(q.data(), 9, protos.data(), 16, 6);
        for (p, &k) in guide.iter().enumerate() {
            assert!(k < 16);
            assert_eq!(k, kernels::argmax(&sim[p * 16..(p + 1) * 16]));
        }
    }

    #[test]
    fn identity_fuse_returns_allocated_map() {
        let c = 3;
        let mut s = store(c, 1);
        let mut w = Tensor::<f64>::zeros(vec![2 * c, c]);
        for i in 0..c {
            w.data_mut()[i * c + i] = 1.0;
        }
        s.insert(FUSE_W, w);
        let q = rand_tensor(vec![4, c], 3);
        let (mut g, bound, qv) = graph_with(&s, &q);
        let (out, guide) = initial_general_feature(&mut g, &bound, qv).unwrap();
        let protos = s.get(PROTOTYPES).unwrap();
        for (p, &k) in guide.iter().enumerate() {
            assert_eq!(&g.value(out).data()[p * c..(p + 1) * c], protos.row(k));
        }
    }

    #[test]
    fn tie_goes_to_lower_prototype_and_follows_permutation() {
        // Two identical prototypes tie everywhere: the guide picks index 0.
        let c = 2;
        let mut s = store(c, 1);
        s.insert(PROTOTYPES, Tensor::new(vec![2, c], vec![1.0, 0.0, 1.0, 0.0]).unwrap().with_grad(true));
        let q = rand_tensor(vec![5, c], 4);
        let (mut g, bound, qv) = graph_with(&s, &q);
        let (_, guide) = initial_general_feature(&mut g, &bound, qv).unwrap();
        assert!(guide.iter().all(|&k| k == 0));

        // Swapping distinct prototype rows swaps the guide labels.
        let a = Tensor::new(vec![2, c], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, c], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let guide_for = |p: &Tensor<f64>| {
            let mut s = s.clone();
            s.insert(PROTOTYPES, p.clone().with_grad(true));
            let (mut g, bound, qv) = graph_with(&s, &q);
            initial_general_feature(&mut g, &bound, qv).unwrap().1
        };
        let ga = guide_for(&a);
        let gb = guide_for(&b);
        assert!(ga.iter().zip(&gb).all(|(x, y)| *x == 1 - *y));
    }

    #[test]
    fn zero_head_gives_ln2_loss() {
        let mut s = store(4, 1);
        s.insert(HEAD_W, Tensor::zeros(vec![4, 2]).with_grad(true));
        let q = rand_tensor(vec![6, 4], 2);
        let (mut g, bound, qv) = graph_with(&s, &q);
        let (init, _) = initial_general_feature(&mut g, &bound, qv).unwrap();
        let logits = general_head(&mut g, &bound, init).unwrap();
        let loss = g.cross_entropy(logits, &[0, 1, 1, 0, 1, 0], None).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_head_gives_near_zero_loss() {
        let mut s = store(4, 1);
        s.insert(HEAD_W, Tensor::zeros(vec![4, 2]).with_grad(true));
        s.insert(HEAD_B, Tensor::new(vec![2], vec![-40.0, 40.0]).unwrap().with_grad(true));
        let q = rand_tensor(vec![3, 4], 2);
        let (mut g, bound, qv) = graph_with(&s, &q);
        let (init, _) = initial_general_feature(&mut g, &bound, qv).unwrap();
        let logits = general_head(&mut g, &bound, init).unwrap();
        let loss = g.cross_entropy(logits, &[1, 1, 1], None).unwrap();
        assert!(g.value(loss).data()[0] < 1e-15);
    }

    #[test]
    fn zero_attention_is_residual_identity() {
        let c = 4;
        let mut s = store(c, 1);
        for name in [ATTN_Q, ATTN_K, ATTN_V, ATTN_O] {
            s.insert(name, Tensor::zeros(vec![c, c]).with_grad(true));
        }
        let q = rand_tensor(vec![6, c], 2);
        let (mut g, bound, qv) = graph_with(&s, &q);
        let out = forward(&mut g, &bound, qv).unwrap();
        assert_eq!(g.value(out.fused).data(), q.data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let s = store(5, 3);
        let q = rand_tensor(vec![7, 5], 4);
        let (mut g, bound, qv) = graph_with(&s, &q);
        let out = forward(&mut g, &bound, qv).unwrap();
        let a = g.value(out.attention);
        for r in 0..7 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // One token: the single weight is 1 whatever the logits.
        let q1 = rand_tensor(vec![1, 5], 5);
        let (mut g, bound, qv) = graph_with(&s, &q1);
        let out = forward(&mut g, &bound, qv).unwrap();
        assert_eq!(g.value(out.attention).data(), &[1.0]);
    }

    #[test]
    fn head_and_module_gradients() {
        let c = 4;
        let s = store(c, 5);
        let q = rand_tensor(vec![16, c], 6);
        let targets: Vec<usize> = (0..16).map(|i| (i * 7 % 3 == 0) as usize).collect();
        let names = [PROTOTYPES, FUSE_W, FUSE_B, HEAD_W, HEAD_B, ATTN_Q, ATTN_K, ATTN_V, ATTN_O];
        let params: Vec<Tensor<f64>> = names.iter().map(|n| s.get(n).unwrap().clone()).collect();
        let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
            // Bind through the supplied leaves so grad_check perturbs them.
            let bound = Bound::from_vars(names.iter().map(|n| n.to_string()).zip(vars.iter().copied()));
            let qv = g.constant(q.clone());
            let out = forward(g, &bound, qv)?;
            let lg = g.cross_entropy(out.logits, &targets, None)?;
            let f = g.mul(out.fused, out.fused)?;
            let f = g.mean(f);
            g.add(lg, f)
        };
        let report = grad_check(build, &params, 1e-6, None, 0).unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }
}
