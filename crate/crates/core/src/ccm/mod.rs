//! Correlation construction: frequency prototypes of the support, foreground and
//! background prototype selection, a transport-based allocation target, the learned
//! allocation, query prototypes, and the object-level correlation feature.

mod sinkhorn;

use rand::Rng;

pub use sinkhorn::{sinkhorn, uniform, SinkhornConfig, TransportPlan};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity_map, kernels, DctBasis, Graph, Scalar, Tensor, Var};
use crate::params::{self, Bound, ParamStore};

pub const FEAT_W: &str = "ccm.feat.w";
pub const FEAT_B: &str = "ccm.feat.b";
pub const PROTO_W: &str = "ccm.proto.w";
pub const PROTO_B: &str = "ccm.proto.b";
pub const INNER_W: &str = "ccm.inner.w";
pub const INNER_B: &str = "ccm.inner.b";
pub const OUTER_W: &str = "ccm.outer.w";
pub const OUTER_B: &str = "ccm.outer.b";

#[derive(Clone, Debug, PartialEq)]
pub struct CcmConfig {
    /// Prototypes kept per block.
    pub num_selected: usize,
    /// Side of the retained low-frequency DCT square.
    pub dct_side: usize,
    pub sinkhorn: SinkhornConfig,
    /// Divide the query aggregation by the pixel count instead of summing.
    pub mean_aggregate: bool,
    /// Multiplies the cosine allocation scores before softmax and cross-entropy.
    pub logit_scale: f64,
    /// Append the broadcast support prototype to the correlation feature.
    pub global_prototype: bool,
    /// Start the linear maps near the identity instead of LeCun-random.
    pub identity_init: bool,
}

impl Default for CcmConfig {
    fn default() -> Self {
        Self {
            num_selected: 5,
            dct_side: 7,
            sinkhorn: SinkhornConfig::default(),
            mean_aggregate: true,
            logit_scale: 10.0,
            global_prototype: true,
            identity_init: true,
        }
    }
}

impl CcmConfig {
    pub fn num_components(&self) -> usize {
        self.dct_side * self.dct_side
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("ccm.logit_scale must be positive".into()));
        }
        if self.num_selected == 0 || 2 * self.num_selected > self.num_components() {
            return Err(Error::Config(format!(
                "need 1 <= 2 * num_selected <= {}, got num_selected = {}",
                self.num_components(),
                self.num_selected
            )));
        }
        Ok(())
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &CcmConfig, c: usize, rng: &mut R) {
    for (w, b) in [(FEAT_W, FEAT_B), (PROTO_W, PROTO_B), (INNER_W, INNER_B), (OUTER_W, OUTER_B)] {
        // Near-identity maps keep the allocation close to raw cosine matching at the
        // start, which is already a usable foreground detector on unseen classes.
        if config.identity_init {
            store.insert(w, params::near_identity(rng, c, 0.01));
        } else {
            store.insert(w, params::lecun(rng, vec![c, c], c));
        }
        store.insert(b, params::zeros(vec![c]));
    }
}

fn dims3<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::shape(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// Masked frequency pooling: DCT projection of `features ⊙ mask` divided by the mask
/// mass. `mask` holds per-cell foreground weights in `[0, 1]`.
pub fn multi_frequency_pooling<T: Scalar>(basis: &DctBasis<T>, features: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    let (h, w, c) = dims3("multi_frequency_pooling", features)?;
    if mask.len() != h * w {
        return Err(Error::shape("multi_frequency_pooling", format!("mask {} vs {h}x{w}", mask.len())));
    }
    let mass: T = mask.iter().copied().sum();
    if !(mass > T::zero()) {
        return Err(Error::InvalidArgument("frequency pooling needs a non-empty mask".into()));
    }
    let mut masked = features.data().to_vec();
    for (p, m) in mask.iter().enumerate() {
        for v in &mut masked[p * c..(p + 1) * c] {
            *v *= *m;
        }
    }
    let projected = basis.project(&Tensor::from_parts(vec![h, w, c], masked))?;
    Ok(projected.map(|v| v / mass))
}

/// Mean of per-shot prototype sets.
pub fn average_prototypes<T: Scalar>(shots: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = shots
        .first()
        .ok_or_else(|| Error::InvalidArgument("no support prototypes to average".into()))?;
    let mut acc = Tensor::zeros(first.shape().to_vec());
    for s in shots {
        if s.shape() != first.shape() {
            return Err(Error::shape("average_prototypes", format!("{:?} vs {:?}", s.shape(), first.shape())));
        }
        acc.add_assign(s);
    }
    Ok(acc.map(|v| v / T::lit(shots.len() as f64)))
}

/// Cosine of each support pixel against each frequency prototype: `[H, W, L]`.
pub fn support_prototype_masks<T: Scalar>(support: &Tensor<T>, prototypes: &Tensor<T>) -> Result<Tensor<T>> {
    cosine_similarity_map(support, prototypes)
}

/// Prototype indices whose similarity maps are closest to (foreground) and farthest
/// from (background) the support mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrototypeSelection {
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
}

impl PrototypeSelection {
    /// Background block first, then foreground.
    pub fn ordered(&self) -> Vec<usize> {
        self.background.iter().chain(&self.foreground).copied().collect()
    }
}

/// Euclidean distance between each channel of `masks: [H, W, L]` and `mask`.
pub fn mask_distances<T: Scalar>(masks: &Tensor<T>, mask: &[T]) -> Result<Vec<f64>> {
    let (h, w, l) = dims3("mask_distances", masks)?;
    if mask.len() != h * w {
        return Err(Error::shape("mask_distances", format!("mask {} vs {h}x{w}", mask.len())));
    }
    let mut d = vec![0.0; l];
    for (p, m) in mask.iter().enumerate() {
        for (k, v) in masks.data()[p * l..(p + 1) * l].iter().enumerate() {
            let diff = v.as_f64() - m.as_f64();
            d[k] += diff * diff;
        }
    }
    Ok(d.into_iter().map(f64::sqrt).collect())
}

/// The `n` smallest and `n` largest distances; ties go to the lower index.
pub fn select_prototype_indices<T: Scalar>(masks: &Tensor<T>, mask: &[T], n: usize) -> Result<PrototypeSelection> {
    select_by_distance(&mask_distances(masks, mask)?, n)
}

/// Selection over precomputed distances (for example summed over shots).
pub fn select_by_distance(distances: &[f64], n: usize) -> Result<PrototypeSelection> {
    if n == 0 || 2 * n > distances.len() {
        return Err(Error::InvalidArgument(format!("cannot select 2 x {n} of {} prototypes", distances.len())));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let foreground = order[..n].to_vec();
    order.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    let background = order[..n].to_vec();
    Ok(PrototypeSelection { foreground, background })
}

/// Rows `ids` of `prototypes`.
pub fn select_rows<T: Scalar>(prototypes: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (l, c) = prototypes.as_matrix_dims();
    if let Some(bad) = ids.iter().find(|&&i| i >= l) {
        return Err(Error::InvalidArgument(format!("prototype index {bad} out of {l}")));
    }
    let mut data = Vec::with_capacity(ids.len() * c);
    for &i in ids {
        data.extend_from_slice(prototypes.row(i));
    }
    Ok(Tensor::from_parts(vec![ids.len(), c], data))
}

/// Cosine of query pixels against the selected prototypes: `[H, W, ids.len()]`.
pub fn query_prototype_masks<T: Scalar>(query: &Tensor<T>, prototypes: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    cosine_similarity_map(query, &select_rows(prototypes, ids)?)
}

/// Transport plan of one query region scattered onto the grid.
#[derive(Clone, Debug)]
pub struct OptimalMask {
    /// `[HW, N_s]`, zero outside the region.
    pub mask: Vec<f64>,
    pub plan: TransportPlan,
}

/// Couples the pixels of `region` to the selected prototypes with uniform marginals
/// under cost `1 - cosine`. `Ok(None)` when the region is empty.
pub fn optimal_query_mask<T: Scalar>(
    query: &Tensor<T>,
    prototypes: &Tensor<T>,
    ids: &[usize],
    region: &[bool],
    config: &SinkhornConfig,
) -> Result<Option<OptimalMask>> {
    let sim = query_prototype_masks(query, prototypes, ids)?;
    optimal_mask_from_similarity(&sim, region, config)
}

/// [`optimal_query_mask`] for a precomputed `[H, W, N_s]` similarity map.
pub fn optimal_mask_from_similarity<T: Scalar>(sim: &Tensor<T>, region: &[bool], config: &SinkhornConfig) -> Result<Option<OptimalMask>> {
    let (h, w, n) = dims3("optimal_query_mask", sim)?;
    if region.len() != h * w {
        return Err(Error::shape("optimal_query_mask", format!("region {} vs {h}x{w}", region.len())));
    }
    let pixels: Vec<usize> = (0..h * w).filter(|&p| region[p]).collect();
    if pixels.is_empty() {
        return Ok(None);
    }
    let mut cost = Vec::with_capacity(pixels.len() * n);
    for &p in &pixels {
        cost.extend(sim.data()[p * n..(p + 1) * n].iter().map(|v| 1.0 - v.as_f64()));
    }
    let plan = sinkhorn(&cost, pixels.len(), n, &uniform(pixels.len()), &uniform(n), config)?;
    let mut mask = vec![0.0; h * w * n];
    for (r, &p) in pixels.iter().enumerate() {
        mask[p * n..(p + 1) * n].copy_from_slice(&plan.plan[r * n..(r + 1) * n]);
    }
    Ok(Some(OptimalMask { mask, plan }))
}

/// Per-pixel argmax over `[background | foreground]` channels (`[HW, n]` each).
pub fn allocating_mask(background: &[f64], foreground: &[f64], n: usize) -> Result<Vec<usize>> {
    if background.len() != foreground.len() || n == 0 || background.len() % n != 0 {
        return Err(Error::shape("allocating_mask", format!("{} vs {}", background.len(), foreground.len())));
    }
    Ok(background
        .chunks(n)
        .zip(foreground.chunks(n))
        .map(|(b, f)| {
            let joined: Vec<f64> = b.iter().chain(f).copied().collect();
            kernels::argmax(&joined)
        })
        .collect())
}

/// Cosine between projected query features `[HW, C]` and projected prototypes
/// `[M, C]`: `[HW, M]` allocation logits.
pub fn allocating_prediction<T: Scalar>(graph: &mut Graph<T>, bound: &Bound, features: Var, prototypes: Var) -> Result<Var> {
    let f = graph.linear(features, bound.var(FEAT_W)?, Some(bound.var(FEAT_B)?))?;
    let p = graph.linear(prototypes, bound.var(PROTO_W)?, Some(bound.var(PROTO_B)?))?;
    graph.cosine(f, p)
}

/// `outer(allocationᵀ · inner(features))`: one prototype per allocation channel.
pub fn query_prototypes<T: Scalar>(
    graph: &mut Graph<T>,
    bound: &Bound,
    allocation: Var,
    features: Var,
    mean_aggregate: bool,
) -> Result<Var> {
    let inner = graph.linear(features, bound.var(INNER_W)?, Some(bound.var(INNER_B)?))?;
    let mut agg = graph.matmul_tn(allocation, inner)?;
    if mean_aggregate {
        let hw = graph.value(features).as_matrix_dims().0;
        agg = graph.scale(agg, T::one() / T::lit(hw as f64));
    }
    graph.linear(agg, bound.var(OUTER_W)?, Some(bound.var(OUTER_B)?))
}

/// Places the argmax query prototype at every pixel and appends `features`:
/// `[HW, 2C]`. Also returns the per-pixel prototype index.
pub fn correlation_feature<T: Scalar>(graph: &mut Graph<T>, prototypes: Var, allocation: Var, features: Var) -> Result<(Var, Vec<usize>)> {
    let (hw, m) = graph.value(allocation).as_matrix_dims();
    let index = kernels::argmax_rows(graph.value(allocation).data(), hw, m);
    let allocated = graph.gather_rows(prototypes, &index)?;
    Ok((graph.concat_cols(allocated, features)?, index))
}

/// Probability mass of the foreground channels of `logits [HW, n_bg + n_fg]`, as
/// an `[HW, 1]` column. Constant 1 when there are no background channels.
pub fn foreground_probability<T: Scalar>(graph: &mut Graph<T>, logits: Var, n_bg: usize) -> Result<Var> {
    let (_, m) = graph.value(logits).as_matrix_dims();
    if n_bg > m {
        return Err(Error::shape("foreground_probability", format!("{n_bg} background channels of {m}")));
    }
    let p = graph.softmax_rows(logits)?;
    let pick = graph.constant(Tensor::from_parts(
        vec![m, 1],
        (0..m).map(|j| if j >= n_bg { T::one() } else { T::zero() }).collect(),
    ));
    graph.matmul(p, pick)
}
