//! The few-shot segmenter: configuration, ablation variants, per-episode preparation
//! over frozen features, and the differentiable forward pass.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ccm::{self, CcmConfig, PrototypeSelection};
use crate::encoder::{Encoder, EncoderConfig};
use crate::episodes::{Dataset, Episode, Image, SampleRef};
use crate::error::{Error, Result};
use crate::gomm::{self, GommConfig};
use crate::numerics::{kernels, DctBasis, Graph, Scalar, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::trainer::decoder;
use crate::trainer::loss::{total_loss, LossTerms, LossToggles, Supervision};

/// Ablation variants. `ForeBack` is the complete model and shares its parameters
/// with `Full`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    GommOnly,
    CcmOnly,
    Full,
    /// Mean of projected foreground prototypes instead of per-pixel allocation.
    Mean,
    /// Allocation learned without the transport target.
    Cosine,
    /// Foreground prototypes only.
    Fore,
    ForeBack,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Baseline,
        Variant::GommOnly,
        Variant::CcmOnly,
        Variant::Full,
        Variant::Mean,
        Variant::Cosine,
        Variant::Fore,
        Variant::ForeBack,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::GommOnly => "gomm_only",
            Variant::CcmOnly => "ccm_only",
            Variant::Full => "full",
            Variant::Mean => "mean",
            Variant::Cosine => "cosine",
            Variant::Fore => "fore",
            Variant::ForeBack => "fore+back",
        }
    }

    pub fn uses_gomm(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::CcmOnly)
    }

    /// Per-pixel prototype allocation feeds the decoder.
    pub fn uses_allocation(self) -> bool {
        matches!(self, Variant::CcmOnly | Variant::Full | Variant::Cosine | Variant::Fore | Variant::ForeBack)
    }

    /// Trained against the transport-derived allocation target.
    pub fn uses_transport(self) -> bool {
        matches!(self, Variant::CcmOnly | Variant::Full | Variant::Fore | Variant::ForeBack)
    }

    pub fn toggles(self) -> LossToggles {
        LossToggles {
            target: true,
            general: self.uses_gomm(),
            allocation: self.uses_transport(),
        }
    }

    /// Parameter prefixes that take part in this variant's graph.
    pub fn prefixes(self) -> Vec<&'static str> {
        let mut p = vec!["decoder."];
        if self.uses_gomm() {
            p.push("gomm.");
        }
        if self.uses_allocation() {
            p.push("ccm.");
        } else if self == Variant::Mean {
            p.push("ccm.proto.");
        }
        p
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fore_back" | "foreback" => return Ok(Variant::ForeBack),
            _ => {}
        }
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gomm: GommConfig,
    pub ccm: CcmConfig,
    pub decoder_width: usize,
    /// Channel dropout before the decoder head, training passes only.
    pub decoder_dropout: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            gomm: GommConfig::default(),
            ccm: CcmConfig::default(),
            decoder_width: 64,
            decoder_dropout: 0.1,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gomm.validate()?;
        self.ccm.validate()?;
        if self.ccm.dct_side > self.encoder.feature_size() {
            return Err(Error::Config("dct_side exceeds the feature grid".into()));
        }
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder_width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.decoder_dropout) {
            return Err(Error::Config("decoder_dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Frozen-encoder outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedFeatures<T> {
    pub mid: Tensor<T>,
    pub high: Tensor<T>,
    pub cam: Vec<T>,
}

/// Features keyed by dataset sample and flip state.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache<T> {
    map: HashMap<SampleRef, Arc<CachedFeatures<T>>>,
}

impl<T: Scalar> FeatureCache<T> {
    /// Runs the encoder over `indices` (and their mirror images when `flips`).
    pub fn build(encoder: &Encoder<T>, dataset: &Dataset, indices: &[usize], flips: bool) -> Result<Self> {
        let mut refs = Vec::with_capacity(indices.len() * 2);
        for &index in indices {
            refs.push(SampleRef { index, flipped: false });
            if flips {
                refs.push(SampleRef { index, flipped: true });
            }
        }
        let computed = crate::parallel::map(refs, |r| -> Result<(SampleRef, Arc<CachedFeatures<T>>)> {
            let img = &dataset.samples[r.index].image;
            let f = if r.flipped {
                compute_features(encoder, &img.hflip())?
            } else {
                compute_features(encoder, img)?
            };
            Ok((r, Arc::new(f)))
        });
        let mut map = HashMap::with_capacity(computed.len());
        for c in computed {
            let (r, f) = c?;
            map.insert(r, f);
        }
        Ok(Self { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn extend(&mut self, other: FeatureCache<T>) {
        self.map.extend(other.map);
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, r: &SampleRef) -> Option<Arc<CachedFeatures<T>>> {
        self.map.get(r).cloned()
    }
}

pub fn compute_features<T: Scalar>(encoder: &Encoder<T>, image: &Image) -> Result<CachedFeatures<T>> {
    let f = encoder.extract_features(image)?;
    let cam = encoder.cam_map(&f.high)?;
    Ok(CachedFeatures {
        mid: f.mid,
        high: f.high,
        cam,
    })
}

/// Constant per-episode quantities derived from frozen features and masks.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub feature_size: usize,
    pub image_size: usize,
    /// `[HW, C]` mid-level query features.
    pub query: Tensor<T>,
    pub prior: Vec<T>,
    pub cam: Vec<T>,
    pub general_mask: Vec<bool>,
    /// `[L, C]` shot-averaged frequency prototypes.
    pub prototypes: Tensor<T>,
    pub selection: PrototypeSelection,
    /// `[1, C]` masked-average support prototype.
    pub support_mean: Tensor<T>,
    /// Full-resolution query labels, when known.
    pub query_targets: Option<Vec<usize>>,
    /// Allocation targets and per-pixel weights, when a transport target exists.
    pub allocation_targets: Option<(Vec<usize>, Vec<T>)>,
    /// The query mask was known but a region was empty, so no allocation target.
    pub degenerate: bool,
    /// Seeds decoder dropout; `None` (the default from [`Model::prepare`]) disables it.
    pub dropout_seed: Option<u64>,
}

/// Graph handles produced by [`Model::forward`].
pub struct ForwardPass {
    /// `[S*S, 2]` query logits.
    pub logits: Var,
    pub general_logits: Option<Var>,
    pub general_guide: Option<Vec<usize>>,
    pub allocation: Option<Var>,
    pub loss: Option<LossTerms>,
}

/// Parameters of the trainable modules plus the frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub params: ParamStore<T>,
}

fn to_t<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Decoder input width: correlation plus features, and for allocating variants the
/// foreground probability and optionally the global support prototype.
pub fn decoder_channels(config: &ModelConfig) -> usize {
    let c = config.encoder.mid_channels();
    if !config.variant.uses_allocation() {
        return 2 * c;
    }
    2 * c + 1 + if config.ccm.global_prototype { c } else { 0 }
}

impl<T: Scalar> Model<T> {
    /// Fresh trainable modules on top of `encoder`.
    pub fn new(config: ModelConfig, mut encoder: Encoder<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if encoder.config.widths != config.encoder.widths || encoder.config.image_size != config.encoder.image_size {
            return Err(Error::Config("encoder weights do not match the encoder configuration".into()));
        }
        encoder.set_frozen(true);
        let c = config.encoder.mid_channels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        gomm::init_params(&mut params, &config.gomm, c, &mut rng);
        ccm::init_params(&mut params, &config.ccm, c, &mut rng);
        decoder::init_params(&mut params, decoder_channels(&config), config.decoder_width, &mut rng);
        Ok(Self { config, encoder, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn features(&self, image: &Image, source: Option<SampleRef>, cache: Option<&FeatureCache<T>>) -> Result<Arc<CachedFeatures<T>>> {
        if let (Some(r), Some(c)) = (source, cache) {
            if let Some(f) = c.get(&r) {
                return Ok(f);
            }
        }
        Ok(Arc::new(compute_features(&self.encoder, image)?))
    }

    /// Derives every constant the forward pass needs. The query mask, when present,
    /// only feeds training targets.
    pub fn prepare(&self, episode: &Episode, cache: Option<&FeatureCache<T>>) -> Result<Prepared<T>> {
        episode.validate()?;
        let fs = self.config.encoder.feature_size();
        let size = self.config.encoder.image_size;
        if episode.query_image.height != size || episode.query_image.width != size {
            return Err(Error::shape("prepare", format!("episode images must be {size}x{size}")));
        }
        let c = self.config.encoder.mid_channels();
        let basis = DctBasis::<T>::new(fs, fs, self.config.ccm.dct_side)?;
        let q = self.features(&episode.query_image, episode.query_source, cache)?;

        let mut priors = Vec::with_capacity(episode.shots());
        let mut protos = Vec::with_capacity(episode.shots());
        let mut shots = Vec::with_capacity(episode.shots());
        let mut support_mean = vec![T::zero(); c];
        for shot in &episode.support {
            let s = self.features(&shot.image, shot.source, cache)?;
            let frac = shot.mask.area_fractions(fs, fs)?;
            let mut fg: Vec<bool> = frac.iter().map(|&f| f >= 0.5).collect();
            if !fg.iter().any(|&b| b) {
                fg = frac.iter().map(|&f| f > 0.0).collect();
            }
            let frac_t: Vec<T> = to_t(&frac);
            priors.push(gomm::prior_mask(&q.high, &s.high, &fg)?);
            protos.push(ccm::multi_frequency_pooling(&basis, &s.mid, &frac_t)?);
            let mass: T = frac_t.iter().copied().sum();
            for (p, w) in frac_t.iter().enumerate() {
                for (acc, v) in support_mean.iter_mut().zip(&s.mid.data()[p * c..(p + 1) * c]) {
                    *acc += *w * *v / mass;
                }
            }
            shots.push((s, frac_t));
        }
        let k = T::lit(episode.shots() as f64);
        for v in &mut support_mean {
            *v /= k;
        }
        let hw = fs * fs;
        let mut prior = vec![T::zero(); hw];
        for p in &priors {
            for (acc, v) in prior.iter_mut().zip(p) {
                *acc += *v / k;
            }
        }
        let prototypes = ccm::average_prototypes(&protos)?;
        let mut distances = vec![0.0; prototypes.shape()[0]];
        for (s, frac) in &shots {
            let sp = ccm::support_prototype_masks(&s.mid, &prototypes)?;
            for (acc, d) in distances.iter_mut().zip(ccm::mask_distances(&sp, frac)?) {
                *acc += d;
            }
        }
        let selection = ccm::select_by_distance(&distances, self.config.ccm.num_selected)?;
        let general_mask = gomm::general_object_mask(&prior, &q.cam, self.config.gomm.tau)?;

        let query_targets = episode
            .query_mask
            .as_ref()
            .map(|m| m.data.iter().map(|&v| v as usize).collect());
        let mut degenerate = false;
        let mut allocation_targets = None;
        if let Some(m) = &episode.query_mask {
            if self.variant().uses_transport() {
                let region = m.downsample(fs, fs)?;
                match self.allocation_targets(&q.mid, &prototypes, &selection, &region)? {
                    Some(t) => allocation_targets = Some(t),
                    None => degenerate = true,
                }
            }
        }

        Ok(Prepared {
            feature_size: fs,
            image_size: size,
            query: q.mid.clone().reshape(vec![hw, c])?,
            prior,
            cam: q.cam.clone(),
            general_mask,
            prototypes,
            selection,
            support_mean: Tensor::from_parts(vec![1, c], support_mean),
            query_targets,
            allocation_targets,
            degenerate,
            dropout_seed: None,
        })
    }

    /// Transport-derived allocation labels for the query grid.
    fn allocation_targets(
        &self,
        query: &Tensor<T>,
        prototypes: &Tensor<T>,
        selection: &PrototypeSelection,
        fg_region: &[bool],
    ) -> Result<Option<(Vec<usize>, Vec<T>)>> {
        let cfg = &self.config.ccm.sinkhorn;
        let n = self.config.ccm.num_selected;
        let Some(fg) = ccm::optimal_query_mask(query, prototypes, &selection.foreground, fg_region, cfg)? else {
            return Ok(None);
        };
        if self.variant() == Variant::Fore {
            let labels = kernels::argmax_rows(&fg.mask, fg_region.len(), n);
            let weights = fg_region.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
            return Ok(Some((labels, weights)));
        }
        let bg_region: Vec<bool> = fg_region.iter().map(|b| !b).collect();
        let Some(bg) = ccm::optimal_query_mask(query, prototypes, &selection.background, &bg_region, cfg)? else {
            return Ok(None);
        };
        let labels = ccm::allocating_mask(&bg.mask, &fg.mask, n)?;
        Ok(Some((labels, vec![T::one(); fg_region.len()])))
    }

    /// Binds this variant's parameters on `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        self.params.bind(graph, &self.variant().prefixes())
    }

    /// Records the forward pass (and the loss, when `prep` carries targets).
    pub fn forward(&self, graph: &mut Graph<T>, bound: &Bound, prep: &Prepared<T>, toggles: LossToggles) -> Result<ForwardPass> {
        let variant = self.variant();
        let fs = prep.feature_size;
        let hw = fs * fs;
        let q = graph.constant(prep.query.clone());

        let (features, general_logits, general_guide) = if variant.uses_gomm() {
            let out = gomm::forward(graph, bound, q)?;
            (out.fused, Some(out.logits), Some(out.guide))
        } else {
            (q, None, None)
        };

        let mut allocation = None;
        let correlation = match variant {
            Variant::Baseline | Variant::GommOnly => {
                let p = graph.constant(prep.support_mean.clone());
                let b = graph.broadcast_rows(p, hw)?;
                graph.concat_cols(b, features)?
            }
            Variant::Mean => {
                let sel = graph.constant(ccm::select_rows(&prep.prototypes, &prep.selection.foreground)?);
                let proj = graph.linear(sel, bound.var(ccm::PROTO_W)?, Some(bound.var(ccm::PROTO_B)?))?;
                let n = prep.selection.foreground.len();
                let avg = graph.constant(Tensor::full(vec![1, n], T::one() / T::lit(n as f64)));
                let mean = graph.matmul(avg, proj)?;
                let b = graph.broadcast_rows(mean, hw)?;
                graph.concat_cols(b, features)?
            }
            _ => {
                let ids = if variant == Variant::Fore {
                    prep.selection.foreground.clone()
                } else {
                    prep.selection.ordered()
                };
                let sel = graph.constant(ccm::select_rows(&prep.prototypes, &ids)?);
                let pred = ccm::allocating_prediction(graph, bound, features, sel)?;
                let pq = ccm::query_prototypes(graph, bound, pred, features, self.config.ccm.mean_aggregate)?;
                let (fc, _) = ccm::correlation_feature(graph, pq, pred, features)?;
                let logits = graph.scale(pred, T::lit(self.config.ccm.logit_scale));
                let n_bg = ids.len() - prep.selection.foreground.len();
                let fg = ccm::foreground_probability(graph, logits, n_bg)?;
                allocation = Some(logits);
                let out = graph.concat_cols(fc, fg)?;
                if self.config.ccm.global_prototype {
                    let p = graph.constant(prep.support_mean.clone());
                    let b = graph.broadcast_rows(p, hw)?;
                    graph.concat_cols(b, out)?
                } else {
                    out
                }
            }
        };
        let c2 = graph.value(correlation).as_matrix_dims().1;
        let grid = graph.reshape(correlation, vec![fs, fs, c2])?;
        let dropout = prep.dropout_seed.map(|s| (self.config.decoder_dropout, s));
        let logits = decoder::decode(graph, bound, grid, prep.image_size, prep.image_size, dropout)?;

        let loss = match &prep.query_targets {
            None => None,
            Some(targets) => {
                let general_targets: Vec<usize> = prep.general_mask.iter().map(|&b| b as usize).collect();
                let general = general_logits.map(|l| Supervision {
                    logits: l,
                    targets: &general_targets,
                    weights: None,
                });
                let alloc = match (allocation, &prep.allocation_targets) {
                    (Some(a), Some((t, w))) if variant.uses_transport() => Some(Supervision {
                        logits: a,
                        targets: t,
                        weights: Some(w),
                    }),
                    _ => None,
                };
                Some(total_loss(
                    graph,
                    Supervision {
                        logits,
                        targets,
                        weights: None,
                    },
                    general,
                    alloc,
                    toggles,
                )?)
            }
        };
        Ok(ForwardPass {
            logits,
            general_logits,
            general_guide,
            allocation,
            loss,
        })
    }

    /// Predicted query mask (row-major, `S×S`) for one episode.
    pub fn predict(&self, episode: &Episode, cache: Option<&FeatureCache<T>>) -> Result<Prediction<T>> {
        let prep = self.prepare(&episode.without_query_mask(), cache)?;
        let mut g = Graph::new();
        let frozen = {
            let mut p = self.params.clone();
            p.set_trainable("", false);
            p
        };
        let bound = frozen.bind(&mut g, &self.variant().prefixes());
        let out = self.forward(&mut g, &bound, &prep, self.variant().toggles())?;
        let n = prep.image_size * prep.image_size;
        let mask = kernels::argmax_rows(g.value(out.logits).data(), n, 2)
            .into_iter()
            .map(|k| k as u8)
            .collect();
        let general_prediction = out.general_logits.map(|l| {
            kernels::argmax_rows(g.value(l).data(), prep.feature_size * prep.feature_size, 2)
                .into_iter()
                .map(|k| k == 1)
                .collect()
        });
        Ok(Prediction {
            mask,
            general_prediction,
            prep,
        })
    }

    /// Same model in another precision (parameters rounded or widened).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let cast_store = |s: &ParamStore<T>| {
            let mut out = ParamStore::new();
            for (n, t) in s.iter() {
                out.insert(n.clone(), t.cast::<U>());
            }
            out
        };
        Model {
            config: self.config.clone(),
            encoder: Encoder {
                config: self.encoder.config.clone(),
                params: cast_store(&self.encoder.params),
                base_classes: self.encoder.base_classes.clone(),
            },
            params: cast_store(&self.params),
        }
    }
}

/// Output of [`Model::predict`].
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// `S×S` binary query mask.
    pub mask: Vec<u8>,
    /// Feature-grid general object prediction.
    pub general_prediction: Option<Vec<bool>>,
    pub prep: Prepared<T>,
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::episodes::{generate_synthetic, make_folds, sample_episode, EpisodeMode, SynthConfig};
    use crate::trainer::{episode_step, loss_grad_check, LossTerm};

    /// 32 px images on an 8×8 feature grid with 8 channels.
    pub(crate) fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 32,
                widths: vec![4, 8, 8, 8],
                ..EncoderConfig::default()
            },
            decoder_width: 8,
            variant,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_data() -> Dataset {
        generate_synthetic(&SynthConfig {
            image_size: 32,
            num_classes: 8,
            images_per_class: 4,
            target_scale: (6.0, 9.0),
            distractor_scale: (3.0, 5.0),
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_model(variant: Variant) -> Model<f64> {
        let cfg = tiny_config(variant);
        let encoder = Encoder::new(cfg.encoder.clone(), vec![2, 3, 4, 5, 6, 7], 9).unwrap();
        Model::new(cfg, encoder, 4).unwrap()
    }

    fn episodes(ds: &Dataset, n: usize, seed: u64) -> Vec<Episode> {
        let split = make_folds(ds.num_classes(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| sample_episode(ds, &split.train_classes, 0, 1, EpisodeMode::Train, &mut rng).unwrap())
            .collect()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("fore_back".parse::<Variant>().unwrap(), Variant::ForeBack);
        assert!("everything".parse::<Variant>().is_err());
    }

    #[test]
    fn decoder_width_follows_variant() {
        let c = 8;
        assert_eq!(decoder_channels(&tiny_config(Variant::Baseline)), 2 * c);
        assert_eq!(decoder_channels(&tiny_config(Variant::Mean)), 2 * c);
        assert_eq!(decoder_channels(&tiny_config(Variant::Full)), 3 * c + 1);
        let mut cfg = tiny_config(Variant::CcmOnly);
        cfg.ccm.global_prototype = false;
        assert_eq!(decoder_channels(&cfg), 2 * c + 1);
    }

    #[test]
    fn only_variant_modules_receive_gradients() {
        let ds = tiny_data();
        let ep = &episodes(&ds, 1, 0)[0];
        for (variant, expect) in [
            (Variant::Baseline, vec!["decoder."]),
            (Variant::GommOnly, vec!["decoder.", "gomm."]),
            (Variant::CcmOnly, vec!["decoder.", "ccm."]),
            (Variant::Full, vec!["decoder.", "gomm.", "ccm."]),
        ] {
            let model = tiny_model(variant);
            let step = episode_step(&model, ep, None, LossToggles::ALL, None).unwrap();
            for name in step.grads.keys() {
                assert!(expect.iter().any(|p| name.starts_with(p)), "{variant}: unexpected gradient for {name}");
            }
            for p in &expect {
                assert!(step.grads.keys().any(|n| n.starts_with(p)), "{variant}: no gradient under {p}");
            }
            assert!(step.terms.iter().all(|t| *t >= 0.0));
        }
    }

    #[test]
    fn allocation_targets_split_at_query_region() {
        let ds = tiny_data();
        let n = CcmConfig::default().num_selected;
        let full = tiny_model(Variant::Full);
        let fore = tiny_model(Variant::Fore);
        let mut checked = 0;
        for ep in episodes(&ds, 6, 1) {
            let region = ep.query_mask.as_ref().unwrap().downsample(8, 8).unwrap();
            let prep = full.prepare(&ep, None).unwrap();
            let sel = &prep.selection;
            assert!(sel.foreground.iter().all(|i| !sel.background.contains(i)));
            let Some((labels, weights)) = &prep.allocation_targets else {
                assert!(prep.degenerate);
                continue;
            };
            for (p, &l) in labels.iter().enumerate() {
                assert!(l < 2 * n);
                assert_eq!(l >= n, region[p], "pixel {p}");
            }
            assert!(weights.iter().all(|&w| w == 1.0));
            let (labels, weights) = fore.prepare(&ep, None).unwrap().allocation_targets.unwrap();
            for p in 0..labels.len() {
                assert!(labels[p] < n);
                assert_eq!(weights[p], region[p] as u8 as f64);
            }
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn prediction_is_binary_at_image_size() {
        let ds = tiny_data();
        let ep = episodes(&ds, 1, 2).remove(0).without_query_mask();
        for v in [Variant::Baseline, Variant::Full, Variant::Mean, Variant::Fore] {
            let pred = tiny_model(v).predict(&ep, None).unwrap();
            assert_eq!(pred.mask.len(), 32 * 32);
            assert!(pred.mask.iter().all(|&m| m <= 1));
            assert_eq!(pred.general_prediction.is_some(), v.uses_gomm());
            assert!(pred.prep.query_targets.is_none() && !pred.prep.degenerate);
        }
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let ds = tiny_data();
        let model = tiny_model(Variant::Full);
        let ep = episodes(&ds, 4, 3)
            .into_iter()
            .find(|e| model.prepare(e, None).unwrap().allocation_targets.is_some())
            .unwrap();
        let prep = model.prepare(&ep, None).unwrap();
        let report = loss_grad_check(&model, &prep, LossTerm::Total, Some(40), 5).unwrap();
        assert!(report.max_relative_error < 1e-3, "{report:?}");
        assert!(loss_grad_check(&tiny_model(Variant::Baseline), &prep, LossTerm::General, Some(1), 0).is_err());
    }
}
