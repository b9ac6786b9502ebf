//! Convolutional backbone, base-class activation head, and its pretraining.
//!
//! The backbone maps an `S×S` RGB image to two aligned feature maps at stride 4: a
//! mid-level map (general object features) and a high-level map (prior and CAM).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episodes::{Dataset, Image};
use crate::error::{Error, Result};
use crate::numerics::{minmax_normalize, ConvGeometry, Graph, Scalar, Tensor, Var};
use crate::optim::Adam;
use crate::params::{self, accumulate, scale_grads, GradMap, ParamStore};

pub const CAM_WEIGHT: &str = "cam.w";
pub const CAM_BIAS: &str = "cam.b";

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub widths: Vec<usize>,
    /// 1-based index of the stage providing the mid-level map.
    pub mid_stage: usize,
    pub high_stage: usize,
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            widths: vec![16, 32, 64, 64],
            mid_stage: 3,
            high_stage: 4,
            frozen: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 3 {
            return Err(Error::Config("encoder needs at least 3 stages".into()));
        }
        if !(self.mid_stage >= 3 && self.mid_stage < self.high_stage && self.high_stage <= self.widths.len()) {
            return Err(Error::Config(format!(
                "need 3 <= mid_stage < high_stage <= {}, got {} and {}",
                self.widths.len(),
                self.mid_stage,
                self.high_stage
            )));
        }
        if self.image_size % 4 != 0 || self.image_size < 8 {
            return Err(Error::Config(format!("image_size {} must be a multiple of 4", self.image_size)));
        }
        Ok(())
    }

    /// Stages 2 and 3 halve the resolution; deeper stages keep it with dilation 2, so
    /// every stage from 3 on shares the stride-4 grid.
    pub fn geometry(stage: usize) -> ConvGeometry {
        match stage {
            1 => ConvGeometry::new(3, 1, 1, 1),
            2 | 3 => ConvGeometry::new(3, 2, 1, 1),
            _ => ConvGeometry::new(3, 1, 2, 2),
        }
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn mid_channels(&self) -> usize {
        self.widths[self.mid_stage - 1]
    }

    pub fn high_channels(&self) -> usize {
        self.widths[self.high_stage - 1]
    }

    fn weight_name(stage: usize) -> String {
        format!("encoder.conv{stage}.w")
    }

    fn bias_name(stage: usize) -> String {
        format!("encoder.conv{stage}.b")
    }
}

/// Mid- and high-level features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Features<T> {
    pub mid: Tensor<T>,
    pub high: Tensor<T>,
}

/// Backbone weights plus the base-class head (`cam.w: [C_h, classes]`, `cam.b`).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
    pub base_classes: Vec<usize>,
}

/// Image pixels in `[0, 1]` centred to `[-1, 1]`.
pub fn image_tensor<T: Scalar>(image: &Image) -> Tensor<T> {
    Tensor::from_fn(vec![image.height, image.width, 3], |i| T::lit(image.data[i] as f64 * 2.0 - 1.0))
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, base_classes: Vec<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        if base_classes.len() < 2 {
            return Err(Error::InvalidArgument(
                "the activation head needs at least two base classes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (i, &cout) in config.widths[..config.high_stage].iter().enumerate() {
            let fan_in = 9 * cin;
            store.insert(EncoderConfig::weight_name(i + 1), params::he(&mut rng, vec![fan_in, cout], fan_in));
            store.insert(EncoderConfig::bias_name(i + 1), params::zeros(vec![cout]));
            cin = cout;
        }
        let ch = config.high_channels();
        store.insert(CAM_WEIGHT, params::lecun(&mut rng, vec![ch, base_classes.len()], ch));
        store.insert(CAM_BIAS, params::zeros(vec![base_classes.len()]));
        let mut enc = Self {
            config,
            params: store,
            base_classes,
        };
        enc.set_frozen(enc.config.frozen);
        Ok(enc)
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.config.frozen = frozen;
        self.params.set_trainable("encoder.", !frozen);
        self.params.set_trainable("cam.", !frozen);
    }

    /// Records the backbone on `graph`, reading weights through `bound`.
    pub fn forward(&self, graph: &mut Graph<T>, bound: &params::Bound, image: Var) -> Result<(Var, Var)> {
        let mut x = image;
        let mut mid = None;
        for stage in 1..=self.config.high_stage {
            let w = bound.var(&EncoderConfig::weight_name(stage))?;
            let b = bound.var(&EncoderConfig::bias_name(stage))?;
            let y = graph.conv2d(x, w, Some(b), EncoderConfig::geometry(stage))?;
            x = graph.relu(y);
            if stage == self.config.mid_stage {
                mid = Some(x);
            }
        }
        Ok((mid.expect("mid_stage < high_stage"), x))
    }

    fn check_size(&self, image: &Image) -> Result<()> {
        let s = self.config.image_size;
        if image.height != s || image.width != s {
            return Err(Error::shape(
                "extract_features",
                format!("image is {}x{}, encoder expects {s}x{s}", image.height, image.width),
            ));
        }
        Ok(())
    }

    /// Frozen forward pass.
    pub fn extract_features(&self, image: &Image) -> Result<Features<T>> {
        self.check_size(image)?;
        let mut g = Graph::new();
        let frozen = self.frozen_copy();
        let bound = frozen.bind(&mut g, &["encoder."]);
        let x = g.constant(image_tensor(image));
        let (mid, high) = self.forward(&mut g, &bound, x)?;
        Ok(Features {
            mid: g.value(mid).clone(),
            high: g.value(high).clone(),
        })
    }

    fn frozen_copy(&self) -> ParamStore<T> {
        let mut p = self.params.clone();
        p.set_trainable("", false);
        p
    }

    /// Class-agnostic activation map of high-level features.
    pub fn cam_map(&self, high: &Tensor<T>) -> Result<Vec<T>> {
        cam_map(high, self.params.get(CAM_WEIGHT)?)
    }

    /// Base-class logits (index into `base_classes`).
    pub fn classify(&self, image: &Image) -> Result<Vec<T>> {
        let f = self.extract_features(image)?;
        let mut g = Graph::new();
        let frozen = self.frozen_copy();
        let bound = frozen.bind(&mut g, &["cam."]);
        let h = g.constant(f.high);
        let pooled = g.global_avg_pool(h)?;
        let logits = g.linear(pooled, bound.var(CAM_WEIGHT)?, Some(bound.var(CAM_BIAS)?))?;
        Ok(g.value(logits).data().to_vec())
    }
}

/// `minmax(max_c <w_c, F[h, w]>)` over the head's classes; `weights: [C_h, classes]`.
pub fn cam_map<T: Scalar>(high: &Tensor<T>, weights: &Tensor<T>) -> Result<Vec<T>> {
    let (h, w, c) = match high.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::shape("cam_map", format!("expected [H, W, C], got {s:?}"))),
    };
    let (rows, classes) = weights.as_matrix_dims();
    if rows != c || weights.rank() != 2 {
        return Err(Error::shape("cam_map", format!("weights {:?} vs {c} channels", weights.shape())));
    }
    let mut act = vec![T::zero(); h * w * classes];
    crate::numerics::kernels::gemm(h * w, c, classes, high.data(), false, weights.data(), false, T::zero(), &mut act);
    let fused: Vec<T> = act
        .chunks(classes)
        .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
        .collect();
    Ok(minmax_normalize(&fused))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of base images held out for the accuracy report.
    pub holdout_fraction: f64,
    pub flip: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 2e-3,
            holdout_fraction: 0.15,
            flip: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Top-1 accuracy over held-out images whose only base label is their own class.
    pub holdout_accuracy: f64,
    pub holdout_size: usize,
}

/// Multi-hot base-class targets of one sample: its class plus any base-class distractors.
fn targets<T: Scalar>(dataset: &Dataset, index: usize, base: &[usize]) -> Vec<T> {
    let s = &dataset.samples[index];
    base.iter()
        .map(|&c| {
            let on = c == s.class_id || s.distractors.contains(&c);
            if on {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect()
}

fn single_label(dataset: &Dataset, index: usize, base: &[usize]) -> bool {
    let s = &dataset.samples[index];
    !s.distractors.iter().any(|d| base.contains(d))
}

/// Top-1 accuracy of the head on single-label images among `indices`.
pub fn holdout_accuracy<T: Scalar>(encoder: &Encoder<T>, dataset: &Dataset, indices: &[usize]) -> Result<(f64, usize)> {
    let eval: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| single_label(dataset, i, &encoder.base_classes))
        .collect();
    let hits = crate::parallel::map(eval.clone(), |i| -> Result<bool> {
        let logits = encoder.classify(&dataset.samples[i].image)?;
        let top = crate::numerics::kernels::argmax(&logits);
        Ok(encoder.base_classes[top] == dataset.samples[i].class_id)
    });
    let mut correct = 0;
    for h in hits {
        correct += h? as usize;
    }
    Ok((correct as f64 / eval.len().max(1) as f64, eval.len()))
}

/// Trains backbone and head on multi-label base-class classification, then freezes them.
pub fn pretrain_encoder(
    dataset: &Dataset,
    base_classes: &[usize],
    config: &EncoderConfig,
    pretrain: &PretrainConfig,
) -> Result<(Encoder<f32>, PretrainReport)> {
    let mut base: Vec<usize> = base_classes.to_vec();
    base.sort_unstable();
    base.dedup();
    if base.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pretraining needs at least two classes, got {}",
            base.len()
        )));
    }
    let mut encoder = Encoder::<f32>::new(EncoderConfig { frozen: false, ..config.clone() }, base.clone(), pretrain.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(pretrain.seed ^ 0x9e37_79b9);

    let mut train = Vec::new();
    let mut held = Vec::new();
    for &c in &base {
        let mut pool = dataset.samples_of(c).to_vec();
        pool.shuffle(&mut rng);
        let n_hold = ((pool.len() as f64) * pretrain.holdout_fraction).round() as usize;
        held.extend_from_slice(&pool[..n_hold]);
        train.extend_from_slice(&pool[n_hold..]);
    }
    if train.is_empty() {
        return Err(Error::Dataset("no training images for the base classes".into()));
    }
    for &i in train.iter().chain(&held) {
        encoder.check_size(&dataset.samples[i].image)?;
    }

    let mut opt = Adam::new(pretrain.lr);
    let mut epoch_losses = Vec::with_capacity(pretrain.epochs);
    for epoch in 0..pretrain.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(pretrain.batch_size.max(1)) {
            let jobs: Vec<(usize, bool)> = batch
                .iter()
                .map(|&i| (i, pretrain.flip && rand::Rng::random_bool(&mut rng, 0.5)))
                .collect();
            let enc = &encoder;
            let base = &base;
            let results = crate::parallel::map(jobs, |(i, flip)| -> Result<(f64, GradMap<f32>)> {
                let mut g = Graph::new();
                let bound = enc.params.bind(&mut g, &["encoder.", "cam."]);
                let img = &dataset.samples[i].image;
                let img = if flip { img.hflip() } else { img.clone() };
                let x = g.constant(image_tensor(&img));
                let (_, high) = enc.forward(&mut g, &bound, x)?;
                let pooled = g.global_avg_pool(high)?;
                let logits = g.linear(pooled, bound.var(CAM_WEIGHT)?, Some(bound.var(CAM_BIAS)?))?;
                let flat = g.reshape(logits, vec![base.len()])?;
                let loss = g.bce_with_logits(flat, &targets::<f32>(dataset, i, base))?;
                let mut grads = g.backward(loss)?;
                Ok((g.value(loss).data()[0] as f64, bound.collect(&mut grads)))
            });
            let mut acc = GradMap::new();
            for r in results {
                let (l, grads) = r?;
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        term: "pretrain".into(),
                        epoch,
                    });
                }
                total += l;
                accumulate(&mut acc, grads);
            }
            scale_grads(&mut acc, 1.0 / batch.len() as f32);
            opt.step(&mut encoder.params, &acc);
        }
        let mean = total / train.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    encoder.set_frozen(true);
    let (acc, n) = holdout_accuracy(&encoder, dataset, &held)?;
    Ok((
        encoder,
        PretrainReport {
            epoch_losses,
            holdout_accuracy: acc,
            holdout_size: n,
        },
    ))
}
