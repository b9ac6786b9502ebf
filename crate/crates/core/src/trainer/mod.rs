//! Episodic training of the few-shot segmenter, loss composition, decoder, and
//! checkpoint persistence.

pub mod checkpoint;
pub mod decoder;
pub mod loss;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{KeyValues, KvConfig};
use crate::encoder::Encoder;
use crate::episodes::{sample_episode, ClassSplit, Dataset, EpisodeMode};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{FeatureCache, Model, ModelConfig};
use crate::model::Prepared;
use crate::numerics::{grad_check, GradCheckReport, Graph, Scalar, Tensor, Var};
use crate::optim::Sgd;
use crate::params::{accumulate, scale_grads, Bound, GradMap, ParamStore};

pub use checkpoint::{Checkpoint, RngState};
pub use loss::{total_loss, LossTerms, LossToggles, Supervision};

pub const METRICS_HEADER: &str = "epoch,loss_t,loss_g,loss_p,val_miou";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub shots: usize,
    pub seed: u64,
    /// Validation episodes per epoch; 0 disables validation.
    pub val_episodes: usize,
    pub flip: bool,
    /// Poly decay exponent: `lr · (1 − step/steps)^lr_power`; 0 keeps `lr` fixed.
    pub lr_power: f64,
    /// L2 penalty folded into the SGD update.
    pub weight_decay: f64,
    /// Intersected with the variant's own terms.
    pub toggles: LossToggles,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            momentum: 0.9,
            batch_size: 4,
            epochs: 40,
            episodes_per_epoch: 100,
            shots: 1,
            seed: 0,
            val_episodes: 100,
            flip: true,
            lr_power: 0.9,
            weight_decay: 0.0,
            toggles: LossToggles::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 || self.shots == 0 {
            return Err(Error::Config("batch_size and shots must be at least 1".into()));
        }
        if !(self.lr_power >= 0.0) {
            return Err(Error::Config("lr_power must be non-negative".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate of optimisation step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if self.lr_power == 0.0 || total == 0 {
            return self.lr;
        }
        self.lr * (1.0 - step as f64 / total as f64).max(0.0).powf(self.lr_power)
    }

    /// Seed of the validation episode stream (disjoint from the test stream).
    pub fn val_seed(&self) -> u64 {
        self.seed.wrapping_add(0x5eed_0000_0001)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_t: f64,
    pub loss_g: f64,
    pub loss_p: f64,
    pub val_miou: f64,
    /// Episodes whose allocation target was skipped for an empty region.
    pub degenerate: usize,
}

impl EpochMetrics {
    pub fn total(&self) -> f64 {
        self.loss_t + self.loss_g + self.loss_p
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.6}",
            self.epoch, self.loss_t, self.loss_g, self.loss_p, self.val_miou
        )
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = writeln!(s, "{}", m.csv_row());
    }
    s
}

pub struct TrainOutcome<T> {
    pub last: Model<T>,
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub metrics: Vec<EpochMetrics>,
    pub rng: RngState,
}

/// Every class index whose samples a run touches, for cache building.
pub fn cache_indices(dataset: &Dataset, classes: &[usize]) -> Vec<usize> {
    classes.iter().flat_map(|&c| dataset.samples_of(c).iter().copied()).collect()
}

/// Frozen features of the training classes (with mirrors when `flip`) and the test
/// classes.
pub fn build_cache<T: Scalar>(encoder: &Encoder<T>, dataset: &Dataset, split: &ClassSplit, flip: bool) -> Result<FeatureCache<T>> {
    let mut cache = FeatureCache::build(encoder, dataset, &cache_indices(dataset, &split.train_classes), flip)?;
    let test = FeatureCache::build(encoder, dataset, &cache_indices(dataset, &split.test_classes), false)?;
    cache.extend(test);
    Ok(cache)
}

/// Losses of one episode, plus gradients of the trainable parameters.
pub struct StepResult<T> {
    pub terms: [f64; 3],
    pub grads: GradMap<T>,
    pub degenerate: bool,
}

/// Builds, differentiates and discards the graph for one episode. `dropout_seed`
/// enables decoder dropout when the model configures it.
pub fn episode_step<T: Scalar>(
    model: &Model<T>,
    episode: &crate::episodes::Episode,
    cache: Option<&FeatureCache<T>>,
    toggles: LossToggles,
    dropout_seed: Option<u64>,
) -> Result<StepResult<T>> {
    let mut prep = model.prepare(episode, cache)?;
    prep.dropout_seed = dropout_seed;
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.forward(&mut g, &bound, &prep, toggles)?;
    let terms = out
        .loss
        .ok_or_else(|| Error::InvalidArgument("training episode lacks a query mask".into()))?;
    let value = |v: Option<crate::numerics::Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
    let values = [value(terms.target), value(terms.general), value(terms.allocation)];
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        // The caller knows the epoch.
        return Err(Error::NonFiniteLoss {
            term: TERM_NAMES[i].into(),
            epoch: 0,
        });
    }
    let mut grads = g.backward(terms.total)?;
    let grads = bound.collect(&mut grads);
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{name}`")));
    }
    Ok(StepResult {
        terms: values,
        grads,
        degenerate: prep.degenerate,
    })
}

const TERM_NAMES: [&str; 3] = ["L_t", "L_g", "L_p"];

/// Loss term differentiated by [`loss_grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Target,
    General,
    Allocation,
    Total,
}

/// Finite-difference check of one loss term of a prepared episode against every
/// parameter the variant trains. Errors when the variant lacks the term.
pub fn loss_grad_check(
    model: &Model<f64>,
    prep: &Prepared<f64>,
    term: LossTerm,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let prefixes = model.variant().prefixes();
    let (names, params): (Vec<String>, Vec<Tensor<f64>>) = model
        .params
        .iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(n, t)| (n.clone(), t.clone()))
        .unzip();
    let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let out = model.forward(g, &bound, prep, LossToggles::ALL)?;
        let terms = out
            .loss
            .ok_or_else(|| Error::InvalidArgument("episode lacks a query mask".into()))?;
        let v = match term {
            LossTerm::Target => terms.target,
            LossTerm::General => terms.general,
            LossTerm::Allocation => terms.allocation,
            LossTerm::Total => Some(terms.total),
        };
        v.ok_or_else(|| Error::InvalidArgument(format!("{term:?} loss is absent for {}", model.variant())))
    };
    // eps^(1/3) balances round-off against truncation for central differences in f64.
    // Much wider steps start flipping the argmax allocations, which are piecewise constant.
    grad_check(build, &params, 6e-6, max_coords, seed)
}

/// Where a run writes its artifacts, plus keys echoed alongside the resolved config.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub provenance: KeyValues,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            provenance: KeyValues::new(),
        }
    }
}

/// SGD over sampled base-class episodes. With `output`, writes `config.txt`,
/// `metrics.csv` (after every epoch), `best.ckpt` and `last.ckpt`.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    dataset: &Dataset,
    split: &ClassSplit,
    config: &TrainConfig,
    cache: Option<&FeatureCache<T>>,
    output: Option<&RunOutput>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let owned;
    let cache = match cache {
        Some(c) => c,
        None => {
            owned = build_cache(&model.encoder, dataset, split, config.flip)?;
            &owned
        }
    };
    let variant_toggles = model.variant().toggles();
    let toggles = LossToggles {
        target: config.toggles.target && variant_toggles.target,
        general: config.toggles.general && variant_toggles.general,
        allocation: config.toggles.allocation && variant_toggles.allocation,
    };
    let mut resolved = output.map(|o| o.provenance.clone()).unwrap_or_default();
    resolved.merge(&run_config(&model.config, config, &model.encoder.base_classes, split.fold));
    let out_dir = output.map(|o| o.dir.as_path());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        resolved.save(&dir.join("config.txt"))?;
    }
    let encoder_before = model.encoder.params.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Sgd::new(config.lr, config.momentum).with_weight_decay(config.weight_decay);
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let total_steps = config.epochs * config.episodes_per_epoch.div_ceil(config.batch_size);
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut sums = [0.0; 3];
        let mut degenerate = 0;
        let mut seen = 0;
        while seen < config.episodes_per_epoch {
            let n = config.batch_size.min(config.episodes_per_epoch - seen);
            let mut batch = Vec::with_capacity(n);
            for _ in 0..n {
                let mut ep = sample_episode(dataset, &split.train_classes, split.fold, config.shots, EpisodeMode::Train, &mut rng)?;
                if config.flip {
                    if rng.random_bool(0.5) {
                        ep.flip_query();
                    }
                    for k in 0..ep.shots() {
                        if rng.random_bool(0.5) {
                            ep.flip_support(k);
                        }
                    }
                }
                batch.push((ep, rng.random::<u64>()));
            }
            let m = &model;
            let results = crate::parallel::map(batch, |(ep, seed)| episode_step(m, &ep, Some(cache), toggles, Some(seed)));
            let mut acc = GradMap::new();
            for r in results {
                let r = r.map_err(|e| match e {
                    Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss { term, epoch },
                    e => e,
                })?;
                for (sum, v) in sums.iter_mut().zip(r.terms) {
                    *sum += v;
                }
                degenerate += r.degenerate as usize;
                accumulate(&mut acc, r.grads);
            }
            scale_grads(&mut acc, T::one() / T::lit(n as f64));
            opt.lr = config.lr_at(step, total_steps);
            step += 1;
            opt.step(&mut model.params, &acc);
            seen += n;
        }
        let denom = config.episodes_per_epoch.max(1) as f64;
        let val_miou = if config.val_episodes > 0 {
            evaluate(&model, dataset, &split.test_classes, split.fold, config.shots, config.val_episodes, config.val_seed(), Some(cache))?.miou
        } else {
            0.0
        };
        let em = EpochMetrics {
            epoch,
            loss_t: sums[0] / denom,
            loss_g: sums[1] / denom,
            loss_p: sums[2] / denom,
            val_miou,
            degenerate,
        };
        log::info!(
            "{} epoch {epoch}: L_t {:.4} L_g {:.4} L_p {:.4} val mIoU {:.4} ({degenerate} degenerate)",
            model.variant(),
            em.loss_t,
            em.loss_g,
            em.loss_p,
            em.val_miou
        );
        csv.push_str(&em.csv_row());
        csv.push('\n');
        metrics.push(em);
        if best.as_ref().is_none_or(|(b, _, _)| val_miou > *b) {
            best = Some((val_miou, epoch, model.params.clone()));
        }
        if let Some(dir) = out_dir {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        }
    }
    if model.encoder.params != encoder_before {
        return Err(Error::InvalidArgument("frozen encoder weights changed during training".into()));
    }
    let rng_state = RngState::capture(&rng);
    let (best_miou, best_epoch, best_params) = best.unwrap_or((0.0, 0, model.params.clone()));
    let best_model = Model {
        params: best_params,
        ..model.clone()
    };
    if let Some(dir) = out_dir {
        if config.epochs == 0 {
            let path = dir.join("metrics.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        }
        to_checkpoint(&best_model, &resolved, rng_state).save(&dir.join("best.ckpt"))?;
        to_checkpoint(&model, &resolved, rng_state).save(&dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        last: model,
        best: best_model,
        best_epoch,
        best_miou,
        metrics,
        rng: rng_state,
    })
}

/// Resolved key=value view of a run.
pub fn run_config(model: &ModelConfig, train: &TrainConfig, base_classes: &[usize], fold: usize) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("run.fold", fold);
    model.write_kv(&mut kv);
    train.write_kv(&mut kv);
    kv.set_list("encoder.base_classes", base_classes);
    kv
}

/// Encoder and trainable parameters together with the run's resolved config.
pub fn to_checkpoint<T: Scalar>(model: &Model<T>, config: &KeyValues, rng: RngState) -> Checkpoint<T> {
    let mut params = model.encoder.params.clone();
    params.extend_from(&model.params, "");
    Checkpoint {
        params,
        config: config.clone(),
        rng,
    }
}

/// Copies every entry of `store` from `ckpt`, checking shapes and keeping the
/// trainable flags of `store`.
fn fill_from<T: Scalar>(store: &mut ParamStore<T>, ckpt: &ParamStore<T>) -> Result<()> {
    for (name, slot) in store.iter_mut() {
        let t = ckpt
            .get(name)
            .map_err(|_| Error::Config(format!("checkpoint lacks entry `{name}`")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Config(format!("checkpoint entry `{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape())));
        }
        let trainable = slot.requires_grad();
        *slot = t.clone().with_grad(trainable);
    }
    Ok(())
}

/// Frozen encoder stored in any checkpoint written by this crate.
pub fn encoder_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Encoder<T>> {
    let config = crate::encoder::EncoderConfig::read_kv(&ckpt.config)?;
    let base_classes: Vec<usize> = ckpt
        .config
        .get_list("encoder.base_classes")?
        .ok_or_else(|| Error::Config("checkpoint lacks encoder.base_classes".into()))?;
    let mut encoder = Encoder::<T>::new(config, base_classes, 0)?;
    fill_from(&mut encoder.params, &ckpt.params)?;
    encoder.set_frozen(true);
    Ok(encoder)
}

/// Encoder-only checkpoint, as written by pretraining.
pub fn encoder_checkpoint<T: Scalar>(encoder: &Encoder<T>, pretrain: &crate::encoder::PretrainConfig) -> Checkpoint<T> {
    let mut config = KeyValues::new();
    encoder.config.write_kv(&mut config);
    pretrain.write_kv(&mut config);
    config.set_list("encoder.base_classes", &encoder.base_classes);
    Checkpoint {
        params: encoder.params.clone(),
        config,
        rng: RngState::capture(&ChaCha8Rng::seed_from_u64(pretrain.seed)),
    }
}

/// Rebuilds a frozen-encoder model from a training checkpoint.
pub fn from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Model<T>> {
    let config = ModelConfig::read_kv(&ckpt.config)?;
    let encoder = encoder_from_checkpoint(ckpt)?;
    let mut model = Model::new(config, encoder, 0)?;
    fill_from(&mut model.params, &ckpt.params)?;
    Ok(model)
}

/// `path` itself, or `path.ckpt` when `path` does not exist.
pub fn resolve_checkpoint_path(path: &Path) -> std::path::PathBuf {
    if path.exists() {
        return path.to_path_buf();
    }
    let mut p = path.as_os_str().to_owned();
    p.push(".ckpt");
    p.into()
}

/// Loads a training checkpoint from `path` or `path.ckpt`.
pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_checkpoint(&Checkpoint::<T>::load(&resolve_checkpoint_path(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::make_folds;
    use crate::model::tests::{tiny_config, tiny_data};
    use crate::model::Variant;

    fn tiny(variant: Variant, ds: &Dataset, split: &ClassSplit) -> Model<f64> {
        let cfg = tiny_config(variant);
        let encoder = Encoder::new(cfg.encoder.clone(), split.train_classes.clone(), 1).unwrap();
        let _ = ds;
        Model::new(cfg, encoder, 2).unwrap()
    }

    fn short() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            episodes_per_epoch: 6,
            val_episodes: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..short() },
            TrainConfig { batch_size: 0, ..short() },
            TrainConfig { momentum: 1.0, ..short() },
            TrainConfig { weight_decay: -1.0, ..short() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn poly_schedule_decays_to_zero() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0, 100), c.lr);
        assert!(c.lr_at(50, 100) < c.lr);
        assert_eq!(c.lr_at(100, 100), 0.0);
        let flat = TrainConfig { lr_power: 0.0, ..c };
        assert_eq!(flat.lr_at(99, 100), flat.lr);
    }

    #[test]
    fn metrics_csv_layout() {
        let m = EpochMetrics {
            epoch: 3,
            loss_t: 0.5,
            loss_g: 0.25,
            loss_p: 0.0,
            val_miou: 0.125,
            degenerate: 0,
        };
        assert_eq!(metrics_csv(&[m]), "epoch,loss_t,loss_g,loss_p,val_miou\n3,0.50000000,0.25000000,0.00000000,0.125000\n");
        assert_eq!(m.total(), 0.75);
    }

    #[test]
    fn same_seed_same_run_and_frozen_encoder() {
        let ds = tiny_data();
        let split = make_folds(ds.num_classes(), 0).unwrap();
        let model = tiny(Variant::Full, &ds, &split);
        let a = train(model.clone(), &ds, &split, &short(), None, None).unwrap();
        let b = train(model.clone(), &ds, &split, &short(), None, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.last.params, b.last.params);
        assert_eq!(a.last.encoder, model.encoder);
        assert_ne!(a.last.params, model.params);
        let c = train(model, &ds, &split, &TrainConfig { seed: 1, ..short() }, None, None).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn run_output_round_trips_through_checkpoints() {
        let ds = tiny_data();
        let split = make_folds(ds.num_classes(), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = RunOutput::new(dir.path());
        let outcome = train(tiny(Variant::CcmOnly, &ds, &split), &ds, &split, &short(), None, Some(&out)).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, metrics_csv(&outcome.metrics));

        let last_path = dir.path().join("last.ckpt");
        let loaded: Model<f64> = load_model(&dir.path().join("last")).unwrap();
        assert_eq!(loaded, outcome.last);
        let best: Model<f64> = load_model(&dir.path().join("best.ckpt")).unwrap();
        assert_eq!(best, outcome.best);

        // save → load → save is byte-identical
        let bytes = std::fs::read(&last_path).unwrap();
        let again = dir.path().join("again.ckpt");
        Checkpoint::<f64>::load(&last_path).unwrap().save(&again).unwrap();
        assert_eq!(bytes, std::fs::read(&again).unwrap());

        let resolved = KeyValues::load(&dir.path().join("config.txt")).unwrap();
        assert_eq!(TrainConfig::read_kv(&resolved).unwrap(), short());
        assert_eq!(ModelConfig::read_kv(&resolved).unwrap(), outcome.last.config);

        let eval = |m: &Model<f64>| evaluate(m, &ds, &split.test_classes, 0, 1, 5, 77, None).unwrap();
        assert_eq!(eval(&loaded), eval(&outcome.last));
    }

    #[test]
    fn encoder_checkpoint_keeps_base_classes() {
        let ds = tiny_data();
        let split = make_folds(ds.num_classes(), 1).unwrap();
        let model = tiny(Variant::Baseline, &ds, &split);
        let ckpt = encoder_checkpoint(&model.encoder, &crate::encoder::PretrainConfig::default());
        let back: Encoder<f64> = encoder_from_checkpoint(&ckpt).unwrap();
        assert_eq!(back, model.encoder);
        assert_eq!(back.base_classes, split.train_classes);
        assert!(back.config.frozen);
    }

    #[test]
    fn nan_loss_names_the_term() {
        let ds = tiny_data();
        let split = make_folds(ds.num_classes(), 0).unwrap();
        let mut model = tiny(Variant::GommOnly, &ds, &split);
        // Finite weights whose logits overflow.
        for (name, t) in model.params.iter_mut() {
            if name.starts_with("decoder.") {
                t.data_mut().fill(1e300);
            }
        }
        match train(model, &ds, &split, &short(), None, None) {
            Err(Error::NonFiniteLoss { term, epoch }) => {
                assert_eq!(term, "L_t");
                assert_eq!(epoch, 1);
            }
            other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.metrics)),
        }
    }
}
