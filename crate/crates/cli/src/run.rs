use std::fmt;
use std::path::{Path, PathBuf};

use ocnet_core::config::{KeyValues, KvConfig};
use ocnet_core::encoder::{pretrain_encoder, Encoder, EncoderConfig, PretrainConfig};
use ocnet_core::episodes::{generate_synthetic, ingest_folder, make_folds, ClassSplit, Dataset, SynthConfig};
use ocnet_core::eval::{ablation_run, evaluate, results_header, results_row, sample_episodes, summarize, visualize, AblationConfig};
use ocnet_core::model::{Model, ModelConfig, Variant};
use ocnet_core::trainer::{self, Checkpoint, RunOutput, TrainConfig};

use crate::{Cli, Command, DataArgs};

const CONFIG_FILE: &str = "config.txt";
const DEFAULT_VARIANTS: &str = "baseline,gomm_only,ccm_only,full";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, keys or values.
    Usage(String),
    Runtime(ocnet_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<ocnet_core::Error> for CliError {
    fn from(e: ocnet_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: ocnet_core::Error) -> CliError {
    CliError::Usage(e.to_string())
}

/// Built-in value of every key the CLI accepts.
fn defaults() -> KeyValues {
    let mut kv = KeyValues::new();
    ModelConfig::default().write_kv(&mut kv);
    TrainConfig::default().write_kv(&mut kv);
    PretrainConfig::default().write_kv(&mut kv);
    SynthConfig::default().write_kv(&mut kv);
    kv.set("encoder.base_classes", "");
    kv.set("run.command", "");
    kv.set("run.fold", 0);
    kv.set("data.root", "");
    kv.set("eval.episodes", 1000);
    kv.set("eval.seed", 1);
    kv.set("ablate.seeds", 5);
    kv.set("ablate.variants", DEFAULT_VARIANTS);
    kv.set("viz.count", 4);
    kv
}

fn check_known(kv: &KeyValues, known: &KeyValues, origin: &str) -> Result<()> {
    match kv.keys().find(|k| !known.contains(k)) {
        Some(k) => Err(CliError::Usage(format!("unknown config key `{k}` in {origin}"))),
        None => Ok(()),
    }
}

/// Settings of one invocation after every layer has been applied.
pub struct RunConfig {
    pub kv: KeyValues,
}

impl RunConfig {
    /// Layers defaults, an optional checkpoint config, `--config`, `flags` and
    /// `--set`, rejecting unknown keys.
    fn resolve(cli: &Cli, command: &str, checkpoint: Option<&KeyValues>, flags: &[(&str, Option<String>)]) -> Result<Self> {
        let known = defaults();
        let mut kv = known.clone();
        if let Some(c) = checkpoint {
            kv.merge(c);
        }
        if let Some(path) = &cli.config {
            let file = KeyValues::load(path).map_err(usage)?;
            check_known(&file, &known, &path.display().to_string())?;
            kv.merge(&file);
        }
        for (key, value) in flags {
            if let Some(v) = value {
                kv.set(key, v);
            }
        }
        let mut extra = KeyValues::new();
        for item in &cli.overrides {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
            extra.set(k.trim(), v.trim());
        }
        check_known(&extra, &known, "--set")?;
        kv.merge(&extra);
        kv.set("run.command", command);
        let rc = Self { kv };
        // Parse everything once so bad values surface as usage errors.
        rc.model()?;
        rc.train()?;
        rc.pretrain()?;
        rc.synth()?;
        rc.fold()?;
        Ok(rc)
    }

    fn model(&self) -> Result<ModelConfig> {
        ModelConfig::read_kv(&self.kv).map_err(usage)
    }

    fn train(&self) -> Result<TrainConfig> {
        TrainConfig::read_kv(&self.kv).map_err(usage)
    }

    fn pretrain(&self) -> Result<PretrainConfig> {
        PretrainConfig::read_kv(&self.kv).map_err(usage)
    }

    fn synth(&self) -> Result<SynthConfig> {
        SynthConfig::read_kv(&self.kv).map_err(usage)
    }

    fn fold(&self) -> Result<usize> {
        self.get("run.fold")
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.kv
            .get(key)
            .map_err(usage)?
            .ok_or_else(|| CliError::Usage(format!("missing config key `{key}`")))
    }

    fn dataset(&self) -> Result<Dataset> {
        let root: String = self.get("data.root")?;
        if root.is_empty() {
            Ok(generate_synthetic(&self.synth()?)?)
        } else {
            Ok(ingest_folder(Path::new(&root))?)
        }
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ocnet_core::Error::io(dir, e))?;
        Ok(self.kv.save(&dir.join(CONFIG_FILE))?)
    }
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn data_flags(d: &DataArgs) -> Vec<(&'static str, Option<String>)> {
    vec![("data.root", d.data.as_ref().map(|p| p.display().to_string())), ("run.fold", s(&d.fold))]
}

fn split_of(ds: &Dataset, rc: &RunConfig) -> Result<ClassSplit> {
    Ok(make_folds(ds.num_classes(), rc.fold()?)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    Ok(Checkpoint::<f32>::load(&trainer::resolve_checkpoint_path(path))?)
}

/// Loads `--encoder` when given, otherwise pretrains and stores `encoder.ckpt` in `out`.
fn obtain_encoder(rc: &RunConfig, ds: &Dataset, split: &ClassSplit, path: Option<&PathBuf>, out: &Path) -> Result<Encoder<f32>> {
    if let Some(p) = path {
        let encoder = trainer::encoder_from_checkpoint(&load_checkpoint(p)?)?;
        let mut base = split.train_classes.clone();
        base.sort_unstable();
        if encoder.base_classes != base {
            return Err(CliError::Runtime(ocnet_core::Error::Config(format!(
                "encoder was pretrained on classes {:?}, fold {} uses {:?}",
                encoder.base_classes, split.fold, base
            ))));
        }
        return Ok(encoder);
    }
    pretrain_into(rc, ds, split, out)
}

fn pretrain_into(rc: &RunConfig, ds: &Dataset, split: &ClassSplit, out: &Path) -> Result<Encoder<f32>> {
    let enc_cfg: EncoderConfig = rc.model()?.encoder;
    let pre = rc.pretrain()?;
    let (encoder, report) = pretrain_encoder(ds, &split.train_classes, &enc_cfg, &pre)?;
    log::info!(
        "encoder pretrained: held-out accuracy {:.3} over {} images",
        report.holdout_accuracy,
        report.holdout_size
    );
    std::fs::create_dir_all(out).map_err(|e| ocnet_core::Error::io(out, e))?;
    let mut ckpt = trainer::encoder_checkpoint(&encoder, &pre);
    let mut config = rc.kv.clone();
    config.merge(&ckpt.config);
    ckpt.config = config;
    ckpt.save(&out.join("encoder.ckpt"))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:.8}\n", i + 1));
    }
    let path = out.join("pretrain.csv");
    std::fs::write(&path, csv).map_err(|e| ocnet_core::Error::io(&path, e))?;
    Ok(encoder)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        if !ocnet_core::parallel::set_threads(n) {
            log::warn!("--threads {n} ignored: built without parallelism or pool already running");
        }
    }
    match &cli.command {
        Command::GenData(a) => {
            let rc = RunConfig::resolve(
                cli,
                "gen-data",
                None,
                &[
                    ("synth.seed", s(&a.seed)),
                    ("synth.num_classes", s(&a.classes)),
                    ("synth.images_per_class", s(&a.images_per_class)),
                ],
            )?;
            let ds = generate_synthetic(&rc.synth()?)?;
            ds.save_folder(&a.out)?;
            rc.echo(&a.out)?;
            println!("wrote {} images of {} classes to {}", ds.len(), ds.num_classes(), a.out.display());
        }
        Command::Pretrain(a) => {
            let mut flags = data_flags(&a.data);
            flags.extend([("pretrain.seed", s(&a.seed)), ("pretrain.epochs", s(&a.epochs))]);
            let rc = RunConfig::resolve(cli, "pretrain", None, &flags)?;
            let ds = rc.dataset()?;
            let split = split_of(&ds, &rc)?;
            rc.echo(&a.out)?;
            pretrain_into(&rc, &ds, &split, &a.out)?;
            println!("encoder checkpoint: {}", a.out.join("encoder.ckpt").display());
        }
        Command::Train(a) => {
            let mut flags = data_flags(&a.data);
            flags.extend([
                ("train.shots", s(&a.k)),
                ("train.seed", s(&a.seed)),
                ("model.variant", a.variant.clone()),
                ("train.epochs", s(&a.epochs)),
                ("train.episodes_per_epoch", s(&a.episodes_per_epoch)),
                ("train.lr", s(&a.lr)),
            ]);
            let rc = RunConfig::resolve(cli, "train", None, &flags)?;
            let ds = rc.dataset()?;
            let split = split_of(&ds, &rc)?;
            rc.echo(&a.out)?;
            let encoder = obtain_encoder(&rc, &ds, &split, a.encoder.as_ref(), &a.out)?;
            let train_cfg = rc.train()?;
            let model = Model::new(rc.model()?, encoder, train_cfg.seed)?;
            let output = RunOutput {
                dir: a.out.clone(),
                provenance: rc.kv.clone(),
            };
            let outcome = trainer::train(model, &ds, &split, &train_cfg, None, Some(&output))?;
            println!(
                "trained {} for {} epochs; best val mIoU {:.4} at epoch {}; checkpoints in {}",
                outcome.last.variant(),
                train_cfg.epochs,
                outcome.best_miou,
                outcome.best_epoch,
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let mut flags = data_flags(&a.data);
            flags.extend([("train.shots", s(&a.k)), ("eval.episodes", s(&a.episodes)), ("eval.seed", s(&a.seed))]);
            let rc = RunConfig::resolve(cli, "eval", Some(&ckpt.config), &flags)?;
            let model = trainer::from_checkpoint(&ckpt)?;
            let ds = rc.dataset()?;
            let split = split_of(&ds, &rc)?;
            rc.echo(&a.out)?;
            let seed: u64 = rc.get("eval.seed")?;
            let report = evaluate(
                &model,
                &ds,
                &split.test_classes,
                split.fold,
                rc.train()?.shots,
                rc.get("eval.episodes")?,
                seed,
                None,
            )?;
            let names: Vec<String> = split.test_classes.iter().map(|&c| ds.class_names[c].clone()).collect();
            let csv = format!("{}\n{}\n", results_header(&names), results_row(split.fold, model.variant().name(), seed, &report));
            let path = a.out.join("results.csv");
            std::fs::write(&path, csv).map_err(|e| ocnet_core::Error::io(&path, e))?;
            println!("{}: mIoU {:.4} FB-IoU {:.4} over {} episodes", model.variant(), report.miou, report.fbiou, report.episodes);
        }
        Command::Ablate(a) => {
            let mut flags = data_flags(&a.data);
            flags.extend([
                ("train.shots", s(&a.k)),
                ("ablate.seeds", s(&a.seeds)),
                ("ablate.variants", a.variants.clone()),
                ("train.epochs", s(&a.epochs)),
                ("train.episodes_per_epoch", s(&a.episodes_per_epoch)),
                ("eval.episodes", s(&a.episodes)),
            ]);
            let rc = RunConfig::resolve(cli, "ablate", None, &flags)?;
            let variants: Vec<Variant> = rc
                .kv
                .get_list::<Variant>("ablate.variants")
                .map_err(usage)?
                .unwrap_or_default();
            let seeds: usize = rc.get("ablate.seeds")?;
            let ds = rc.dataset()?;
            let split = split_of(&ds, &rc)?;
            rc.echo(&a.out)?;
            let encoder = obtain_encoder(&rc, &ds, &split, a.encoder.as_ref(), &a.out)?;
            let config = AblationConfig {
                variants,
                seeds: (0..seeds as u64).collect(),
                model: rc.model()?,
                train: rc.train()?,
                eval_episodes: rc.get("eval.episodes")?,
                eval_seed: rc.get("eval.seed")?,
                provenance: rc.kv.clone(),
            };
            let rows = ablation_run(&ds, &split, &encoder, &config, Some(&a.out))?;
            println!("variant,runs,miou_mean,miou_std");
            for r in summarize(&rows) {
                println!("{},{},{:.4},{:.4}", r.variant, r.runs, r.mean_miou, r.std_miou);
            }
        }
        Command::Viz(a) => {
            let ckpt = load_checkpoint(&a.ckpt)?;
            let mut flags = data_flags(&a.data);
            flags.extend([("train.shots", s(&a.k)), ("eval.seed", s(&a.seed)), ("viz.count", s(&a.count))]);
            let rc = RunConfig::resolve(cli, "viz", Some(&ckpt.config), &flags)?;
            let model = trainer::from_checkpoint(&ckpt)?;
            let ds = rc.dataset()?;
            let split = split_of(&ds, &rc)?;
            rc.echo(&a.out)?;
            let count: usize = rc.get("viz.count")?;
            let episodes = sample_episodes(&ds, &split.test_classes, split.fold, rc.train()?.shots, count, rc.get("eval.seed")?)?;
            for (i, ep) in episodes.iter().enumerate() {
                visualize(&model, ep, None, &a.out.join(format!("episode_{i:03}.png")))?;
            }
            println!("wrote {} panels to {}", episodes.len(), a.out.display());
        }
    }
    Ok(())
}
