//! Quick ablation on the synthetic benchmark, sized by environment variables:
//! `EPOCHS`, `EPISODES`, `EVAL`, `SEEDS`, `VARIANTS` (comma list), `LR`, `WD`, `DROP`,
//! `VAL` (validation episodes per epoch), `SEED0` (first seed), `OUT` (run directories).

use std::time::Instant;

use ocnet_core::encoder::{pretrain_encoder, EncoderConfig, PretrainConfig};
use ocnet_core::episodes::{generate_synthetic, make_folds, SynthConfig};
use ocnet_core::eval::{ablation_run, summarize, AblationConfig};
use ocnet_core::model::{ModelConfig, Variant};
use ocnet_core::trainer::TrainConfig;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> ocnet_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let ds = generate_synthetic(&SynthConfig::default())?;
    let split = make_folds(ds.num_classes(), 0)?;
    let t0 = Instant::now();
    let (encoder, report) = pretrain_encoder(&ds, &split.train_classes, &EncoderConfig::default(), &PretrainConfig::default())?;
    eprintln!("pretrain {:?}, held-out accuracy {:.3}", t0.elapsed(), report.holdout_accuracy);

    let variants: Vec<Variant> = env("VARIANTS", "baseline,gomm_only,ccm_only,full".to_string())
        .split(',')
        .map(|v| v.parse())
        .collect::<ocnet_core::Result<_>>()?;
    let seed0 = env("SEED0", 0u64);
    let seeds: Vec<u64> = (seed0..seed0 + env("SEEDS", 1u64)).collect();
    let train = TrainConfig {
        epochs: env("EPOCHS", 10),
        episodes_per_epoch: env("EPISODES", 100),
        val_episodes: env("VAL", 0),
        lr: env("LR", 0.005),
        weight_decay: env("WD", 0.0),
        ..TrainConfig::default()
    };
    let config = AblationConfig {
        variants,
        seeds,
        model: ModelConfig {
            decoder_dropout: env("DROP", ModelConfig::default().decoder_dropout),
            ..ModelConfig::default()
        },
        train,
        eval_episodes: env("EVAL", 250),
        eval_seed: 1000,
        provenance: Default::default(),
    };
    let t1 = Instant::now();
    let out: Option<std::path::PathBuf> = std::env::var("OUT").ok().map(Into::into);
    let rows = ablation_run(&ds, &split, &encoder, &config, out.as_deref())?;
    for r in &rows {
        eprintln!("{} seed {}: mIoU {:.4}", r.variant, r.seed, r.report.miou);
    }
    for s in summarize(&rows) {
        eprintln!("{}: {:.4} ± {:.4}", s.variant, s.mean_miou, s.std_miou);
    }
    eprintln!("ablation {:?}", t1.elapsed());
    Ok(())
}
