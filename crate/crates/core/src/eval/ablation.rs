use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::Encoder;
use crate::episodes::{ClassSplit, Dataset};
use crate::error::{Error, Result};
use crate::model::{FeatureCache, Model, ModelConfig, Variant};
use crate::config::KeyValues;
use crate::trainer::{build_cache, train, RunOutput, TrainConfig};

use super::{evaluate, results_header, results_row, EvalReport};

#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Shared by every variant; `variant` is overwritten per row.
    pub model: ModelConfig,
    /// `seed` is overwritten per row.
    pub train: TrainConfig,
    pub eval_episodes: usize,
    /// Same evaluation episodes for every (variant, seed).
    pub eval_seed: u64,
    /// Echoed into every run directory.
    pub provenance: KeyValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub fold: usize,
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub variant: Variant,
    pub runs: usize,
    pub mean_miou: f64,
    pub std_miou: f64,
    pub mean_fbiou: f64,
    pub std_fbiou: f64,
}

/// Trains and evaluates every (variant, seed) on one frozen encoder. With `out_dir`,
/// `results.csv` is rewritten after each row and `summary.csv` at the end.
pub fn ablation_run(
    dataset: &Dataset,
    split: &ClassSplit,
    encoder: &Encoder<f32>,
    config: &AblationConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if config.variants.is_empty() || config.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let cache: FeatureCache<f32> = build_cache(encoder, dataset, split, config.train.flip)?;
    let header = results_header(&split.test_classes.iter().map(|&c| dataset.class_names[c].clone()).collect::<Vec<_>>());
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rows = Vec::new();
    let mut csv = header + "\n";
    for &variant in &config.variants {
        for &seed in &config.seeds {
            let model_cfg = ModelConfig {
                variant,
                ..config.model.clone()
            };
            let train_cfg = TrainConfig {
                seed,
                ..config.train.clone()
            };
            let model = Model::new(model_cfg, encoder.clone(), seed)?;
            let run = out_dir.map(|d| RunOutput {
                dir: d.join(format!("{variant}_seed{seed}")),
                provenance: config.provenance.clone(),
            });
            let outcome = train(model, dataset, split, &train_cfg, Some(&cache), run.as_ref())?;
            let report = evaluate(
                &outcome.last,
                dataset,
                &split.test_classes,
                split.fold,
                train_cfg.shots,
                config.eval_episodes,
                config.eval_seed,
                Some(&cache),
            )?;
            log::info!("ablation {variant} seed {seed}: mIoU {:.4} FB-IoU {:.4}", report.miou, report.fbiou);
            let row = AblationRow {
                fold: split.fold,
                variant,
                seed,
                report,
            };
            csv.push_str(&results_row(row.fold, variant.name(), seed, &row.report));
            csv.push('\n');
            if let Some(dir) = out_dir {
                let path = dir.join("results.csv");
                std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            }
            rows.push(row);
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("summary.csv");
        std::fs::write(&path, summary_csv(&summarize(&rows))).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation per variant, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut order: Vec<Variant> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant).collect();
            let (mean_miou, std_miou) = mean_std(&sel.iter().map(|r| r.report.miou).collect::<Vec<_>>());
            let (mean_fbiou, std_fbiou) = mean_std(&sel.iter().map(|r| r.report.fbiou).collect::<Vec<_>>());
            AblationSummary {
                variant,
                runs: sel.len(),
                mean_miou,
                std_miou,
                mean_fbiou,
                std_fbiou,
            }
        })
        .collect()
}

pub fn summary_csv(summary: &[AblationSummary]) -> String {
    let mut s = String::from("variant,runs,miou_mean,miou_std,fbiou_mean,fbiou_std\n");
    for r in summary {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.variant.name(),
            r.runs,
            r.mean_miou,
            r.std_miou,
            r.mean_fbiou,
            r.std_fbiou
        );
    }
    s
}
