//! Episodic evaluation: IoU bookkeeping, the evaluation protocol, ablation runs,
//! and qualitative panels.

mod ablation;
mod viz;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablation::{ablation_run, summarize, summary_csv, AblationConfig, AblationRow, AblationSummary};
pub use viz::{panel, render_panels, visualize};

use crate::episodes::{sample_episode, Dataset, Episode, EpisodeMode};
use crate::error::{Error, Result};
use crate::model::{FeatureCache, Model};
use crate::numerics::Scalar;

/// `|pred ∧ gt| / |pred ∨ gt|`, with 1 when both are empty.
pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("iou", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (p, g) in pred.iter().zip(gt) {
        let (p, g) = (*p != 0, *g != 0);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Integer intersection/union tallies per class plus aggregate foreground/background.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    pub per_class: BTreeMap<usize, (u64, u64)>,
    pub fg: (u64, u64),
    pub bg: (u64, u64),
    pub episodes: u64,
    pub pixels: u64,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: usize, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("ConfusionAccumulator::add", format!("{} vs {}", pred.len(), gt.len())));
        }
        let (mut fi, mut fu, mut bi, mut bu) = (0u64, 0u64, 0u64, 0u64);
        for (p, g) in pred.iter().zip(gt) {
            let (p, g) = (*p != 0, *g != 0);
            fi += (p && g) as u64;
            fu += (p || g) as u64;
            bi += (!p && !g) as u64;
            bu += (!p || !g) as u64;
        }
        let entry = self.per_class.entry(class).or_insert((0, 0));
        entry.0 += fi;
        entry.1 += fu;
        self.fg.0 += fi;
        self.fg.1 += fu;
        self.bg.0 += bi;
        self.bg.1 += bu;
        self.episodes += 1;
        self.pixels += pred.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (c, (i, u)) in &other.per_class {
            let e = self.per_class.entry(*c).or_insert((0, 0));
            e.0 += i;
            e.1 += u;
        }
        self.fg.0 += other.fg.0;
        self.fg.1 += other.fg.1;
        self.bg.0 += other.bg.0;
        self.bg.1 += other.bg.1;
        self.episodes += other.episodes;
        self.pixels += other.pixels;
    }

    pub fn class_iou(&self, class: usize) -> Option<f64> {
        self.per_class
            .get(&class)
            .map(|&(i, u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
    }

    /// Mean class IoU over `classes` present in the tally, and the missing ones.
    pub fn miou(&self, classes: &[usize]) -> (f64, Vec<usize>) {
        let mut sum = 0.0;
        let mut n = 0;
        let mut missing = Vec::new();
        for &c in classes {
            match self.class_iou(c) {
                Some(v) => {
                    sum += v;
                    n += 1;
                }
                None => missing.push(c),
            }
        }
        (if n == 0 { 0.0 } else { sum / n as f64 }, missing)
    }

    /// Mean of aggregate foreground and background IoU.
    pub fn fbiou(&self) -> f64 {
        let ratio = |(i, u): (u64, u64)| if u == 0 { 1.0 } else { i as f64 / u as f64 };
        0.5 * (ratio(self.fg) + ratio(self.bg))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub fbiou: f64,
    /// Per evaluated class; `None` when no episode sampled it.
    pub per_class: Vec<(usize, Option<f64>)>,
    pub episodes: usize,
}

/// Deterministic episode list over `classes`.
pub fn sample_episodes(dataset: &Dataset, classes: &[usize], fold: usize, shots: usize, count: usize, seed: u64) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| sample_episode(dataset, classes, fold, shots, EpisodeMode::Eval, &mut rng))
        .collect()
}

/// Scores `episodes` with any predictor returning `S×S` binary masks.
pub fn score_episodes<F>(episodes: &[Episode], classes: &[usize], predict: F) -> Result<(EvalReport, ConfusionAccumulator)>
where
    F: Fn(&Episode) -> Result<Vec<u8>> + Sync + Send,
{
    let preds = crate::parallel::map(episodes.iter().collect(), |ep: &Episode| predict(ep));
    let mut acc = ConfusionAccumulator::new();
    for (ep, pred) in episodes.iter().zip(preds) {
        let gt = ep
            .query_mask
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("evaluation episode lacks a query mask".into()))?;
        acc.add(ep.class_id, &pred?, &gt.data)?;
    }
    let (miou, missing) = acc.miou(classes);
    if !missing.is_empty() {
        log::warn!("classes {missing:?} never sampled; excluded from mIoU");
    }
    let report = EvalReport {
        miou,
        fbiou: acc.fbiou(),
        per_class: classes.iter().map(|&c| (c, acc.class_iou(c))).collect(),
        episodes: episodes.len(),
    };
    Ok((report, acc))
}

/// The evaluation protocol: `count` seeded `shots`-shot episodes over `classes`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    classes: &[usize],
    fold: usize,
    shots: usize,
    count: usize,
    seed: u64,
    cache: Option<&FeatureCache<T>>,
) -> Result<EvalReport> {
    let episodes = sample_episodes(dataset, classes, fold, shots, count, seed)?;
    let (report, _) = score_episodes(&episodes, classes, |ep| Ok(model.predict(ep, cache)?.mask))?;
    Ok(report)
}

/// Results CSV header: fixed columns then one IoU column per class name.
pub fn results_header(class_names: &[String]) -> String {
    let mut h = String::from("fold,variant,seed,miou,fbiou");
    for n in class_names {
        h.push(',');
        h.push_str(n);
    }
    h
}

pub fn results_row(fold: usize, variant: &str, seed: u64, report: &EvalReport) -> String {
    let mut r = format!("{fold},{variant},{seed},{:.6},{:.6}", report.miou, report.fbiou);
    for (_, v) in &report.per_class {
        r.push(',');
        if let Some(v) = v {
            r.push_str(&format!("{v:.6}"));
        }
    }
    r
}
