use rand::seq::{index, IndexedRandom};
use rand::Rng;

use crate::error::{Error, Result};

use super::{Dataset, Image, Mask};

/// Whether the sampled episode carries the query ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpisodeMode {
    Train,
    Eval,
    /// Query mask withheld.
    Inference,
}

/// Where an episode image came from; lets frozen-encoder features be looked up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub index: usize,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportShot {
    pub image: Image,
    pub mask: Mask,
    pub source: Option<SampleRef>,
}

/// One K-shot task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<SupportShot>,
    pub query_image: Image,
    pub query_mask: Option<Mask>,
    pub query_source: Option<SampleRef>,
    pub class_id: usize,
    pub fold_id: usize,
}

impl Episode {
    /// Checks the episode invariants: ≥1 shot, non-empty support masks, one image size.
    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() {
            return Err(Error::InvalidArgument("episode has no support shots".into()));
        }
        let (h, w) = (self.query_image.height, self.query_image.width);
        for (k, shot) in self.support.iter().enumerate() {
            if shot.image.height != h || shot.image.width != w || shot.mask.height != h || shot.mask.width != w {
                return Err(Error::InvalidArgument(format!("support shot {k} differs in size from the query")));
            }
            if shot.mask.count() == 0 {
                return Err(Error::InvalidArgument(format!("support mask {k} has no foreground")));
            }
        }
        if let Some(m) = &self.query_mask {
            if m.height != h || m.width != w {
                return Err(Error::InvalidArgument("query mask differs in size from the query".into()));
            }
        }
        Ok(())
    }

    pub fn shots(&self) -> usize {
        self.support.len()
    }

    /// Copy with the query ground truth removed, as seen by inference.
    pub fn without_query_mask(&self) -> Self {
        Self {
            query_mask: None,
            ..self.clone()
        }
    }

    pub fn flip_query(&mut self) {
        self.query_image = self.query_image.hflip();
        self.query_mask = self.query_mask.as_ref().map(Mask::hflip);
        if let Some(src) = &mut self.query_source {
            src.flipped = !src.flipped;
        }
    }

    pub fn flip_support(&mut self, shot: usize) {
        let s = &mut self.support[shot];
        s.image = s.image.hflip();
        s.mask = s.mask.hflip();
        if let Some(src) = &mut s.source {
            src.flipped = !src.flipped;
        }
    }
}

/// Draws one class from `classes` (among those with at least `k + 1` samples), then
/// `k` support samples and one query sample of it, all distinct.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    classes: &[usize],
    fold_id: usize,
    k: usize,
    mode: EpisodeMode,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let eligible: Vec<usize> = classes
        .iter()
        .copied()
        .filter(|&c| dataset.samples_of(c).len() > k)
        .collect();
    let &class_id = eligible.choose(rng).ok_or_else(|| {
        Error::Dataset(format!("no class in {classes:?} has {} or more samples", k + 1))
    })?;
    let pool = dataset.samples_of(class_id);
    let picks = index::sample(rng, pool.len(), k + 1).into_vec();
    let support = picks[..k]
        .iter()
        .map(|&p| {
            let s = &dataset.samples[pool[p]];
            SupportShot {
                image: s.image.clone(),
                mask: s.mask.clone(),
                source: Some(SampleRef {
                    index: pool[p],
                    flipped: false,
                }),
            }
        })
        .collect();
    let query_index = pool[picks[k]];
    let query = &dataset.samples[query_index];
    let episode = Episode {
        support,
        query_image: query.image.clone(),
        query_mask: (mode != EpisodeMode::Inference).then(|| query.mask.clone()),
        query_source: Some(SampleRef {
            index: query_index,
            flipped: false,
        }),
        class_id,
        fold_id,
    };
    episode.validate()?;
    Ok(episode)
}
