//! Episodic few-shot data: images and masks, fold splits, the synthetic shapes
//! benchmark, folder ingestion and K-shot episode sampling.

mod dataset;
mod folds;
mod sampler;
mod synth;

pub use dataset::{ingest_folder, Dataset, Image, Mask, Sample};
pub use folds::{make_folds, ClassSplit, NUM_FOLDS};
pub use sampler::{sample_episode, Episode, EpisodeMode, SampleRef, SupportShot};
pub use synth::{generate_synthetic, ShapeFamily, SynthConfig};
