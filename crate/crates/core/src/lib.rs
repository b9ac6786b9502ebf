//! Few-shot semantic segmentation by object-level correlation.
//!
//! The pipeline: a frozen convolutional [`encoder`] yields mid- and high-level
//! feature maps; [`gomm`] mines a class-agnostic general-object feature from the
//! query; [`ccm`] selects foreground/background frequency prototypes from the
//! support, solves an entropic optimal-transport allocation and builds the
//! object-level correlation that the FPN decoder in [`trainer`] turns into a mask.
//! [`eval`] runs the episodic mIoU / FB-IoU protocol and the ablation harness.

pub mod ccm;
pub mod config;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gomm;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod trainer;

pub use error::{Error, Result};
