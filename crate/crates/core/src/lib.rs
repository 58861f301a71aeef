//! Self-supervised segmentation of solar panels in aerial tiles.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`imagery`]: tiles, masks, on-disk datasets, a procedural two-domain
//!   scene generator and a label-corruption simulator.
//! - [`augment`]: flips, colour jitter and HSV shifts, paired for labelled
//!   training and doubled into view pairs for contrastive pretraining.
//! - [`model`]: a small U-Net style encoder/decoder with a projection head,
//!   hand-written backpropagation and a portable checkpoint format.
//! - [`losses`]: NT-Xent and focal loss with analytic gradients.
//! - [`metrics`]: binarization, confusion counts and IoU.
//! - [`train`]: Adam, the contrastive pretraining loop, the focal-loss
//!   fine-tuning loop and evaluation.
//! - [`expharness`]: label-subset sweeps, cross-domain matrices and
//!   corruption ablations with CSV/JSON reports and overlay export.
//!
//! Every stochastic step is keyed by an explicit seed through [`rng`], so
//! runs are bit-reproducible.

pub mod augment;
pub mod error;
pub mod expharness;
pub mod imagery;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod real;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
