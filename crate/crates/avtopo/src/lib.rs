//! Adversarial topology-ranking training for retinal artery/vein
//! classification: a U-Net-style segmentation generator trained against
//! an ordinal topology-ranking discriminator and a frozen-backbone
//! triplet loss, with mask perturbation, patch-stitched inference and
//! the A/V evaluation protocol.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod evaluate;
pub mod generator;
pub mod infer;
pub mod mask;
pub mod nn;
pub mod seeding;
pub mod shuffle;
pub mod topofeat;
pub mod train;

pub use error::{Error, Result};
