//! Toolkit for measuring and repairing knowledge loss after approximate
//! machine unlearning in contrastive vision-language models.
//!
//! The crate bundles a reverse-mode autodiff core, a miniature CLIP-style
//! dual encoder, a synthetic multimodal data generator, contrastive
//! pretraining, Fisher-dampening unlearning with knowledge-loss calibration,
//! distribution-divergence weighted knowledge metrics, few-shot recovery
//! adapters and a benchmark harness.

pub mod bench;
pub mod datagen;
pub mod divergence;
pub mod error;
pub mod fewshot;
pub mod miniclip;
pub mod numerics;
pub mod params;
pub mod pretrain;
pub mod unlearn;

pub use error::{Error, Result};
