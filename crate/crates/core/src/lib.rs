//! Weakly supervised detection with a negative-instance feature bank.
//!
//! Models are trained from image-level labels only. A two-stream MIL head
//! scores proposals, refinement heads learn from self-selected seeds, and a
//! per-class bank of confidently wrong proposals is used to screen seeds and
//! to push scores away from features that resemble discriminative parts.
//!
//! The [`synthgen`] module builds a synthetic benchmark whose objects have a
//! highly discriminative part, so the part-domination failure mode can be
//! measured directly.

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod ndibank;
pub mod network;
pub mod pseudolabel;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use ndibank::{NdiBank, UpdateMode};
pub use network::ModelParams;
pub use synthgen::{generate_dataset, Dataset, GenConfig};
pub use trainer::{train, TrainConfig, TrainOutcome, TrainReport, Variant};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/negative-bank.md")]
    mod negative_bank {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/seed-selection.md")]
    mod seed_selection {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
