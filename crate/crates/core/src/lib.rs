//! Hyperbolic contrastive pretraining for point clouds, with an image branch
//! as a second view.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: gyrovector operations on the Poincaré ball.
//! * [`grad`]: a reverse-mode tape with adjoints for those operations and
//!   for the encoder layers.
//! * [`losses`]: hyperbolic InfoNCE, midpoint alignment, and the
//!   distance-to-origin hierarchy loss.
//! * [`encoders`], [`data`], [`trainer`]: the two-branch pretraining loop on
//!   synthetic hierarchical shapes.
//! * [`eval`]: frozen-encoder probes, few-shot episodes, hierarchy metrics
//!   and disk plots.
//! * [`checks`]: randomised identity, gradient and loss self-checks.
//! * [`pipeline`]: run manifests and the full reproduction sweep.

pub mod geometry;
pub mod grad;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod losses;
pub mod trainer;
pub mod checks;
pub mod pipeline;

/// Runs the Rust snippets of the guide in `book/` as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
