//! Video-level action learning on sparsely sampled snippets.
//!
//! A video is split into `K` equal segments, one short snippet is drawn from
//! each, a shared scorer maps every snippet to class scores, and a segmental
//! consensus function reduces the `K` score rows to a single video-level
//! prediction. Five consensus functions are provided (max, average, top-K,
//! linear weighting, attention weighting), all with analytic backward passes
//! that the test suite checks against central finite differences.
//!
//! The crate is deliberately framework-free: plain `Vec<f64>` math, a
//! documented deterministic RNG ([`rng`]), and explicit gradients everywhere.
//!
//! Module map:
//! - [`corpus`] — on-disk data model plus deterministic synthetic corpora.
//! - [`sampling`] — segment planning, snippet assembly, spatial augmentation.
//! - [`consensus`] — the five aggregation functions, forward and backward.
//! - [`scorer`] — the snippet scorer (MLP with batch norm and dropout).
//! - [`training`] — loss, end-to-end backprop, SGD loop, gradient checking.
//! - [`inference`] — trimmed protocol, multi-scale temporal window
//!   integration for untrimmed videos, accuracy/mAP metrics.

pub mod consensus;
pub mod corpus;
pub mod inference;
pub mod rng;
pub mod sampling;
pub mod scorer;
pub mod training;

mod math;
