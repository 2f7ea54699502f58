//! Hierarchical entity-type embeddings in hyperbolic and Euclidean space.
//!
//! The crate covers the full pipeline for nearest-neighbor entity typing
//! over a three-granularity type inventory (coarse / fine / ultra-fine):
//!
//! 1. [`hierarchy`] — derive a weighted type graph from a taxonomy edge
//!    list or from type co-occurrence statistics (frequency or PPMI).
//! 2. [`embedding`] — embed the type graph into the Poincare ball or the
//!    Euclidean unit ball with negative-sampling training.
//! 3. [`encoder`] — turn a mention in context into a feature vector using
//!    word vectors, relative position embeddings and attention pooling.
//! 4. [`projection`] — the stacked coarse/fine/ultra regression model that
//!    maps encoder features into the target space through a
//!    direction+norm reparameterization, so outputs always land inside
//!    the ball.
//! 5. [`eval`] — nearest-neighbor prediction, loose macro/micro F1,
//!    strict accuracy and neighbor-rank histograms.
//!
//! [`geometry`] holds the metric kernel (distances, combined losses and
//! their analytic gradients), [`optim`] the shared Adam optimizer,
//! gradient clipping and a finite-difference checker. [`corpus`] reads and
//! writes the on-disk formats, and [`synth`] generates seeded synthetic
//! corpora for end-to-end testing.

pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod eval;
pub mod geometry;
pub mod hierarchy;
mod linalg;
pub mod optim;
pub mod projection;
pub mod synth;

pub use geometry::{BallPoint, LossWeights, SpaceKind};
pub use hierarchy::{AnnotatedInstance, Granularity, TypeInventory, WeightedTypeGraph};
