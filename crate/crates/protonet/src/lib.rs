//! Few-shot and zero-shot classification by distances to class prototypes.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense f64 tensors, a reverse-mode gradient tape, Adam, and
//!   checkpoint serialization.
//! - [`rng`]: a splittable counter-based generator so every experiment is
//!   reproducible from one seed.
//! - [`distance`]: squared Euclidean, cosine, diagonal Mahalanobis, and
//!   generic Bregman divergences.
//! - [`episode`]: N-way k-shot episode sampling from labeled datasets.
//! - [`model`]: embedding networks, prototype heads, and the episodic
//!   training losses.
//! - [`data`]: synthetic Gaussian tasks, tensor-file datasets, and
//!   attribute-based zero-shot tasks.
//! - [`harness`]: config-driven training, evaluation, and comparison grids.

pub mod data;
pub mod distance;
pub mod episode;
pub mod error;
pub mod harness;
pub mod model;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
