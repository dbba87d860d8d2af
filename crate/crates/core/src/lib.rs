//! Training under biased data augmentation.
//!
//! Augmented examples are drawn from a distribution that differs from the
//! clean one. The trainers here either stop using them at the right moment
//! ([`trainers::augdrop`]), penalise them through a corrected loss
//! ([`trainers::mixloss`]), or do both ([`trainers::wemix`]). The
//! [`theory`] module turns measured constants into step sizes, batch sizes
//! and excess-risk bounds.

pub mod augment;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod problem;
pub mod random;
pub mod theory;
pub mod trainers;

pub use data::{LabeledSet, Provenance};
pub use error::{Error, Result};
pub use linalg::Mat;
pub use model::{Arch, GradSample, Predictor};
pub use random::Rng;
