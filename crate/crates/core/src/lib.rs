//! Concept learning over aggregated disentangled representations.
//!
//! A β-VAE learns independent generative factors of an image; per-dimension
//! networks aggregate those factors into human-annotated and unannotated
//! concepts; a linear head predicts a task label from the annotated
//! concepts. A decomposition path maps concepts back to factors and a
//! consistency loss ties the two directions together.

pub mod aggdec;
pub mod drl;
pub mod error;
pub mod model;
pub mod ndgrad;
pub mod nn;
pub mod rng;
pub mod spritegen;
pub mod taskhead;
pub mod trainer;
pub mod xeval;

pub use error::{Error, Result};
