//! Augmentation policy search for domain-generalized segmentation.
//!
//! A recurrent controller samples colour-transform policies; each policy is
//! rewarded by how far apart it keeps the source domains in the unit-sphere
//! embedding space of a jointly trained domain classifier, measured with
//! entropic optimal transport.

pub mod bench;
pub mod controller;
pub mod error;
pub mod golden;
pub mod nets;
pub mod ot;
pub mod rng;
pub mod search;
pub mod transform;

pub use error::{Error, Result};
