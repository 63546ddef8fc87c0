//! Object-aware painterly image harmonization.
//!
//! A photographic object pasted onto a painting is re-styled by predicting
//! (hallucinating) its target feature statistics from the surrounding
//! background style and a domain-invariant object feature, then decoding the
//! re-normalised encoder features back to an image.

pub mod analysis;
pub mod checkpoint;
pub mod datapipe;
pub mod encoder;
pub mod error;
pub mod harmonizer;
pub mod imagecore;
pub mod losses;
pub mod nn;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
