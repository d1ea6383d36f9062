//! Phase-fraction representativity from a single segmented image.
//!
//! The pipeline binarises an image, estimates the variance of the phase
//! fraction across same-sized samples from its two-point correlation
//! function, and converts that variance into a confidence bound and a
//! required image size.

pub mod analysis;
pub mod error;
pub mod estimator;
pub mod fft;
pub mod harness;
pub mod image;
pub mod subdivision;
pub mod synthgen;
pub mod tpc;
pub mod uncertainty;

pub use error::{Error, Result};
pub use image::{BinaryImage, ImageDomain, PhaseFraction, SegmentedImage};
