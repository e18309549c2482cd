//! Layered affine motion segmentation.
//!
//! Frame 1 of an image pair is split into two layers, each moved by its own
//! affine motion with differentiable forward splatting, and composited with a
//! fixed depth order to reconstruct frame 2. Optimizing both motions and a
//! per-pixel layer field against a robust photometric loss segments the
//! dominant moving object without supervision.

pub mod affine;
pub mod error;
pub mod eval;
pub mod fit;
pub mod imagery;
pub mod ldis;
pub mod oracle;
pub mod seghead;
pub mod splat;
pub mod synth;

pub use error::{Error, Result};
