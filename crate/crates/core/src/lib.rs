//! Growth-plate plane detection for micro-CT bone scans.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! 1. **volgrid** – volumes, planes and the GPV file format.
//! 2. **prep** – HU windowing, resampling, augmentation and 2.5D stacks.
//! 3. **phantom** – labeled synthetic femur volumes.
//! 4. **micronet** – a small CNN engine with exact gradients and Adam.
//! 5. **detect** – the decoding families that turn model outputs into a
//!    growth-plate plane index.
//! 6. **evalrank** – the challenge score, reports, ranking and folds.
//! 7. **pipeline** – per-method training and inference glue.

pub mod detect;
pub mod error;
pub mod evalrank;
pub mod micronet;
pub mod phantom;
pub mod pipeline;
pub mod prep;
pub mod seed;
pub mod volgrid;

pub use error::{Error, Result};
