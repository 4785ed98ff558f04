//! Adversarial attacks on referring expression comprehension, desk scale.
//!
//! The crate bundles a small differentiable grounding model (the white-box
//! victim), a synthetic scene corpus that stands in for RefCOCO-style data,
//! and four PGD attack objectives: two untargeted (image-embedding and
//! textual bounding-box) and two targeted (exclusive and permuted). The
//! `eval` module drives end-to-end experiments and renders IoU@0.5 tables.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability, and the `rec-attack` binary for the experiment CLI.

pub mod attacks;
pub mod boxcodec;
pub mod eval;
pub mod gradcore;
pub mod grounder;
pub mod scenegen;
pub mod tensorio;
