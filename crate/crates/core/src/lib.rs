//! Concept-bottleneck transformers with mixture-of-concept-experts routing,
//! entropy-triggered self-correction at inference time, and decision-pathway
//! accountability reports.
//!
//! The crate is organized as a stack:
//!
//! - [`numerics`]: a reverse-mode tape over dense f64 tensors, plus an
//!   independent finite-difference gradient checker.
//! - [`model`]: the architecture — embeddings, attention, expert layers with
//!   per-concept top-T routing, a concept bottleneck, and a linear task head
//!   that makes every prediction decomposable.
//! - [`data`]: concept-annotated CSV datasets and a synthetic generator that
//!   plants recoverable concept structure.
//! - [`training`]: joint and ablation training strategies with early
//!   stopping and the expert-budget rehearsal ramp.
//! - [`metacognition`]: entropy scrutiny over routing and concept logits,
//!   two-cluster threshold fitting, and tuning-free expert reallocation.
//! - [`accountability`]: pathway backtracking, per-concept influence, and
//!   pre/post-intervention diffs rendered as reports.

pub mod accountability;
pub mod data;
pub mod error;
pub mod metacognition;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
