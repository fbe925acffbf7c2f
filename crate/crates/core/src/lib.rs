//! Weakly supervised grounded image captioning with distributed attention.
//!
//! The crate provides, bottom up:
//! - [`autodiff`]/[`optim`]: a minimal reverse-mode tape over dense f64
//!   tensors, Adam, and a finite-difference gradient verification harness;
//! - [`geometry`]: axis-aligned box arithmetic (IoU, union, containment);
//! - [`vocab`]/[`data`]: the closed vocabulary and dataset sample types;
//! - [`model`]: the up-down decoder baseline (teacher-forced loss, greedy
//!   grounded decoding);
//! - [`distributed`]: K mutually exclusive attention branches with region
//!   proposal elimination, the multi-output loss, and vote-and-fuse decoding;
//! - [`synth`]: a deterministic synthetic-scene generator whose proposals
//!   reproduce the partial-grounding setup (full boxes plus salient parts);
//! - [`eval`]: BLEU, grounding F1 metrics, and the five-way error taxonomy;
//! - [`io`]/[`driver`]: file formats (datasets, checkpoints, predictions,
//!   reports) and the train/generate/eval/ablate drivers behind the CLI.

pub mod autodiff;
pub mod data;
pub mod distributed;
pub mod driver;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod model;
pub mod optim;
pub mod synth;
pub mod vocab;
