//! Few-shot learning over discrete sequences with task-embedding-conditioned
//! transformers.
//!
//! * [`numerics`]: tensors, reverse-mode differentiation, Adam.
//! * [`benchgen`]: synthetic classification, transduction and path-finding
//!   benchmarks, plain and compositional.
//! * [`model`]: the conditioned transformer encoder/decoder.
//! * [`meta`]: alternating-minimization training, baselines, k-shot
//!   adaptation and evaluation.

pub mod benchgen;
pub mod meta;
pub mod model;
pub mod numerics;
pub mod seed;
