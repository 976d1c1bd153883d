//! Deterministic, desk-scale federated-learning simulator.
//!
//! The crate wires together five layers:
//!
//! - [`nn`]: a small dense network with an optional auxiliary classifier tapped
//!   off an early trunk layer, plus hand-rolled backprop, SGD with momentum,
//!   and a finite-difference gradient checker.
//! - [`losses`]: client objectives — plain cross-entropy, distillation against
//!   the global model's softened logits (with the true class removed), a
//!   representation-contrastive objective, and hybrid variants that add a
//!   shallow distillation term on the auxiliary classifier.
//! - [`data`]: IDX image loading, a Gaussian-mixture synthetic generator, and
//!   Dirichlet label partitioning across clients.
//! - [`federation`] / [`attacks`]: round orchestration (sample, train locally,
//!   aggregate, step the global model) with optional model-poisoning
//!   adversaries and a trimmed-mean robust aggregator.
//! - [`harness`]: experiment configs, metrics CSV/JSON emission, presets, and
//!   paired benign/attacked comparisons.
//!
//! Everything is reproducible: all randomness derives from
//! [`rng::derive_rng`], aggregation is permutation-invariant, and a rerun of
//! the same config yields byte-identical metrics files.

pub mod attacks;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
