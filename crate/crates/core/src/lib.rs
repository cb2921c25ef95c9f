//! Chaotic-sequence watermarking for neural network weights.
//!
//! The crate covers the whole loop: generate a logistic-map sequence from a
//! secret key, add it to one layer of a trained model, and later recover the
//! key from a suspect model by genetic search. A small dense-network trainer
//! and an activation-based logistic-regression detector are included so the
//! pipeline runs end to end without an external ML framework.

pub mod chaos;
pub mod detect;
pub mod cli;
pub mod ga;
pub mod nn;
pub mod store;
pub mod watermark;
