//! Query-aware graph soft prompts for a frozen decoder-only language model.
//!
//! A graph transformer encodes a text-attributed graph, optionally fused with
//! the question through a virtual query node, and a set of learnable pooling
//! tokens reads the encoded graph out into a handful of prompt vectors. Those
//! vectors are prepended to the prompt of a small frozen decoder LM and the
//! encoder is trained through the LM's answer loss.

pub mod data;
pub mod encoder;
pub mod error;
pub mod io;
pub mod lm;
pub mod pooling;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
