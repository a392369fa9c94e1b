//! Core library for desk-scale split fine-tuning: a frozen micro-transformer
//! served by a "cloud" node, trainable LoRA / serial-adapter modules held by
//! an "edge" node, a kill-and-revive budget scheduler, the binary wire
//! protocol that connects the two, and FLOP/byte cost accounting.
//!
//! Everything here is deterministic and `no_std` (alloc only); IO lives in
//! the companion CLI crate.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod cost;
pub mod model;
pub mod peft;
pub mod protocol;
pub mod rng;
pub mod runtime;
pub mod scalar;
pub mod scheduler;
pub mod tensor;

pub use scalar::{Dtype, Scalar};
pub use tensor::{Tensor, TensorError};
