//! Core numerics for parameter-efficient fine-tuning of small Arabic
//! language models: NF4 quantization, low-rank adapters, a tape-based
//! autodiff engine, 8-bit optimizer state, Arabic text preparation and
//! evaluation metrics.
//!
//! Everything here is `no_std` + `alloc`; file formats, IO and the CLI
//! live in the `nahw` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod arabic;
pub mod autograd;
pub mod error;
pub mod eval;
pub mod lora;
pub mod memory;
pub mod model;
pub mod optim;
pub mod quant;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Tensor};
