//! Blockwise NF4 weight quantization, double quantization of the block
//! scales, and 8-bit dynamic quantization for optimizer state.

mod codebook;
mod nf4;
mod state8;

pub use codebook::{dynamic8_codebook, nf4_codebook, Codebook, NF4_LEVELS, NF4_OFFSET};
pub use nf4::{bits_per_param, BlockScales, DoubleQuantState, QuantConfig, QuantizedTensor};
pub use state8::{Quantized8bitState, STATE8_BLOCK};
