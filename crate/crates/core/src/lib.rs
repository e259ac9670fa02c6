//! Convolutional code quantization for LLM weights.
//!
//! Each group of weights is represented by a short sequence of overlapping
//! bit windows (a code) plus one scale. Adjacent states share bits, so the
//! codebook is a constrained lattice that can be stored at 2.0 to 2.75 bits
//! per weight and decoded with shifts and masks alone.
//!
//! The crate is split into the code definition ([`coding`]), the search and
//! calibration side ([`quantizer`]), the bit-exact container ([`packing`]),
//! decode and GEMV ([`kernels`]), and accounting ([`metrics`]).

pub mod cli;
pub mod coding;
pub mod error;
pub mod family;
pub mod kernels;
pub mod metrics;
pub mod packing;
pub mod quantizer;
pub mod tensor;

pub use coding::{build_codebook, decode_states, states_to_code, Codebook, EncodingConfig, LayoutSpec};
pub use error::{CcqError, Result};
pub use family::{Family, GroupGeometry, DEFAULT_GROUP_SIZE};
pub use kernels::{dequantize_tensor, gemv, gemv_batch};
pub use metrics::{error_report, ErrorReport};
pub use packing::{read_container, write_container, PackedTensor};
pub use quantizer::{quantize_tensor, QuantizedTensor, QuantizerOptions};
pub use tensor::Matrix;
