//! Multi-precision binary-coded quantization (BCQ).
//!
//! A weight matrix is approximated as `Ŵ = Σ αᵢ·Bᵢ (+ z)` with binary planes
//! `Bᵢ ∈ {−1,+1}` and per-row, per-group real scales. One set of packed planes
//! is shared by every precision `p ∈ [p_low, p_high]`; each precision owns an
//! independent scale set, so serving at `p` bits touches only the first `p`
//! planes.
//!
//! Module map:
//!
//! * [`tensor_io`]: dense matrices, the FMAT file format, seeded Gaussian inputs.
//! * [`bcq`]: fixed-precision fitting (greedy init, least-squares scales,
//!   nearest-level code search), packing and dequantization.
//! * [`progressive`]: base-precision fit followed by one-bit-at-a-time expansion
//!   with frozen planes.
//! * [`calib`]: output-error refinement of one precision's scales against
//!   calibration activations.
//! * [`model_format`]: the ABCQ container and memory-footprint accounting.
//! * [`gemv`]: matrix-vector execution directly on packed planes, with a
//!   lookup-table path, a bit-serial reference path and traffic counters.

pub mod bcq;
pub mod calib;
mod error;
pub mod gemv;
pub mod model_format;
pub mod progressive;
mod solve;
pub mod tensor_io;

pub use bcq::{BitPlaneSet, Mode, QuantConfig, QuantView, QuantizedMatrix, ScaleTensor};
pub use error::{Error, ErrorClass, Result};
pub use progressive::MultiPrecisionModel;
pub use tensor_io::{ActivationBatch, Matrix, WeightMatrix};
