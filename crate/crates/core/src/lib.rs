//! Post-training quantization of GPT-2 family models into microscaling
//! (MXINT) or fixed-point formats, optionally with SmoothQuant rewrites and
//! GPTQ weight rounding.
//!
//! The [`harness`] module ties the pieces into an evaluation pipeline that
//! reports exact model size against perplexity. Data-parallel loops go through [`Exec`], which falls back to
//! serial execution when the `parallel` feature is disabled.

// Range guards are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod error;
pub mod exec;
pub mod formats;
pub mod gptq;
pub mod harness;
pub mod nn;
pub mod smooth;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{DType, Mat, Rng, Tensor};
