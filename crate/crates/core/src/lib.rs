//! Mixed-precision expert quantization and dynamic expert pruning for
//! top-k routed Mixture-of-Experts transformers.
//!
//! The pipeline runs profile → allocate → quantize → evaluate:
//! [`profiler`] measures how often each expert fires and how much the model
//! output moves when that expert alone is quantized, [`allocator`] turns those
//! numbers into per-expert bit-widths under an exact budget, [`quantizer`]
//! applies GPTQ/RTN/sign quantization and packs the result, and [`pruner`]
//! skips low-weight second experts at inference time while shielding the
//! tokens that attention marks as important. [`harness`] measures the outcome.

pub mod allocator;
pub mod cli;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod profiler;
pub mod pruner;
pub mod quantizer;

pub use error::{Error, Infeasibility, Result};
