//! Compressed activation storage for memory-bounded training.
//!
//! Activations are quantized to a per-tensor bit-width, packed into 32-bit
//! words using a tiled, lane-interleaved layout, and kept in a page-granular
//! arena whose residency is governed by two red-black trees ordered by
//! importance per byte and importance per unit of backward time.
//!
//! Module map:
//!
//! * [`quant`]: quantization parameters, (de)quantization, importance metrics.
//! * [`reduce`]: min/max collective reductions (tree, atomic, hybrid) and
//!   offline strategy profiling.
//! * [`bitcodec`]: the float/uint bit trick and the packed buffer format.
//! * [`rbtree`]: arena-backed red-black tree used for the page table.
//! * [`pagestore`]: the budgeted arena, dual trees, eviction and resizing.
//! * [`policy`]: the storage controller (planning and per-activation decisions).
//! * [`refnet`]: a small MLP trained against the store, for gradient checks.
//! * [`trace`]: trace events, synthetic workloads and the replay driver.

// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bitcodec;
mod error;
pub mod par;
pub mod pagestore;
pub mod policy;
pub mod quant;
pub mod rbtree;
pub mod reduce;
pub mod refnet;
pub mod trace;

pub use error::{Error, Result};

/// Identifier of an activation; stable across iterations for the same layer output.
pub type ActId = u64;
