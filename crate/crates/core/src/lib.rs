//! XNorm linear attention next to a softmax attention baseline, a toy X-ViT
//! model with tape-based gradients, and a benchmark harness for measuring how
//! time and memory scale with the token count.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod error;
pub mod grad;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
