//! The two-stream network.
//!
//! A shared stem feeds three copies of the last block: the global branch
//! (pooled into `g`), the attribute branch (read by the attribute-part
//! detectors and per-attribute heads) and the part stream (pooled under the
//! same masks into part features, which the fused attribute vector gates).

mod config;
mod forward;
mod gradcheck;
mod params;

pub use config::ModelConfig;
pub use forward::{BackboneMaps, ForwardPass, FullOutputs, Stage1Outputs};
pub use gradcheck::{end_to_end_grad_check, tiny_params, END_TO_END_TOLERANCE};
pub use params::{ModelParams, NamedBn, Param, StageGroup};
