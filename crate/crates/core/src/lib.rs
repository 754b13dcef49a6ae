//! Camera-LiDAR bird's-eye-view fusion with ego-motion-calibrated temporal
//! alignment.
//!
//! The pipeline per frame is: LiDAR BEV and multi-view image features go
//! through [`lgvt::lgvt_forward`] to produce a camera BEV, which
//! [`fusion::FusionParams::apply`] merges with the LiDAR BEV. A sequence of
//! fused frames is then folded by [`tda::temporal_fuse`], which warps the
//! running state into the current ego frame and aligns it with deformable
//! attention.

pub mod deform_attn;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod lgvt;
pub mod pipeline;
pub mod synthetic;
pub mod tda;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
