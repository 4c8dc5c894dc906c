//! Desk-scale cone-beam CT toolkit: synthetic X-ray projection of voxel
//! phantoms, FDK reconstruction, volume- and projection-domain metal
//! segmentation (classical and learned), trace inpainting, and quantitative
//! evaluation of metal-trace masks.
//!
//! Bulk numeric data (volumes, projection stacks, network tensors) is generic
//! over the scalar type via [`Real`]; geometry and ray traversal are always
//! computed in `f64`. Concrete aliases for both precisions live at the crate
//! root.

pub mod error;
pub mod fdk;
pub mod fproj;
pub mod geom;
pub mod inpaint;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod nnseg;
pub mod pipeline;
pub mod png;
pub mod rng;
pub mod scalar;
pub mod segvol;
pub mod traces;
pub mod voxvol;
pub mod xsim;

pub use error::{Error, Result};
pub use scalar::Real;

/// Working-precision volume (dims, spacing, origin, voxel data).
pub type Volume3F64 = voxvol::Volume3<f64>;
/// Storage-precision volume, matching the on-disk voxel payload.
pub type Volume3F32 = voxvol::Volume3<f32>;
/// Working-precision line-integral projection stack.
pub type ProjectionStackF64 = xsim::ProjectionStack<f64>;
/// Storage-precision line-integral projection stack.
pub type ProjectionStackF32 = xsim::ProjectionStack<f32>;
/// Working-precision raw (energy-domain) projection stack.
pub type RawProjectionF64 = xsim::RawProjection<f64>;
/// Working-precision network tensor.
pub type Tensor4F64 = nnseg::Tensor4<f64>;
