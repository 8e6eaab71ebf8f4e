//! Textured surfel octree (TeSO) toolkit.
//!
//! A TeSO approximates a colored point cloud by planar surface elements
//! (surfels) bounded by octree cubes. Each leaf cube carries a surfel
//! `(offset, normal, radius)` and an `M x M` texture patch sampled on the
//! surfel tangent plane. The crate covers the full pipeline:
//!
//! * [`builder`]: tree construction from a point cloud with a D1-PSNR
//!   split criterion,
//! * [`quant`]: scalar / octahedral quantization of surfel attributes,
//! * [`texture`]: tangent frames, patch sampling and Morton-order packing,
//! * [`geocodec`]: lossless entropy coding of the octree and attributes,
//! * [`texcodec`]: block-transform texture coding plus lossless export,
//! * [`render`]: CPU ray-cast rendering with soft-boundary blending,
//! * [`eval`]: distortion metrics and rate-distortion sweeps.

pub mod builder;
pub mod container;
pub mod error;
pub mod eval;
pub mod geocodec;
pub mod grid;
pub mod image_buf;
pub mod morton;
pub mod octree;
pub mod pipeline;
pub mod ply;
pub mod pointcloud;
pub mod quant;
pub mod rdsweep;
pub mod render;
pub mod synthetic;
pub mod texcodec;
pub mod texture;

pub use error::{Error, Result};
pub use image_buf::ImageRgb;
pub use octree::{LevelsConfig, Node, OctreeCube, Surfel, SurfelOctree, TexturePatch};
pub use pointcloud::PointCloud;

/// World-scale convention used by the evaluation trajectory: a 1024-voxel
/// grid spans 1.8 m, which makes a depth-10 subject roughly human sized.
pub const METERS_PER_1024_VOXELS: f64 = 1.8;

/// Voxels per meter under [`METERS_PER_1024_VOXELS`].
pub fn voxels_per_meter() -> f64 {
    1024.0 / METERS_PER_1024_VOXELS
}
