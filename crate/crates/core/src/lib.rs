//! Individual tree detection and stem/foliage segmentation for airborne LiDAR.
//!
//! The pipeline runs ground removal ([`ground`]), per-tree detection
//! ([`detect`], with bird's-eye rasters from [`raster`]), and per-point
//! segmentation into foliage, lower stem and upper stem ([`segment`]) with a
//! from-scratch 3D fully-convolutional network ([`nn`]) operating on
//! occupancy grids ([`voxel`]). [`eval`] scores detections and segmentations,
//! and [`synth`] generates ground-truthed plantation plots.

pub mod cloud;
pub mod detect;
pub mod error;
pub mod eval;
pub mod ground;
pub mod io;
pub mod kdtree;
pub mod nn;
pub mod pipeline;
mod par;
pub mod raster;
pub mod segment;
pub mod synth;
pub mod voxel;

pub use cloud::{bounds, crop, Cuboid, Point, PointCloud, SemanticLabel};
pub use error::{Error, Result};
pub use kdtree::{build_kdindex, Dims, KdIndex, Neighbor};
