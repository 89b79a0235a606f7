//! LiDAR / light-field image fusion kernels for semantic segmentation.
//!
//! The crate covers point projection and sparse depth maps ([`geometry`]),
//! voxel binning with inverse-distance feature interpolation ([`voxel`]),
//! point-pixel feature completion and attention fusion ([`pffm`]), the
//! depth-difference occlusion cue ([`ddpm`]), segmentation losses
//! ([`losses`]), file formats and a synthetic scene generator ([`dataset`]),
//! and the end-to-end orchestration ([`pipeline`]).

pub mod config;
pub mod dataset;
pub mod ddpm;
pub mod error;
pub mod feature;
pub mod geometry;
pub mod knn;
pub mod losses;
pub mod oracle;
pub mod pffm;
pub mod pipeline;
pub mod voxel;

pub use error::{Error, Result};
pub use feature::FeatureMap;
pub use geometry::{CameraModel, GridPlane, PointCloud, Projection, SparseGrid};
pub use losses::{LabelMap, LogitMap};
pub use nalgebra;
