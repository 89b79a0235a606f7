//! File ingestion and synthetic data generation.

pub mod io;
pub mod scene;
pub mod synth;

pub use scene::{render_view, sample_lidar, LidarScan, LidarSpec, Primitive, RenderedView, Scene, SceneCamera};
