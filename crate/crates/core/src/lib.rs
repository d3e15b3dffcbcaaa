//! Gaussian splats bound to a rigged triangle mesh, with per-region offset
//! regularization, a generated mouth interior and part-wise mouth deformation.

pub mod aps;
pub mod checkpoint;
pub mod deform_net;
pub mod error;
pub mod geometry;
pub mod grad;
pub mod image;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod mouth_struct;
pub mod renderer;
pub mod rig_synth;
pub mod scalar;
pub mod splats;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type TriMesh64 = geometry::TriMesh<f64>;
pub type TriMesh32 = geometry::TriMesh<f32>;
pub type SplatSet64 = splats::SplatSet<f64>;
pub type SplatSet32 = splats::SplatSet<f32>;
pub type Image64 = image::Image<f64>;
pub type Image32 = image::Image<f32>;
pub type Camera64 = renderer::Camera<f64>;
pub type Camera32 = renderer::Camera<f32>;
pub type Vec3d = linalg::Vec3<f64>;
pub type Vec3f = linalg::Vec3<f32>;
