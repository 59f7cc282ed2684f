//! Multi-teacher feature distillation for 3D Gaussian splatting scenes.
//!
//! The crate covers the whole pipeline: tile-based compositing with recorded
//! weights, normalized 2D-to-3D feature uplifting, teacher standardization,
//! the shared encoder with per-teacher projector heads and their losses,
//! render-and-distill adaptation, 3DGS-aware augmentations, view planning
//! and the evaluation protocols.

pub mod augment;
pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod phis;
pub mod pipeline;
pub mod ply;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod uplift;
pub mod viewplan;

pub use error::{Error, ErrorCategory, Result};
pub use raster::{
    CompositeWeights, FeatureImage, Rasterizer, RenderConfig, RenderOutput, SplatProjection,
};
pub use scene::{Aabb, Camera, Gaussian, GaussianScene, Intrinsics, TeacherFeatureMap, TeacherId};
