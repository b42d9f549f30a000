//! Category-agnostic object pose estimation via contrastive knowledge
//! distillation: a multi-modal teacher (depth render + point cloud) is
//! trained jointly with a contrastive bridge, then distilled into an
//! image-only student. Includes a synthetic primitive benchmark, a
//! reverse-mode autodiff engine sized for it, training strategies, and an
//! evaluation/ablation harness.

pub mod config;
pub mod datagen;
pub mod diffmath;
pub mod error;
pub mod evalharness;
pub mod losses;
pub mod models;
pub mod posemath;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
