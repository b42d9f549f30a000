//! Synthetic data generation: parameterized 3D primitives, canonical-frame
//! point clouds, the orthographic depth renderer, and the on-disk dataset
//! format with its train/val/few-shot split bookkeeping.

pub mod dataset;
pub mod primitives;
pub mod render;

#[cfg(test)]
mod tests;

pub use dataset::{
    generate_dataset, noise_seed_at, pose_at, read_dataset, sample_point_cloud, shape_spec_at,
    write_dataset, Dataset, DatasetManifest, GenerateConfig, Sample, SplitLists, SplitSpec,
};
pub use primitives::{Category, Geometry, ShapeSpec};
pub use render::{
    apply_noise, mirror_image, nn_rotate, render_clean, render_noisy, rot90_ccw, rot90_pow,
    INPLANE_QUANTUM, MIN_RESOLUTION,
};
