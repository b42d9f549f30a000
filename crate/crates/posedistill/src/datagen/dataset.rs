//! Dataset generation, on-disk format, and split bookkeeping.
//!
//! A dataset directory holds `manifest.json` (all generation parameters,
//! the split index lists, and a CRC of the sample blob) plus
//! `samples.bin`: an 8-byte magic followed by fixed-size little-endian
//! records — float32 image (H·W), float32 point cloud (N·3), float64 pose
//! (α, β, γ), uint16 category id. Every sample is a pure function of the
//! master seed and its index, so regeneration from the same config is
//! byte-identical and any sample's shape spec or noise seed can be
//! re-derived later (the rotation augmentation re-renders through this).

use crate::datagen::primitives::{Category, Geometry, ShapeSpec};
use crate::datagen::render::{render_noisy, MIN_RESOLUTION};
use crate::error::{Error, Result};
use crate::posemath::EulerPose;
use crate::seeding::derive_seed;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_FORMAT: &str = "posedistill-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const SAMPLES_MAGIC: &[u8; 8] = b"PDSAMP01";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";

/// How train/val index lists are built from the per-category blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSpec {
    /// Every category contributes all its training samples.
    FullySupervised,
    /// Unseen categories contribute no training samples.
    ZeroShot { unseen: Vec<Category> },
    /// Unseen categories contribute exactly `k` training samples each.
    FewShot { unseen: Vec<Category>, k: usize },
}

/// Full generation recipe; a dataset is a pure function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub resolution: usize,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub per_category_train: usize,
    pub per_category_val: usize,
    pub categories: Vec<Category>,
    pub split: SplitSpec,
    pub master_seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            resolution: 32,
            n_points: 256,
            noise_sigma: 0.05,
            per_category_train: 400,
            per_category_val: 100,
            categories: Category::ALL.to_vec(),
            split: SplitSpec::FullySupervised,
            master_seed: 0,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "resolution {} below minimum {MIN_RESOLUTION}",
                self.resolution
            )));
        }
        if self.n_points < 8 {
            return Err(Error::Config(format!(
                "n_points {} below minimum 8",
                self.n_points
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.per_category_train == 0 || self.per_category_val == 0 {
            return Err(Error::Config(
                "per-category train and val counts must be positive".into(),
            ));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("category list is empty".into()));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if self.categories[..i].contains(c) {
                return Err(Error::Config(format!(
                    "duplicate category {}",
                    c.name()
                )));
            }
        }
        let unseen = match &self.split {
            SplitSpec::FullySupervised => &[][..],
            SplitSpec::ZeroShot { unseen } => unseen,
            SplitSpec::FewShot { unseen, .. } => unseen,
        };
        for u in unseen {
            if !self.categories.contains(u) {
                return Err(Error::Config(format!(
                    "unseen category {} not in the category list",
                    u.name()
                )));
            }
        }
        if unseen.len() == self.categories.len() && !unseen.is_empty() {
            return Err(Error::Config(
                "every category marked unseen; nothing left to train on".into(),
            ));
        }
        if let SplitSpec::FewShot { k, unseen } = &self.split {
            if *k == 0 || *k > self.per_category_train {
                return Err(Error::Config(format!(
                    "few-shot k {} out of [1, per_category_train = {}]",
                    k, self.per_category_train
                )));
            }
            if unseen.is_empty() {
                return Err(Error::Config("few-shot split with no unseen categories".into()));
            }
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.categories.len() * (self.per_category_train + self.per_category_val)
    }

    /// Canonical JSON-serialization hash of the resolved config.
    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One record of the dataset, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub cloud: Vec<f32>,
    pub pose: EulerPose,
    pub category_id: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLists {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: GenerateConfig,
    pub config_sha256: String,
    pub total_samples: usize,
    pub split: SplitLists,
    pub blob_crc32: u32,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn resolution(&self) -> usize {
        self.manifest.config.resolution
    }

    pub fn n_points(&self) -> usize {
        self.manifest.config.n_points
    }

    pub fn category_of(&self, index: usize) -> Category {
        Category::from_id(self.samples[index].category_id).expect("stored ids are valid")
    }
}

/// Sample the canonical-frame surface point cloud of a shape; flat
/// `[x0, y0, z0, x1, ...]` layout, deterministic in the spec's seed.
pub fn sample_point_cloud(spec: &ShapeSpec, n: usize) -> Result<Vec<f64>> {
    if n < 8 {
        return Err(Error::Config(format!("point cloud size {n} below minimum 8")));
    }
    let geom = Geometry::from_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.instance_seed, "cloud", 0, 0));
    let mut out = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let p = geom.sample_surface(&mut rng);
        out.extend_from_slice(&p);
    }
    Ok(out)
}

/// The category occupying the given global index under the block layout:
/// category `c` owns indices `[c·B, (c+1)·B)` with
/// `B = per_category_train + per_category_val`; the first
/// `per_category_train` entries of each block are the training pool.
pub fn category_at(config: &GenerateConfig, index: usize) -> Category {
    let block = config.per_category_train + config.per_category_val;
    config.categories[index / block]
}

/// Re-derive the shape spec of sample `index` from the config alone.
pub fn shape_spec_at(config: &GenerateConfig, index: usize) -> ShapeSpec {
    let cat = category_at(config, index);
    ShapeSpec::sample(cat, derive_seed(config.master_seed, "shape", index as u64, 0))
}

/// Re-derive the pose of sample `index` from the config alone.
pub fn pose_at(config: &GenerateConfig, index: usize) -> EulerPose {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, "pose", index as u64, 0));
    let alpha = rng.random_range(-PI..PI);
    let beta = rng.random_range(-FRAC_PI_2..=FRAC_PI_2);
    let gamma = rng.random_range(-PI..PI);
    EulerPose::new(alpha, beta, gamma)
}

/// Re-derive the pixel-noise seed of sample `index`.
pub fn noise_seed_at(config: &GenerateConfig, index: usize) -> u64 {
    derive_seed(config.master_seed, "noise", index as u64, 0)
}

pub(crate) fn build_split(config: &GenerateConfig) -> SplitLists {
    let block = config.per_category_train + config.per_category_val;
    let (unseen, k): (&[Category], usize) = match &config.split {
        SplitSpec::FullySupervised => (&[], config.per_category_train),
        SplitSpec::ZeroShot { unseen } => (unseen, 0),
        SplitSpec::FewShot { unseen, k } => (unseen, *k),
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (c_idx, cat) in config.categories.iter().enumerate() {
        let start = c_idx * block;
        let take = if unseen.contains(cat) {
            k
        } else {
            config.per_category_train
        };
        train.extend((start..start + take).map(|i| i as u32));
        val.extend(
            (start + config.per_category_train..start + block).map(|i| i as u32),
        );
    }
    SplitLists { train, val }
}

/// Generate the full dataset in memory. Pure in the config.
pub fn generate_dataset(config: &GenerateConfig) -> Result<Dataset> {
    config.validate()?;
    let total = config.total_samples();
    let mut samples = Vec::with_capacity(total);
    for index in 0..total {
        let spec = shape_spec_at(config, index);
        let pose = pose_at(config, index);
        let geom = Geometry::from_spec(&spec)?;
        let image = render_noisy(
            &geom,
            &pose,
            config.resolution,
            config.noise_sigma,
            noise_seed_at(config, index),
        )?;
        let cloud: Vec<f32> = sample_point_cloud(&spec, config.n_points)?
            .into_iter()
            .map(|v| v as f32)
            .collect();
        samples.push(Sample {
            image,
            cloud,
            pose,
            category_id: spec.category.id(),
        });
    }
    let blob = encode_samples(&samples);
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        version: DATASET_VERSION,
        config: config.clone(),
        config_sha256: config.sha256(),
        total_samples: total,
        split: build_split(config),
        blob_crc32: crc32fast::hash(&blob),
    };
    Ok(Dataset { manifest, samples })
}

fn encode_samples(samples: &[Sample]) -> Vec<u8> {
    let mut blob = Vec::new();
    for s in samples {
        for px in &s.image {
            blob.extend_from_slice(&px.to_le_bytes());
        }
        for v in &s.cloud {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        for a in s.pose.angles() {
            blob.extend_from_slice(&a.to_le_bytes());
        }
        blob.extend_from_slice(&s.category_id.to_le_bytes());
    }
    blob
}

fn sample_byte_len(config: &GenerateConfig) -> usize {
    config.resolution * config.resolution * 4 + config.n_points * 3 * 4 + 3 * 8 + 2
}

/// Write `manifest.json` + `samples.bin` into `dir` (created if absent).
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest_text = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    manifest_text.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), manifest_text)?;
    let mut f = std::fs::File::create(dir.join(SAMPLES_FILE))?;
    f.write_all(SAMPLES_MAGIC)?;
    f.write_all(&encode_samples(&dataset.samples))?;
    Ok(())
}

/// Read and fully verify a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Format(format!("malformed dataset manifest: {e}")))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "not a dataset manifest (format tag {:?})",
            manifest.format
        )));
    }
    if manifest.version != DATASET_VERSION {
        return Err(Error::Incompatible(format!(
            "dataset version {} unsupported (expected {DATASET_VERSION})",
            manifest.version
        )));
    }
    manifest.config.validate()?;
    if manifest.total_samples != manifest.config.total_samples() {
        return Err(Error::Format(format!(
            "manifest sample count {} does not match config ({})",
            manifest.total_samples,
            manifest.config.total_samples()
        )));
    }
    let mut f = std::fs::File::open(dir.join(SAMPLES_FILE))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format("samples file shorter than its magic header".into()))?;
    if &magic != SAMPLES_MAGIC {
        return Err(Error::Format("samples file has wrong magic bytes".into()));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let expected = manifest.total_samples * sample_byte_len(&manifest.config);
    if blob.len() != expected {
        return Err(Error::Format(format!(
            "samples blob is {} bytes, manifest implies {expected} (truncated or padded)",
            blob.len()
        )));
    }
    let crc = crc32fast::hash(&blob);
    if crc != manifest.blob_crc32 {
        return Err(Error::Format(format!(
            "samples blob checksum {crc:08x} does not match manifest {:08x}",
            manifest.blob_crc32
        )));
    }
    let samples = decode_samples(&blob, &manifest.config)?;
    Ok(Dataset { manifest, samples })
}

fn decode_samples(blob: &[u8], config: &GenerateConfig) -> Result<Vec<Sample>> {
    let px = config.resolution * config.resolution;
    let cl = config.n_points * 3;
    let mut samples = Vec::with_capacity(config.total_samples());
    let mut at = 0usize;
    let f32_at = |blob: &[u8], at: &mut usize| {
        let v = f32::from_le_bytes(blob[*at..*at + 4].try_into().unwrap());
        *at += 4;
        v
    };
    for _ in 0..config.total_samples() {
        let image: Vec<f32> = (0..px).map(|_| f32_at(blob, &mut at)).collect();
        let cloud: Vec<f32> = (0..cl).map(|_| f32_at(blob, &mut at)).collect();
        let mut angles = [0.0f64; 3];
        for a in &mut angles {
            *a = f64::from_le_bytes(blob[at..at + 8].try_into().unwrap());
            at += 8;
        }
        let category_id = u16::from_le_bytes(blob[at..at + 2].try_into().unwrap());
        at += 2;
        Category::from_id(category_id)?;
        samples.push(Sample {
            image,
            cloud,
            pose: EulerPose::new(angles[0], angles[1], angles[2]),
            category_id,
        });
    }
    Ok(samples)
}
