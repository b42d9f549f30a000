//! Training orchestration: the multi-modal teacher stage, the image-only
//! student distillation stage, the joint variant, the learning-rate
//! schedule, label-consistent augmentation, JSONL logging, and exactly
//! resumable checkpoints.
//!
//! Reproducibility design: every random draw comes from a stream derived
//! as `derive_seed(seed, "<stage>-<purpose>", epoch, 0)`, so a run is a
//! pure function of (dataset, configs, seed) and resuming from an epoch
//! boundary replays the exact continuous trajectory. Checkpoints persist
//! parameters plus full Adam state; a fingerprint of every trajectory
//! input gates resumption.

use crate::datagen::{
    mirror_image, nn_rotate, noise_seed_at, render_noisy, shape_spec_at, Dataset, Geometry,
    SplitLists,
};
use crate::diffmath::checkpoint::MANIFEST_FILE;
use crate::diffmath::{
    load_store, save_store, AdamConfig, BatchStats, ParamStore, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::losses::{
    infonce, pose_loss, student_loss, teacher_loss, EmbedGuidance, LossWeights, TeacherRefs,
};
use crate::models::{EncoderConfig, StudentModel, TeacherModel, BN_MOMENTUM, TEACHER_PREFIX};
use crate::posemath::{
    acc30, augment_flip, augment_rotate, decode_pose, encode_pose, mederr, pose_error_deg,
    EulerPose, PosePrediction, PoseTarget,
};
use crate::seeding::derive_seed;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const TRAIN_LOG_FILE: &str = "train.log.jsonl";
pub const LAST_DIR: &str = "last";
pub const BEST_DIR: &str = "best";
/// Validation forward passes run over sorted index chunks of this size;
/// sorting makes metrics exactly invariant to the caller's sample order.
pub const EVAL_CHUNK: usize = 128;

/// Learning rate at `epoch` (0-based) of a run `epochs` long: `lr0` until
/// 80% of the run is done, then `lr0 / 10`. The cutover is the exact
/// integer ⌈0.8·epochs⌉, computed without float rounding.
pub fn lr_at(epoch: usize, epochs: usize, lr0: f64) -> f64 {
    let cut = (4 * epochs).div_ceil(5);
    if epoch < cut {
        lr0
    } else {
        lr0 / 10.0
    }
}

/// How the in-plane rotation augmentation produces the rotated image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Re-render the shape at the transformed pose (exactly consistent
    /// with the label; reuses the sample's noise seed).
    ReRender,
    /// Rotate the stored image by nearest-neighbor resampling.
    ImageRotate,
}

/// Augmentation settings. Flips mirror the image and negate azimuth and
/// in-plane angles — valid only for categories that are mirror-symmetric
/// about their vertical plane, so the flip is skipped for the others.
/// Rotations add φ to the in-plane angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Apply augmentation during teacher / joint training.
    pub stage1: bool,
    /// Apply augmentation during student training.
    pub stage2: bool,
    pub flip_prob: f64,
    /// φ is drawn uniformly from [−max_rotation_deg, +max_rotation_deg].
    pub max_rotation_deg: f64,
    pub rotation_mode: RotationMode,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            stage1: false,
            stage2: true,
            flip_prob: 0.5,
            max_rotation_deg: 15.0,
            rotation_mode: RotationMode::ReRender,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) || !self.flip_prob.is_finite() {
            return Err(Error::Config(format!(
                "flip_prob must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        if !self.max_rotation_deg.is_finite() || self.max_rotation_deg < 0.0 {
            return Err(Error::Config(format!(
                "max_rotation_deg must be finite and >= 0, got {}",
                self.max_rotation_deg
            )));
        }
        Ok(())
    }
}

/// Full training recipe for both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_stage1: usize,
    pub batch_stage2: usize,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            epochs_stage1: 150,
            epochs_stage2: 90,
            batch_stage1: 32,
            batch_stage2: 32,
            weights: LossWeights::default(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(Error::Config(format!(
                "lr0 must be finite and > 0, got {}",
                self.lr0
            )));
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        if self.batch_stage1 < 2 || self.batch_stage2 < 2 {
            return Err(Error::Config(
                "batch sizes must be at least 2 (contrastive batches need negatives)".into(),
            ));
        }
        self.weights.validate()?;
        self.augment.validate()
    }
}

/// Training strategy variants. Serialized names double as the CLI names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Stage 1 only: the multi-modal teacher with the contrastive bridge.
    #[serde(rename = "teacher")]
    TeacherOnly,
    /// Image-only student trained with the pose loss alone.
    #[serde(rename = "baseline")]
    StudentBaseline,
    /// The full distillation recipe: pose loss + embedding KL + output KL
    /// from a frozen teacher, with 3D-consistent augmentation per config.
    #[serde(rename = "3daug")]
    ThreeDAugPose,
    /// Embedding KL replaced by a one-sided InfoNCE pulling z_s toward
    /// the frozen teacher embedding h_t; gradients stay in the student.
    #[serde(rename = "onesidecl")]
    OneSideCL,
    /// Teacher and student trained jointly with the contrastive loss
    /// tying z_s to h_t, then the student fine-tuned with output KL.
    #[serde(rename = "jointcl")]
    JointCL,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::TeacherOnly,
        Strategy::StudentBaseline,
        Strategy::ThreeDAugPose,
        Strategy::OneSideCL,
        Strategy::JointCL,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::TeacherOnly => "teacher",
            Strategy::StudentBaseline => "baseline",
            Strategy::ThreeDAugPose => "3daug",
            Strategy::OneSideCL => "onesidecl",
            Strategy::JointCL => "jointcl",
        }
    }

    pub fn from_name(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?}; expected one of teacher, baseline, 3daug, \
                     onesidecl, jointcl"
                ))
            })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One sample's augmentation decision. Built by [`draw_augmentation`]
/// during training; constructed directly in tests to force specific
/// transforms (e.g. φ = 90° to compare against exact raster rotation).
#[derive(Debug, Clone, Copy)]
pub struct AugmentDraw {
    pub flip: bool,
    /// In-plane rotation in radians.
    pub phi: f64,
}

pub fn draw_augmentation(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentDraw {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let r = cfg.max_rotation_deg.to_radians();
    let phi = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    AugmentDraw { flip, phi }
}

/// Apply one augmentation decision to dataset sample `index`, returning
/// the transformed image and pose. The point cloud is canonical-frame and
/// never transformed. The flip applies only to mirror-symmetric
/// categories; the no-op draw returns the stored image bitwise.
pub fn apply_augmentation_draw(
    dataset: &Dataset,
    index: usize,
    draw: &AugmentDraw,
    mode: RotationMode,
) -> Result<(Vec<f32>, EulerPose)> {
    let sample = &dataset.samples[index];
    let w = dataset.resolution();
    let mut pose = sample.pose;
    let flipped = draw.flip && dataset.category_of(index).mirror_symmetric();
    if flipped {
        pose = augment_flip(&pose);
    }
    if draw.phi != 0.0 {
        pose = augment_rotate(&pose, draw.phi);
    }
    let image = match mode {
        RotationMode::ReRender => {
            if flipped || draw.phi != 0.0 {
                let gen = &dataset.manifest.config;
                let geom = Geometry::from_spec(&shape_spec_at(gen, index))?;
                render_noisy(&geom, &pose, w, gen.noise_sigma, noise_seed_at(gen, index))?
            } else {
                sample.image.clone()
            }
        }
        RotationMode::ImageRotate => {
            let mut img = sample.image.clone();
            if flipped {
                img = mirror_image(&img, w);
            }
            if draw.phi != 0.0 {
                img = nn_rotate(&img, w, draw.phi);
            }
            img
        }
    };
    Ok((image, pose))
}

/// Draw and apply one augmentation for sample `index`.
pub fn apply_augmentation(
    dataset: &Dataset,
    index: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, EulerPose)> {
    let draw = draw_augmentation(cfg, rng);
    apply_augmentation_draw(dataset, index, &draw, cfg.rotation_mode)
}

/// Which forward path a checkpoint's parameters drive at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Consumes image + point cloud.
    Teacher,
    /// Consumes the image only.
    Student,
}

fn images_tensor(rows: &[Vec<f32>]) -> Result<Tensor> {
    let b = rows.len();
    let p = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(b * p);
    for r in rows {
        if r.len() != p {
            return Err(Error::Shape {
                op: "images_tensor",
                detail: format!("row of {} pixels among rows of {p}", r.len()),
            });
        }
        data.extend(r.iter().map(|v| *v as f64));
    }
    Tensor::new(vec![b, p], data)
}

fn images_tensor_at(dataset: &Dataset, indices: &[u32]) -> Result<Tensor> {
    let p = dataset.resolution() * dataset.resolution();
    let mut data = Vec::with_capacity(indices.len() * p);
    for &i in indices {
        data.extend(dataset.samples[i as usize].image.iter().map(|v| *v as f64));
    }
    Tensor::new(vec![indices.len(), p], data)
}

fn clouds_tensor_at(dataset: &Dataset, indices: &[u32]) -> Result<Tensor> {
    let n3 = 3 * dataset.n_points();
    let mut data = Vec::with_capacity(indices.len() * n3);
    for &i in indices {
        data.extend(dataset.samples[i as usize].cloud.iter().map(|v| *v as f64));
    }
    Tensor::new(vec![indices.len(), n3], data)
}

fn heads_to_predictions(
    tape: &Tape,
    heads: &crate::models::HeadOutputs,
    bins: &crate::posemath::AngleBinSpec,
    batch: usize,
) -> Result<Vec<PosePrediction>> {
    let mut out = Vec::with_capacity(batch);
    for row in 0..batch {
        let mut scores: [Vec<f64>; 3] = [vec![], vec![], vec![]];
        let mut offsets: [Vec<f64>; 3] = [vec![], vec![], vec![]];
        for k in 0..3 {
            let n = bins.bin_count(k);
            let ld = tape.value(heads.logits[k]).data();
            let od = tape.value(heads.offsets[k]).data();
            scores[k] = ld[row * n..(row + 1) * n].to_vec();
            offsets[k] = od[row * n..(row + 1) * n].to_vec();
        }
        out.push(PosePrediction::new(scores, offsets, bins)?);
    }
    Ok(out)
}

/// Predict poses for `indices` (original, un-augmented inputs). Results
/// align with the given order, but computation runs over sorted-index
/// chunks so the predictions are exactly independent of that order.
pub fn predict_poses(
    store: &ParamStore,
    encoder: &EncoderConfig,
    kind: ModelKind,
    dataset: &Dataset,
    indices: &[u32],
) -> Result<Vec<EulerPose>> {
    if indices.is_empty() {
        return Err(Error::Invalid("empty evaluation index list".into()));
    }
    let mut order: Vec<(usize, u32)> = indices.iter().copied().enumerate().collect();
    order.sort_by_key(|(_, idx)| *idx);
    let mut out: Vec<Option<EulerPose>> = vec![None; indices.len()];
    let teacher = match kind {
        ModelKind::Teacher => Some(TeacherModel::new(encoder.clone(), store)?),
        ModelKind::Student => None,
    };
    let student = match kind {
        ModelKind::Student => Some(StudentModel::new(encoder.clone(), store)?),
        ModelKind::Teacher => None,
    };
    for chunk in order.chunks(EVAL_CHUNK) {
        let idx: Vec<u32> = chunk.iter().map(|(_, i)| *i).collect();
        let mut tape = Tape::new();
        let img = tape.constant(images_tensor_at(dataset, &idx)?)?;
        let heads = match kind {
            ModelKind::Teacher => {
                let cld = tape.constant(clouds_tensor_at(dataset, &idx)?)?;
                teacher
                    .as_ref()
                    .unwrap()
                    .forward(&mut tape, store, img, cld)?
                    .heads
            }
            ModelKind::Student => {
                student
                    .as_ref()
                    .unwrap()
                    .forward(&mut tape, store, img, false)?
                    .heads
            }
        };
        let preds = heads_to_predictions(&tape, &heads, &encoder.bins, idx.len())?;
        for ((pos, _), pred) in chunk.iter().zip(preds) {
            out[*pos] = Some(decode_pose(&pred, &encoder.bins)?);
        }
    }
    Ok(out.into_iter().map(|p| p.expect("all chunks filled")).collect())
}

/// Geodesic errors (degrees) against ground truth, aligned with `indices`.
pub fn eval_errors(
    store: &ParamStore,
    encoder: &EncoderConfig,
    kind: ModelKind,
    dataset: &Dataset,
    indices: &[u32],
) -> Result<Vec<f64>> {
    let preds = predict_poses(store, encoder, kind, dataset, indices)?;
    Ok(indices
        .iter()
        .zip(&preds)
        .map(|(&i, pred)| pose_error_deg(&dataset.samples[i as usize].pose, pred))
        .collect())
}

/// Overall (Acc30, MedErr) on the given indices.
pub fn eval_metrics(
    store: &ParamStore,
    encoder: &EncoderConfig,
    kind: ModelKind,
    dataset: &Dataset,
    indices: &[u32],
) -> Result<(f64, f64)> {
    let errors = eval_errors(store, encoder, kind, dataset, indices)?;
    Ok((acc30(&errors)?, mederr(&errors)?))
}

/// Validation result the best-checkpoint selection tracks: highest Acc30,
/// ties broken by lower MedErr; earlier epochs win remaining ties.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BestState {
    pub epoch: usize,
    pub acc30: f64,
    pub mederr: f64,
}

fn improves(best: &Option<BestState>, acc30: f64, mederr: f64) -> bool {
    match best {
        None => true,
        Some(b) => acc30 > b.acc30 || (acc30 == b.acc30 && mederr < b.mederr),
    }
}

/// Outcome of one training stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub epochs_run: usize,
    pub best: BestState,
    pub out_dir: PathBuf,
}

fn sha256_hex(text: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// CRC32 over a parameter group's names and little-endian values, in
/// sorted name order; identifies the exact teacher a student was
/// distilled from so resumption cannot silently mix teachers.
fn group_crc(store: &ParamStore, prefix: &str) -> u32 {
    let dotted = format!("{prefix}.");
    let mut h = crc32fast::Hasher::new();
    for (name, entry) in store.iter() {
        if name == prefix || name.starts_with(&dotted) {
            h.update(name.as_bytes());
            h.update(&[0]);
            for v in entry.value.data() {
                h.update(&v.to_le_bytes());
            }
        }
    }
    h.finalize()
}

/// CRC over every parameter in the store (names and value bits); the
/// whole-model counterpart of `group_crc`.
fn store_crc(store: &ParamStore) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for (name, entry) in store.iter() {
        h.update(name.as_bytes());
        h.update(&[0]);
        for v in entry.value.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finalize()
}

fn indices_crc(indices: &[u32]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for i in indices {
        h.update(&i.to_le_bytes());
    }
    h.finalize()
}

fn fingerprint(
    stage: &str,
    strategy: Strategy,
    encoder: &EncoderConfig,
    train: &TrainConfig,
    dataset: &Dataset,
    teacher_crc: Option<u32>,
    lists: &SplitLists,
) -> String {
    let v = serde_json::json!({
        "stage": stage,
        "strategy": strategy.name(),
        "encoder": encoder,
        "train": train,
        "dataset": format!(
            "{}:{}",
            dataset.manifest.config_sha256, dataset.manifest.blob_crc32
        ),
        "teacher_crc": teacher_crc,
        "split_crc": [indices_crc(&lists.train), indices_crc(&lists.val)],
    });
    sha256_hex(&v.to_string())
}

struct LoopPlan<'a> {
    dataset: &'a Dataset,
    encoder: &'a EncoderConfig,
    train: &'a TrainConfig,
    out_dir: PathBuf,
    /// Stage tag: names the RNG streams, the log lines, and the ckpt extra.
    stage: &'static str,
    strategy: Strategy,
    /// Model tag stored in checkpoints ("teacher" | "student" | "joint").
    model_tag: &'static str,
    epochs: usize,
    batch: usize,
    augment_enabled: bool,
    train_indices: Vec<u32>,
    val_indices: Vec<u32>,
    fingerprint: String,
    /// Hold the learning rate at `lr0` for the whole run instead of the
    /// standard 80%-decay schedule (used by short fine-tuning phases).
    constant_lr: bool,
    /// Test hook: stop after this many epochs are complete (simulating an
    /// interrupted run); `None` runs to the configured end.
    interrupt_after: Option<usize>,
}

enum StepKind<'a> {
    Teacher {
        model: &'a TeacherModel,
        weights: LossWeights,
    },
    Student {
        model: &'a StudentModel,
        teacher: Option<&'a TeacherModel>,
        guidance: EmbedGuidance,
        weights: LossWeights,
    },
    Joint {
        teacher: &'a TeacherModel,
        student: &'a StudentModel,
        weights: LossWeights,
    },
}

impl StepKind<'_> {
    fn eval_kind(&self) -> ModelKind {
        match self {
            StepKind::Teacher { .. } => ModelKind::Teacher,
            _ => ModelKind::Student,
        }
    }

    fn needs_clouds(&self) -> bool {
        match self {
            StepKind::Teacher { .. } | StepKind::Joint { .. } => true,
            StepKind::Student {
                guidance, weights, ..
            } => {
                (weights.omega2 != 0.0 && *guidance != EmbedGuidance::None)
                    || weights.omega3 != 0.0
            }
        }
    }
}

struct RunState {
    store: ParamStore,
    next_epoch: usize,
    best: Option<BestState>,
}

fn parse_best(extra: &serde_json::Value) -> Option<BestState> {
    serde_json::from_value(extra.get("best")?.clone()).ok()
}

/// Load `out_dir/last` if present (validating the fingerprint), otherwise
/// build a fresh store with `init`.
fn load_or_init(
    out_dir: &Path,
    fp: &str,
    init: impl FnOnce() -> Result<ParamStore>,
) -> Result<RunState> {
    let last = out_dir.join(LAST_DIR);
    if last.join(MANIFEST_FILE).exists() {
        let (store, extra) = load_store(&last)?;
        let stored = extra.get("fingerprint").and_then(|v| v.as_str()).unwrap_or("");
        if stored != fp {
            return Err(Error::Incompatible(format!(
                "checkpoint in {} was produced by a different run configuration; \
                 refusing to resume (fingerprint {} != {})",
                last.display(),
                &stored[..stored.len().min(12)],
                &fp[..12]
            )));
        }
        let next_epoch = extra
            .get("epoch_done")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("checkpoint missing epoch_done".into()))?
            as usize;
        Ok(RunState {
            store,
            next_epoch,
            best: parse_best(&extra),
        })
    } else {
        Ok(RunState {
            store: init()?,
            next_epoch: 0,
            best: None,
        })
    }
}

struct StepOut {
    total: f64,
    /// (name, unweighted value, weight).
    components: Vec<(String, f64, f64)>,
    grads: BTreeMap<String, Tensor>,
    bn_updates: Vec<(String, BatchStats)>,
}

fn add_weighted(
    tape: &mut Tape,
    total: Option<Var>,
    components: &mut Vec<(String, f64, f64)>,
    name: &str,
    term: Var,
    weight: f64,
) -> Result<Option<Var>> {
    components.push((name.to_string(), tape.value_scalar(term), weight));
    let w = tape.scale(term, weight)?;
    Ok(Some(match total {
        None => w,
        Some(t) => tape.add(t, w)?,
    }))
}

fn run_step(
    step: &StepKind,
    store: &ParamStore,
    encoder: &EncoderConfig,
    images: Tensor,
    clouds: Option<Tensor>,
    targets: &[PoseTarget],
) -> Result<StepOut> {
    let bins = &encoder.bins;
    match step {
        StepKind::Teacher { model, weights } => {
            let mut tape = Tape::new();
            let img = tape.constant(images)?;
            let cld = tape.constant(clouds.expect("teacher step needs clouds"))?;
            let out = model.forward(&mut tape, store, img, cld)?;
            // The projection subgraph is built only when the contrastive
            // term is active, so a κ₂ = 0 run is structurally identical
            // to pose-only training (placeholder argument is never read).
            let z = if weights.kappa2 != 0.0 {
                model.project(&mut tape, store, out.x)?
            } else {
                out.h
            };
            let bundle = teacher_loss(&mut tape, &out.heads, z, out.h, targets, bins, weights)?;
            let grads = tape.backward(bundle.total)?;
            Ok(StepOut {
                total: bundle.total_value(&tape),
                components: bundle.components,
                grads,
                bn_updates: vec![],
            })
        }
        StepKind::Student {
            model,
            teacher,
            guidance,
            weights,
        } => {
            let need_embed = weights.omega2 != 0.0 && *guidance != EmbedGuidance::None;
            let need_z_t = need_embed && *guidance == EmbedGuidance::Kl;
            let need_h_t = need_embed && *guidance == EmbedGuidance::ContrastiveToTeacher;
            let need_logits = weights.omega3 != 0.0;

            // Distillation targets from a separate no-gradient teacher
            // pass: the student tape sees them as constants, so no
            // gradient path into the teacher exists at all.
            let mut z_t_val = None;
            let mut h_t_val = None;
            let mut logits_val: Option<[Tensor; 3]> = None;
            if need_z_t || need_h_t || need_logits {
                let tm = teacher.ok_or_else(|| {
                    Error::Config("this strategy requires a teacher checkpoint".into())
                })?;
                let mut ttape = Tape::new();
                let img = ttape.constant(images.clone())?;
                let cld = ttape.constant(
                    clouds.clone().expect("distilling student step needs clouds"),
                )?;
                let tout = tm.forward(&mut ttape, store, img, cld)?;
                if need_z_t {
                    let z = tm.project(&mut ttape, store, tout.x)?;
                    z_t_val = Some(ttape.value(z).clone());
                }
                if need_h_t {
                    h_t_val = Some(ttape.value(tout.h).clone());
                }
                if need_logits {
                    logits_val = Some([
                        ttape.value(tout.heads.logits[0]).clone(),
                        ttape.value(tout.heads.logits[1]).clone(),
                        ttape.value(tout.heads.logits[2]).clone(),
                    ]);
                }
            }

            let mut tape = Tape::new();
            let img = tape.constant(images)?;
            let out = model.forward(&mut tape, store, img, true)?;
            let z_s = if need_embed {
                model.project(&mut tape, store, out.h)?
            } else {
                out.h
            };
            let refs = TeacherRefs {
                z: z_t_val.map(|t| tape.constant(t)).transpose()?,
                h: h_t_val.map(|t| tape.constant(t)).transpose()?,
                logits: match logits_val {
                    None => None,
                    Some([a, b, c]) => Some([
                        tape.constant(a)?,
                        tape.constant(b)?,
                        tape.constant(c)?,
                    ]),
                },
            };
            let bundle = student_loss(
                &mut tape, &out.heads, z_s, targets, bins, weights, *guidance, &refs,
            )?;
            let grads = tape.backward(bundle.total)?;
            Ok(StepOut {
                total: bundle.total_value(&tape),
                components: bundle.components,
                grads,
                bn_updates: out.bn_updates,
            })
        }
        StepKind::Joint {
            teacher,
            student,
            weights,
        } => {
            let mut tape = Tape::new();
            let img = tape.constant(images)?;
            let cld = tape.constant(clouds.expect("joint step needs clouds"))?;
            let tout = teacher.forward(&mut tape, store, img, cld)?;
            let sout = student.forward(&mut tape, store, img, true)?;
            let mut components = Vec::new();
            let pose_t = pose_loss(&mut tape, &tout.heads, targets, bins)?;
            let mut total = add_weighted(
                &mut tape,
                None,
                &mut components,
                "pose_teacher",
                pose_t,
                weights.kappa1,
            )?;
            let pose_s = pose_loss(&mut tape, &sout.heads, targets, bins)?;
            total = add_weighted(
                &mut tape,
                total,
                &mut components,
                "pose_student",
                pose_s,
                weights.omega1,
            )?;
            if weights.kappa2 != 0.0 {
                let z_s = student.project(&mut tape, store, sout.h)?;
                let cl = infonce(&mut tape, z_s, tout.h, weights.tau)?;
                total = add_weighted(
                    &mut tape,
                    total,
                    &mut components,
                    "contrastive",
                    cl,
                    weights.kappa2,
                )?;
            }
            let total = total.expect("at least the pose terms are present");
            let grads = tape.backward(total)?;
            Ok(StepOut {
                total: tape.value_scalar(total),
                components,
                grads,
                bn_updates: sout.bn_updates,
            })
        }
    }
}

fn ckpt_extra(plan: &LoopPlan, epoch_done: usize, best: &Option<BestState>) -> serde_json::Value {
    serde_json::json!({
        "model": plan.model_tag,
        "encoder": plan.encoder,
        "train": plan.train,
        "strategy": plan.strategy.name(),
        "stage": plan.stage,
        "fingerprint": plan.fingerprint,
        "dataset_sha256": plan.dataset.manifest.config_sha256,
        "epochs": plan.epochs,
        "epoch_done": epoch_done,
        "best": best,
    })
}

fn run_training_loop(plan: &LoopPlan, step: &StepKind, mut state: RunState) -> Result<StageReport> {
    if plan.train_indices.len() < 2 {
        return Err(Error::Invalid(format!(
            "training split has {} samples; need at least 2",
            plan.train_indices.len()
        )));
    }
    if plan.val_indices.is_empty() {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    fs::create_dir_all(&plan.out_dir)?;
    let end = plan
        .interrupt_after
        .map(|k| k.min(plan.epochs))
        .unwrap_or(plan.epochs);
    if state.next_epoch >= plan.epochs {
        // Already complete: report the stored outcome without retraining.
        let best = state.best.ok_or_else(|| {
            Error::Format("completed checkpoint is missing its best-epoch record".into())
        })?;
        return Ok(StageReport {
            epochs_run: state.next_epoch,
            best,
            out_dir: plan.out_dir.clone(),
        });
    }
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(plan.out_dir.join(TRAIN_LOG_FILE))?;
    let eval_kind = step.eval_kind();
    let is_joint = matches!(step, StepKind::Joint { .. });

    for epoch in state.next_epoch..end {
        let lr = if plan.constant_lr {
            plan.train.lr0
        } else {
            lr_at(epoch, plan.epochs, plan.train.lr0)
        };
        let mut order = plan.train_indices.clone();
        let shuffle_seed = derive_seed(
            plan.train.seed,
            &format!("{}-shuffle", plan.stage),
            epoch as u64,
            0,
        );
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(
            plan.train.seed,
            &format!("{}-augment", plan.stage),
            epoch as u64,
            0,
        ));

        let mut total_sum = 0.0;
        let mut comp_sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut n_samples = 0usize;
        for (batch_index, chunk) in order.chunks(plan.batch).enumerate() {
            if chunk.len() < 2 {
                // A trailing single sample cannot form a batch (the
                // contrastive and batch-norm paths need 2+ rows).
                continue;
            }
            let mut rows: Vec<Vec<f32>> = Vec::with_capacity(chunk.len());
            let mut poses: Vec<EulerPose> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if plan.augment_enabled {
                    let draw = draw_augmentation(&plan.train.augment, &mut aug_rng);
                    let (img, pose) = apply_augmentation_draw(
                        plan.dataset,
                        i as usize,
                        &draw,
                        plan.train.augment.rotation_mode,
                    )?;
                    rows.push(img);
                    poses.push(pose);
                } else {
                    rows.push(plan.dataset.samples[i as usize].image.clone());
                    poses.push(plan.dataset.samples[i as usize].pose);
                }
            }
            let targets: Vec<PoseTarget> = poses
                .iter()
                .map(|p| encode_pose(p, &plan.encoder.bins))
                .collect::<Result<_>>()?;
            let images = images_tensor(&rows)?;
            let clouds = if step.needs_clouds() {
                Some(clouds_tensor_at(plan.dataset, chunk)?)
            } else {
                None
            };
            let out = run_step(step, &state.store, plan.encoder, images, clouds, &targets)
                .map_err(|e| match e {
                    Error::NonFinite(op) => Error::Divergence {
                        epoch,
                        batch: batch_index,
                        detail: format!("non-finite value produced by {op}"),
                    },
                    other => other,
                })?;
            if !out.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_index,
                    detail: format!("loss value {}", out.total),
                });
            }
            state
                .store
                .adam_step(&out.grads, &AdamConfig { lr, ..AdamConfig::default() })
                .map_err(|e| match e {
                    Error::NonFinite(op) => Error::Divergence {
                        epoch,
                        batch: batch_index,
                        detail: format!("non-finite value produced by {op}"),
                    },
                    other => other,
                })?;
            if !out.bn_updates.is_empty() {
                StudentModel::apply_bn_updates(&mut state.store, &out.bn_updates, BN_MOMENTUM)?;
            }
            let b = chunk.len() as f64;
            total_sum += out.total * b;
            for (name, value, _) in &out.components {
                *comp_sums.entry(name.clone()).or_insert(0.0) += value * b;
            }
            n_samples += chunk.len();
        }
        if n_samples == 0 {
            return Err(Error::Invalid(
                "no trainable batches (every chunk below 2 samples)".into(),
            ));
        }

        let (val_acc30, val_mederr) = eval_metrics(
            &state.store,
            plan.encoder,
            eval_kind,
            plan.dataset,
            &plan.val_indices,
        )?;

        let mut train_obj = serde_json::Map::new();
        train_obj.insert(
            "total".into(),
            serde_json::json!(total_sum / n_samples as f64),
        );
        for (name, sum) in &comp_sums {
            train_obj.insert(name.clone(), serde_json::json!(sum / n_samples as f64));
        }
        let mut val_obj = serde_json::Map::new();
        val_obj.insert("acc30".into(), serde_json::json!(val_acc30));
        val_obj.insert("mederr".into(), serde_json::json!(val_mederr));
        if is_joint {
            // The joint stage selects on student metrics; teacher metrics
            // are logged alongside for the record.
            let (t_acc, t_med) = eval_metrics(
                &state.store,
                plan.encoder,
                ModelKind::Teacher,
                plan.dataset,
                &plan.val_indices,
            )?;
            val_obj.insert("teacher_acc30".into(), serde_json::json!(t_acc));
            val_obj.insert("teacher_mederr".into(), serde_json::json!(t_med));
        }
        let line = serde_json::json!({
            "stage": plan.stage,
            "epoch": epoch,
            "lr": lr,
            "train": serde_json::Value::Object(train_obj),
            "val": serde_json::Value::Object(val_obj),
        });
        writeln!(log, "{line}")?;

        if improves(&state.best, val_acc30, val_mederr) {
            state.best = Some(BestState {
                epoch,
                acc30: val_acc30,
                mederr: val_mederr,
            });
            save_store(
                &plan.out_dir.join(BEST_DIR),
                &state.store,
                &ckpt_extra(plan, epoch + 1, &state.best),
            )?;
        }
        save_store(
            &plan.out_dir.join(LAST_DIR),
            &state.store,
            &ckpt_extra(plan, epoch + 1, &state.best),
        )?;
    }

    Ok(StageReport {
        epochs_run: end,
        best: state.best.expect("at least one epoch ran"),
        out_dir: plan.out_dir.clone(),
    })
}

/// Train the multi-modal teacher (pose heads + contrastive bridge) on the
/// dataset's train split; checkpoints, logs, and resumption live under
/// `out_dir` (`best/`, `last/`, `train.log.jsonl`).
pub fn train_stage1_teacher(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<StageReport> {
    stage1_inner(dataset, encoder, config, out_dir, &dataset.manifest.split, None)
}

pub(crate) fn stage1_inner(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    out_dir: &Path,
    lists: &SplitLists,
    interrupt_after: Option<usize>,
) -> Result<StageReport> {
    encoder.validate()?;
    config.validate()?;
    check_dataset_compat(dataset, encoder)?;
    let plan = LoopPlan {
        dataset,
        encoder,
        train: config,
        out_dir: out_dir.to_path_buf(),
        stage: "teacher",
        strategy: Strategy::TeacherOnly,
        model_tag: "teacher",
        epochs: config.epochs_stage1,
        batch: config.batch_stage1,
        augment_enabled: config.augment.stage1,
        train_indices: lists.train.clone(),
        val_indices: lists.val.clone(),
        fingerprint: fingerprint(
            "teacher",
            Strategy::TeacherOnly,
            encoder,
            config,
            dataset,
            None,
            lists,
        ),
        constant_lr: false,
        interrupt_after,
    };
    let state = load_or_init(out_dir, &plan.fingerprint, || {
        let mut store = ParamStore::new();
        TeacherModel::init(
            encoder.clone(),
            &mut store,
            derive_seed(config.seed, "init-teacher", 0, 0),
        )?;
        Ok(store)
    })?;
    let model = TeacherModel::new(encoder.clone(), &state.store)?;
    run_training_loop(
        &plan,
        &StepKind::Teacher {
            model: &model,
            weights: config.weights,
        },
        state,
    )
}

pub(crate) fn check_dataset_compat(dataset: &Dataset, encoder: &EncoderConfig) -> Result<()> {
    if dataset.resolution() != encoder.resolution {
        return Err(Error::Incompatible(format!(
            "dataset resolution {} vs encoder resolution {}",
            dataset.resolution(),
            encoder.resolution
        )));
    }
    if dataset.n_points() != encoder.n_points {
        return Err(Error::Incompatible(format!(
            "dataset has {} points per cloud, encoder expects {}",
            dataset.n_points(),
            encoder.n_points
        )));
    }
    Ok(())
}

/// The per-strategy stage-2 recipe: embedding guidance plus the effective
/// loss weights (a zeroed weight removes its term entirely).
fn stage2_recipe(strategy: Strategy, weights: LossWeights) -> Result<(EmbedGuidance, LossWeights)> {
    match strategy {
        Strategy::StudentBaseline => Ok((
            EmbedGuidance::None,
            LossWeights {
                omega2: 0.0,
                omega3: 0.0,
                ..weights
            },
        )),
        Strategy::ThreeDAugPose => Ok((EmbedGuidance::Kl, weights)),
        Strategy::OneSideCL => Ok((EmbedGuidance::ContrastiveToTeacher, weights)),
        other => Err(Error::Config(format!(
            "strategy {} is not a student-stage strategy (expected baseline, 3daug, or onesidecl)",
            other.name()
        ))),
    }
}

fn copy_group(dst: &mut ParamStore, src: &ParamStore, prefix: &str) -> Result<usize> {
    let dotted = format!("{prefix}.");
    let mut copied = 0;
    for (name, entry) in src.iter() {
        if name == prefix || name.starts_with(&dotted) {
            if entry.trainable {
                dst.insert(name, entry.value.clone())?;
            } else {
                dst.insert_buffer(name, entry.value.clone())?;
            }
            copied += 1;
        }
    }
    if copied == 0 {
        return Err(Error::Incompatible(format!(
            "checkpoint holds no parameters under group {prefix}"
        )));
    }
    Ok(copied)
}

/// Equality of the encoder fields the teacher actually uses; the student's
/// widths are free to differ (e.g. ablations over student topologies reuse
/// one teacher).
fn teacher_compatible(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    let mut aligned = a.clone();
    aligned.student_image_hidden = b.student_image_hidden.clone();
    aligned.student_image_dim = b.student_image_dim;
    aligned.student_stack_hidden = b.student_stack_hidden.clone();
    aligned.student_proj_hidden = b.student_proj_hidden.clone();
    aligned == *b
}

fn load_teacher(teacher_ckpt: &Path, encoder: &EncoderConfig) -> Result<(ParamStore, u32)> {
    let (t_store, extra) = load_store(teacher_ckpt)?;
    let ckpt_encoder: EncoderConfig = serde_json::from_value(
        extra
            .get("encoder")
            .cloned()
            .ok_or_else(|| Error::Incompatible("checkpoint lacks encoder topology".into()))?,
    )
    .map_err(|e| Error::Incompatible(format!("checkpoint encoder unparsable: {e}")))?;
    if !teacher_compatible(&ckpt_encoder, encoder) {
        return Err(Error::Incompatible(
            "teacher checkpoint encoder topology differs from the configured encoder".into(),
        ));
    }
    // Teacher-side fields agree, and the teacher reads nothing else.
    TeacherModel::new(encoder.clone(), &t_store)?;
    let crc = group_crc(&t_store, TEACHER_PREFIX);
    Ok((t_store, crc))
}

/// Train the image-only student. For the distilling strategies the frozen
/// teacher is loaded from `teacher_ckpt` (a checkpoint directory) and its
/// outputs enter the loss as constants; `StudentBaseline` needs none.
pub fn train_stage2_student(
    dataset: &Dataset,
    teacher_ckpt: Option<&Path>,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    strategy: Strategy,
    out_dir: &Path,
) -> Result<StageReport> {
    stage2_inner(
        dataset,
        teacher_ckpt,
        encoder,
        config,
        strategy,
        out_dir,
        &dataset.manifest.split,
        None,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn stage2_inner(
    dataset: &Dataset,
    teacher_ckpt: Option<&Path>,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    strategy: Strategy,
    out_dir: &Path,
    lists: &SplitLists,
    interrupt_after: Option<usize>,
) -> Result<StageReport> {
    encoder.validate()?;
    config.validate()?;
    check_dataset_compat(dataset, encoder)?;
    let (guidance, weights) = stage2_recipe(strategy, config.weights)?;
    let needs_teacher = guidance != EmbedGuidance::None || weights.omega3 != 0.0;
    let teacher_parts = if needs_teacher {
        let path = teacher_ckpt.ok_or_else(|| {
            Error::Config(format!(
                "strategy {} requires a teacher checkpoint",
                strategy.name()
            ))
        })?;
        Some(load_teacher(path, encoder)?)
    } else {
        None
    };
    let teacher_crc = teacher_parts.as_ref().map(|(_, crc)| *crc);
    let fp = fingerprint(
        "student", strategy, encoder, config, dataset, teacher_crc, lists,
    );
    let plan = LoopPlan {
        dataset,
        encoder,
        train: config,
        out_dir: out_dir.to_path_buf(),
        stage: "student",
        strategy,
        model_tag: "student",
        epochs: config.epochs_stage2,
        batch: config.batch_stage2,
        augment_enabled: config.augment.stage2,
        train_indices: lists.train.clone(),
        val_indices: lists.val.clone(),
        fingerprint: fp.clone(),
        constant_lr: false,
        interrupt_after,
    };
    let t_store = teacher_parts.map(|(s, _)| s);
    let mut state = load_or_init(out_dir, &fp, || {
        let mut store = ParamStore::new();
        if let Some(ts) = &t_store {
            copy_group(&mut store, ts, TEACHER_PREFIX)?;
        }
        StudentModel::init(
            encoder.clone(),
            &mut store,
            derive_seed(config.seed, "init-student", 0, 0),
        )?;
        Ok(store)
    })?;
    let teacher_model = if needs_teacher {
        state.store.freeze_group(TEACHER_PREFIX)?;
        Some(TeacherModel::new(encoder.clone(), &state.store)?)
    } else {
        None
    };
    let student_model = StudentModel::new(encoder.clone(), &state.store)?;
    run_training_loop(
        &plan,
        &StepKind::Student {
            model: &student_model,
            teacher: teacher_model.as_ref(),
            guidance,
            weights,
        },
        state,
    )
}

/// Joint variant: stage 1 trains teacher and student together (both pose
/// losses plus the contrastive loss tying z_s to the teacher embedding
/// h_t), stage 2 freezes the teacher and fine-tunes the student with the
/// pose loss plus output distillation. Artifacts: `out_dir/joint/` for the
/// joint phase, `out_dir/{best,last}` for the final student.
pub fn train_jointcl(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<StageReport> {
    jointcl_inner(dataset, encoder, config, out_dir, &dataset.manifest.split)
}

pub(crate) fn jointcl_inner(
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    out_dir: &Path,
    lists: &SplitLists,
) -> Result<StageReport> {
    encoder.validate()?;
    config.validate()?;
    check_dataset_compat(dataset, encoder)?;
    let joint_dir = out_dir.join("joint");
    let fp1 = fingerprint(
        "joint",
        Strategy::JointCL,
        encoder,
        config,
        dataset,
        None,
        lists,
    );
    let plan1 = LoopPlan {
        dataset,
        encoder,
        train: config,
        out_dir: joint_dir.clone(),
        stage: "joint",
        strategy: Strategy::JointCL,
        model_tag: "joint",
        epochs: config.epochs_stage1,
        batch: config.batch_stage1,
        augment_enabled: config.augment.stage1,
        train_indices: lists.train.clone(),
        val_indices: lists.val.clone(),
        fingerprint: fp1.clone(),
        constant_lr: false,
        interrupt_after: None,
    };
    let state1 = load_or_init(&joint_dir, &fp1, || {
        let mut store = ParamStore::new();
        TeacherModel::init(
            encoder.clone(),
            &mut store,
            derive_seed(config.seed, "init-teacher", 0, 0),
        )?;
        StudentModel::init(
            encoder.clone(),
            &mut store,
            derive_seed(config.seed, "init-student", 0, 0),
        )?;
        Ok(store)
    })?;
    let teacher = TeacherModel::new(encoder.clone(), &state1.store)?;
    let student = StudentModel::new(encoder.clone(), &state1.store)?;
    run_training_loop(
        &plan1,
        &StepKind::Joint {
            teacher: &teacher,
            student: &student,
            weights: config.weights,
        },
        state1,
    )?;

    // Fine-tune phase: start from the joint result, freeze the teacher,
    // keep pose + output-KL (the ω₂ embedding term is dropped).
    let (joint_store, _) = load_store(&joint_dir.join(LAST_DIR))?;
    let t_crc = group_crc(&joint_store, TEACHER_PREFIX);
    let ft_weights = LossWeights {
        omega2: 0.0,
        ..config.weights
    };
    let fp2 = fingerprint(
        "finetune",
        Strategy::JointCL,
        encoder,
        config,
        dataset,
        Some(t_crc),
        lists,
    );
    let plan2 = LoopPlan {
        dataset,
        encoder,
        train: config,
        out_dir: out_dir.to_path_buf(),
        stage: "finetune",
        strategy: Strategy::JointCL,
        model_tag: "student",
        epochs: config.epochs_stage2,
        batch: config.batch_stage2,
        augment_enabled: config.augment.stage2,
        train_indices: lists.train.clone(),
        val_indices: lists.val.clone(),
        fingerprint: fp2.clone(),
        constant_lr: false,
        interrupt_after: None,
    };
    let mut state2 = load_or_init(out_dir, &fp2, || Ok(joint_store.clone()))?;
    state2.store.freeze_group(TEACHER_PREFIX)?;
    let teacher2 = TeacherModel::new(encoder.clone(), &state2.store)?;
    let student2 = StudentModel::new(encoder.clone(), &state2.store)?;
    run_training_loop(
        &plan2,
        &StepKind::Student {
            model: &student2,
            teacher: Some(&teacher2),
            guidance: EmbedGuidance::None,
            weights: ft_weights,
        },
        state2,
    )
}

/// Result of executing one strategy end to end.
#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub strategy: Strategy,
    pub seed: u64,
    /// Validation Acc30 / MedErr at the selected best epoch.
    pub acc30: f64,
    pub mederr: f64,
    /// Forward path of the final artifact.
    pub model: ModelKind,
    /// Directory of the best checkpoint of the final model.
    pub best_dir: PathBuf,
}

/// Execute a strategy's full recipe under `out_dir`. Distilling
/// strategies reuse `teacher_ckpt` when given, otherwise they train their
/// own teacher under `out_dir/teacher` first. Re-running with the same
/// inputs resumes (or just reports) instead of retraining.
pub fn run_strategy(
    strategy: Strategy,
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    teacher_ckpt: Option<&Path>,
    out_dir: &Path,
) -> Result<StrategyOutcome> {
    run_strategy_inner(
        strategy,
        dataset,
        encoder,
        config,
        teacher_ckpt,
        out_dir,
        &dataset.manifest.split,
    )
}

pub(crate) fn run_strategy_inner(
    strategy: Strategy,
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    teacher_ckpt: Option<&Path>,
    out_dir: &Path,
    lists: &SplitLists,
) -> Result<StrategyOutcome> {
    let (report, model) = match strategy {
        Strategy::TeacherOnly => (
            stage1_inner(dataset, encoder, config, out_dir, lists, None)?,
            ModelKind::Teacher,
        ),
        Strategy::StudentBaseline => (
            stage2_inner(dataset, None, encoder, config, strategy, out_dir, lists, None)?,
            ModelKind::Student,
        ),
        Strategy::ThreeDAugPose | Strategy::OneSideCL => {
            let teacher_dir = match teacher_ckpt {
                Some(p) => p.to_path_buf(),
                None => {
                    stage1_inner(
                        dataset,
                        encoder,
                        config,
                        &out_dir.join("teacher"),
                        lists,
                        None,
                    )?
                    .out_dir
                    .join(BEST_DIR)
                }
            };
            (
                stage2_inner(
                    dataset,
                    Some(&teacher_dir),
                    encoder,
                    config,
                    strategy,
                    out_dir,
                    lists,
                    None,
                )?,
                ModelKind::Student,
            )
        }
        Strategy::JointCL => (
            jointcl_inner(dataset, encoder, config, out_dir, lists)?,
            ModelKind::Student,
        ),
    };
    Ok(StrategyOutcome {
        strategy,
        seed: config.seed,
        acc30: report.best.acc30,
        mederr: report.best.mederr,
        model,
        best_dir: report.out_dir.join(BEST_DIR),
    })
}

/// Pose-only fine-tuning: continue from the checkpoint at `start_ckpt`
/// with every distillation and contrastive term disabled, at a constant
/// learning rate of `config.lr0`, for `config.epochs_stage2` epochs over
/// `lists`. Optimizer state travels with the parameters (moments resume
/// from the checkpoint). The adapted model is `out_dir/last` — the loop
/// still tracks a "best" on `lists.val`, but adaptation protocols that
/// must not select on their evaluation set should read `last`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finetune_pose_only(
    dataset: &Dataset,
    start_ckpt: &Path,
    model: ModelKind,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    strategy: Strategy,
    out_dir: &Path,
    lists: &SplitLists,
) -> Result<StageReport> {
    encoder.validate()?;
    config.validate()?;
    check_dataset_compat(dataset, encoder)?;
    let (start_store, _) = load_store(start_ckpt)?;
    let start_crc = store_crc(&start_store);
    let weights = LossWeights {
        kappa2: 0.0,
        omega2: 0.0,
        omega3: 0.0,
        ..config.weights
    };
    let fp = fingerprint(
        "fewshot",
        strategy,
        encoder,
        config,
        dataset,
        Some(start_crc),
        lists,
    );
    let plan = LoopPlan {
        dataset,
        encoder,
        train: config,
        out_dir: out_dir.to_path_buf(),
        stage: "fewshot",
        strategy,
        model_tag: match model {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        },
        epochs: config.epochs_stage2,
        batch: config.batch_stage2,
        augment_enabled: config.augment.stage2,
        train_indices: lists.train.clone(),
        val_indices: lists.val.clone(),
        fingerprint: fp.clone(),
        constant_lr: true,
        interrupt_after: None,
    };
    let state = load_or_init(out_dir, &fp, || Ok(start_store.clone()))?;
    match model {
        ModelKind::Teacher => {
            let teacher = TeacherModel::new(encoder.clone(), &state.store)?;
            run_training_loop(
                &plan,
                &StepKind::Teacher {
                    model: &teacher,
                    weights,
                },
                state,
            )
        }
        ModelKind::Student => {
            let student = StudentModel::new(encoder.clone(), &state.store)?;
            run_training_loop(
                &plan,
                &StepKind::Student {
                    model: &student,
                    teacher: None,
                    guidance: EmbedGuidance::None,
                    weights,
                },
                state,
            )
        }
    }
}
