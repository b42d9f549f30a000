//! Network definitions: the multi-modal teacher (image + point cloud) and
//! the image-only student, both expressed as named parameter groups over
//! a [`crate::diffmath::ParamStore`] and built op-by-op on a tape.
//!
//! # Dimension chain
//!
//! The fused teacher embedding `h_t`, the teacher projection `z_t`, the
//! student embedding `h_s`, and the student projection `z_s` all share
//! `fused_dim`. That equality is what lets the contrastive bridge compare
//! `z` against `h` directly and lets embedding distillation match the
//! student to the teacher; it is asserted at construction.
//!
//! # Naming and freezing
//!
//! Parameters live under the dotted prefixes `teacher.*` / `student.*`,
//! so a whole model (or a sub-tree like `student.stack`) can be frozen as
//! a group. When the student group is frozen, its batch-norm layers
//! automatically run in eval mode (frozen models must be
//! batch-independent).

use crate::diffmath::{BatchStats, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::posemath::AngleBinSpec;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Momentum of the running-statistic update for batch norm.
pub const BN_MOMENTUM: f64 = 0.1;

/// Widths of every sub-network. Defaults are the desk-scale benchmark
/// sizes; the head-stack widths keep the 2048-800-400-200 ratio of the
/// full-scale recipe at 1/16 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Image side length; the image encoders read `resolution²` pixels.
    pub resolution: usize,
    /// Points per cloud fed to the teacher's point encoder.
    pub n_points: usize,
    /// Hidden widths of the teacher image encoder MLP.
    pub teacher_image_hidden: Vec<usize>,
    /// Teacher image feature width (x_t) — also the projection input.
    pub image_feature_dim: usize,
    /// Hidden widths of the shared per-point MLP.
    pub point_hidden: Vec<usize>,
    /// Point feature width before max-pooling (d_t).
    pub shape_feature_dim: usize,
    /// Widths of the first three fusion layers (the fourth maps to
    /// `fused_dim` with tanh).
    pub fuse_hidden: Vec<usize>,
    /// Shared embedding width: h_t, z_t, h_s, z_s.
    pub fused_dim: usize,
    /// Hidden widths of the student image encoder MLP.
    pub student_image_hidden: Vec<usize>,
    /// Student image feature width (x_s), input of the head stack.
    pub student_image_dim: usize,
    /// Widths of the head-stack layers before the final `fused_dim` layer;
    /// every stack layer is linear → batch norm → ReLU.
    pub student_stack_hidden: Vec<usize>,
    /// Hidden widths of the teacher projection head G_t.
    pub teacher_proj_hidden: Vec<usize>,
    /// Hidden widths of the student projection head G_s.
    pub student_proj_hidden: Vec<usize>,
    /// Pose discretization shared by both pose heads.
    pub bins: AngleBinSpec,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let fused_dim = 16;
        EncoderConfig {
            resolution: 32,
            n_points: 256,
            teacher_image_hidden: vec![128],
            image_feature_dim: 64,
            point_hidden: vec![32],
            shape_feature_dim: 64,
            fuse_hidden: vec![64, 32, 16],
            fused_dim,
            student_image_hidden: vec![160],
            student_image_dim: 128,
            student_stack_hidden: vec![50, 25],
            teacher_proj_hidden: vec![4 * fused_dim, 2 * fused_dim],
            student_proj_hidden: vec![2 * fused_dim],
            bins: AngleBinSpec::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < crate::datagen::MIN_RESOLUTION {
            return Err(Error::Config(format!(
                "resolution {} below minimum {}",
                self.resolution,
                crate::datagen::MIN_RESOLUTION
            )));
        }
        if self.n_points < 8 {
            return Err(Error::Config(format!(
                "n_points {} below minimum 8",
                self.n_points
            )));
        }
        if self.fused_dim < 2 {
            return Err(Error::Config(
                "fused_dim must be at least 2 (embedding softmax needs support)".into(),
            ));
        }
        for (label, dims) in [
            ("teacher_image_hidden", &self.teacher_image_hidden),
            ("point_hidden", &self.point_hidden),
            ("fuse_hidden", &self.fuse_hidden),
            ("student_image_hidden", &self.student_image_hidden),
            ("student_stack_hidden", &self.student_stack_hidden),
            ("teacher_proj_hidden", &self.teacher_proj_hidden),
            ("student_proj_hidden", &self.student_proj_hidden),
        ] {
            if dims.iter().any(|d| *d == 0) {
                return Err(Error::Config(format!("{label} contains a zero width")));
            }
        }
        if self.image_feature_dim == 0
            || self.shape_feature_dim == 0
            || self.student_image_dim == 0
        {
            return Err(Error::Config("feature dims must be positive".into()));
        }
        self.bins.validate()
    }

    pub fn image_dim(&self) -> usize {
        self.resolution * self.resolution
    }
}

/// Layer widths of an MLP given input/hidden/output dims.
fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<(usize, usize)> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims.windows(2).map(|w| (w[0], w[1])).collect()
}

fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

fn init_linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.insert(&format!("{name}.w"), xavier_uniform(rng, fan_in, fan_out))?;
    store.insert(&format!("{name}.b"), Tensor::zeros(vec![fan_out]))?;
    Ok(())
}

fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let xw = tape.matmul(x, w)?;
    tape.add_row_vec(xw, b)
}

/// Plain MLP: ReLU on every hidden layer, linear output (optionally a
/// final activation applied by the caller).
fn mlp(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    layer_count: usize,
    mut x: Var,
    relu_last: bool,
) -> Result<Var> {
    for i in 0..layer_count {
        x = linear(tape, store, &format!("{prefix}.{i}"), x)?;
        if i + 1 < layer_count || relu_last {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// Pose-head outputs: per-angle bin logits and per-angle per-bin offsets
/// in [0, 1]; order azimuth, elevation, in-plane.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub logits: [Var; 3],
    pub offsets: [Var; 3],
}

const ANGLE_NAMES: [&str; 3] = ["azim", "elev", "inplane"];

fn init_heads(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input_dim: usize,
    bins: &AngleBinSpec,
) -> Result<()> {
    for (k, angle) in ANGLE_NAMES.iter().enumerate() {
        let n = bins.bin_count(k);
        init_linear(store, rng, &format!("{prefix}.{angle}.logit"), input_dim, n)?;
        init_linear(store, rng, &format!("{prefix}.{angle}.offset"), input_dim, n)?;
    }
    Ok(())
}

fn forward_heads(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    h: Var,
) -> Result<HeadOutputs> {
    let mut logits = Vec::with_capacity(3);
    let mut offsets = Vec::with_capacity(3);
    for angle in ANGLE_NAMES {
        logits.push(linear(tape, store, &format!("{prefix}.{angle}.logit"), h)?);
        let raw = linear(tape, store, &format!("{prefix}.{angle}.offset"), h)?;
        offsets.push(tape.sigmoid(raw)?);
    }
    Ok(HeadOutputs {
        logits: [logits[0], logits[1], logits[2]],
        offsets: [offsets[0], offsets[1], offsets[2]],
    })
}

/// Multi-modal teacher: image MLP → x_t, shared per-point MLP + max-pool
/// → d_t, fusion MLP (ReLU ×3, tanh) → h_t, pose heads on h_t, and the
/// projection z_t = G_t(x_t) that forms the image-side half of the
/// contrastive bridge.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub config: EncoderConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherOutputs {
    /// Image feature x_t, shape (B, image_feature_dim).
    pub x: Var,
    /// Fused embedding h_t, shape (B, fused_dim), values in (−1, 1).
    pub h: Var,
    pub heads: HeadOutputs,
}

pub const TEACHER_PREFIX: &str = "teacher";
pub const STUDENT_PREFIX: &str = "student";

impl TeacherModel {
    /// Wrap an existing store (e.g. loaded from a checkpoint); verifies
    /// every expected parameter is present with the right shape.
    pub fn new(config: EncoderConfig, store: &ParamStore) -> Result<TeacherModel> {
        config.validate()?;
        let model = TeacherModel { config };
        model.verify(store)?;
        Ok(model)
    }

    /// Freshly initialize all teacher parameters (Xavier-uniform weights,
    /// zero biases), deterministically in the seed.
    pub fn init(config: EncoderConfig, store: &mut ParamStore, seed: u64) -> Result<TeacherModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, (fi, fo)) in TeacherModel::named_layers(&config) {
            init_linear(store, &mut rng, &name, fi, fo)?;
        }
        // Heads are initialized after the trunk, in angle order.
        init_heads(
            store,
            &mut rng,
            &format!("{TEACHER_PREFIX}.head"),
            config.fused_dim,
            &config.bins,
        )?;
        for (name, (fi, fo)) in TeacherModel::proj_layers(&config) {
            init_linear(store, &mut rng, &name, fi, fo)?;
        }
        TeacherModel::new(config, store)
    }

    fn named_layers(config: &EncoderConfig) -> Vec<(String, (usize, usize))> {
        let image = widths(
            config.image_dim(),
            &config.teacher_image_hidden,
            config.image_feature_dim,
        );
        let point = widths(3, &config.point_hidden, config.shape_feature_dim);
        let fuse = widths(
            config.image_feature_dim + config.shape_feature_dim,
            &config.fuse_hidden,
            config.fused_dim,
        );
        let mut out = Vec::new();
        for (i, d) in image.into_iter().enumerate() {
            out.push((format!("{TEACHER_PREFIX}.image.{i}"), d));
        }
        for (i, d) in point.into_iter().enumerate() {
            out.push((format!("{TEACHER_PREFIX}.point.{i}"), d));
        }
        for (i, d) in fuse.into_iter().enumerate() {
            out.push((format!("{TEACHER_PREFIX}.fuse.{i}"), d));
        }
        out
    }

    fn proj_layers(config: &EncoderConfig) -> Vec<(String, (usize, usize))> {
        widths(
            config.image_feature_dim,
            &config.teacher_proj_hidden,
            config.fused_dim,
        )
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("{TEACHER_PREFIX}.proj.{i}"), d))
        .collect()
    }

    fn verify(&self, store: &ParamStore) -> Result<()> {
        let mut expected = TeacherModel::named_layers(&self.config);
        expected.extend(TeacherModel::proj_layers(&self.config));
        for (name, (fi, fo)) in expected {
            check_linear(store, &name, fi, fo)?;
        }
        for (k, angle) in ANGLE_NAMES.iter().enumerate() {
            let n = self.config.bins.bin_count(k);
            check_linear(
                store,
                &format!("{TEACHER_PREFIX}.head.{angle}.logit"),
                self.config.fused_dim,
                n,
            )?;
            check_linear(
                store,
                &format!("{TEACHER_PREFIX}.head.{angle}.offset"),
                self.config.fused_dim,
                n,
            )?;
        }
        // The dimension chain h_t = z_t = fused_dim holds by construction;
        // keep it as a hard assertion against future topology edits.
        assert_eq!(
            TeacherModel::proj_layers(&self.config).last().unwrap().1 .1,
            self.config.fused_dim
        );
        Ok(())
    }

    /// Full forward pass. `image`: (B, resolution²), `cloud`: (B, 3·N)
    /// flat xyz per point. Returns x_t, h_t and the pose heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        cloud: Var,
    ) -> Result<TeacherOutputs> {
        let c = &self.config;
        let b = tape.value(image).dim(0);
        if tape.value(image).shape() != [b, c.image_dim()] {
            return Err(Error::Shape {
                op: "teacher_forward",
                detail: format!(
                    "image shape {:?}, expected ({b}, {})",
                    tape.value(image).shape(),
                    c.image_dim()
                ),
            });
        }
        if tape.value(cloud).shape() != [b, 3 * c.n_points] {
            return Err(Error::Shape {
                op: "teacher_forward",
                detail: format!(
                    "cloud shape {:?}, expected ({b}, {})",
                    tape.value(cloud).shape(),
                    3 * c.n_points
                ),
            });
        }
        let x = mlp(
            tape,
            store,
            &format!("{TEACHER_PREFIX}.image"),
            c.teacher_image_hidden.len() + 1,
            image,
            false,
        )?;
        // Shared per-point MLP: flatten points into rows, encode, pool.
        let flat = tape.reshape(cloud, vec![b * c.n_points, 3])?;
        let point_feat = mlp(
            tape,
            store,
            &format!("{TEACHER_PREFIX}.point"),
            c.point_hidden.len() + 1,
            flat,
            true,
        )?;
        let grouped = tape.reshape(point_feat, vec![b, c.n_points, c.shape_feature_dim])?;
        let d = tape.max_over_axis(grouped, 1)?;
        let fused_in = tape.concat(x, d, 1)?;
        let pre = mlp(
            tape,
            store,
            &format!("{TEACHER_PREFIX}.fuse"),
            c.fuse_hidden.len(),
            fused_in,
            true,
        )?;
        let last = linear(
            tape,
            store,
            &format!("{TEACHER_PREFIX}.fuse.{}", c.fuse_hidden.len()),
            pre,
        )?;
        let h = tape.tanh(last)?;
        let heads = forward_heads(tape, store, &format!("{TEACHER_PREFIX}.head"), h)?;
        Ok(TeacherOutputs { x, h, heads })
    }

    /// Contrastive projection z_t = G_t(x_t): the image-only bridge.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        mlp(
            tape,
            store,
            &format!("{TEACHER_PREFIX}.proj"),
            self.config.teacher_proj_hidden.len() + 1,
            x,
            false,
        )
    }
}

fn check_linear(store: &ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    for (suffix, shape) in [(".w", vec![fan_in, fan_out]), (".b", vec![fan_out])] {
        let full = format!("{name}{suffix}");
        let value = store
            .value(&full)
            .map_err(|_| Error::Incompatible(format!("checkpoint missing parameter {full}")))?;
        if value.shape() != shape {
            return Err(Error::Incompatible(format!(
                "parameter {full} has shape {:?}, expected {shape:?}",
                value.shape()
            )));
        }
    }
    Ok(())
}

/// Image-only student: image MLP → x_s, batch-normed head stack → h_s,
/// pose heads on h_s, projection z_s = G_s(h_s).
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub config: EncoderConfig,
}

#[derive(Debug, Clone)]
pub struct StudentOutputs {
    /// Image feature x_s, shape (B, student_image_dim).
    pub x: Var,
    /// Student embedding h_s, shape (B, fused_dim), non-negative (ReLU).
    pub h: Var,
    pub heads: HeadOutputs,
    /// Batch statistics produced by train-mode batch norm, keyed by the
    /// layer's buffer prefix; empty in eval mode. Apply with
    /// [`StudentModel::apply_bn_updates`] after the optimizer step.
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl StudentModel {
    pub fn new(config: EncoderConfig, store: &ParamStore) -> Result<StudentModel> {
        config.validate()?;
        let model = StudentModel { config };
        model.verify(store)?;
        Ok(model)
    }

    pub fn init(config: EncoderConfig, store: &mut ParamStore, seed: u64) -> Result<StudentModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, (fi, fo)) in StudentModel::image_layers(&config) {
            init_linear(store, &mut rng, &name, fi, fo)?;
        }
        for (i, (fi, fo)) in StudentModel::stack_dims(&config).into_iter().enumerate() {
            let name = format!("{STUDENT_PREFIX}.stack.{i}");
            init_linear(store, &mut rng, &name, fi, fo)?;
            store.insert(&format!("{name}.bn.gamma"), ones(fo))?;
            store.insert(&format!("{name}.bn.beta"), Tensor::zeros(vec![fo]))?;
            store.insert_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(vec![fo]))?;
            store.insert_buffer(&format!("{name}.bn.running_var"), ones(fo))?;
        }
        init_heads(
            store,
            &mut rng,
            &format!("{STUDENT_PREFIX}.head"),
            config.fused_dim,
            &config.bins,
        )?;
        for (name, (fi, fo)) in StudentModel::proj_layers(&config) {
            init_linear(store, &mut rng, &name, fi, fo)?;
        }
        StudentModel::new(config, store)
    }

    fn image_layers(config: &EncoderConfig) -> Vec<(String, (usize, usize))> {
        widths(
            config.image_dim(),
            &config.student_image_hidden,
            config.student_image_dim,
        )
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("{STUDENT_PREFIX}.image.{i}"), d))
        .collect()
    }

    fn stack_dims(config: &EncoderConfig) -> Vec<(usize, usize)> {
        widths(
            config.student_image_dim,
            &config.student_stack_hidden,
            config.fused_dim,
        )
    }

    fn proj_layers(config: &EncoderConfig) -> Vec<(String, (usize, usize))> {
        widths(
            config.fused_dim,
            &config.student_proj_hidden,
            config.fused_dim,
        )
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("{STUDENT_PREFIX}.proj.{i}"), d))
        .collect()
    }

    fn verify(&self, store: &ParamStore) -> Result<()> {
        for (name, (fi, fo)) in StudentModel::image_layers(&self.config) {
            check_linear(store, &name, fi, fo)?;
        }
        for (i, (fi, fo)) in StudentModel::stack_dims(&self.config).into_iter().enumerate() {
            let name = format!("{STUDENT_PREFIX}.stack.{i}");
            check_linear(store, &name, fi, fo)?;
            for bn in [
                "bn.gamma",
                "bn.beta",
                "bn.running_mean",
                "bn.running_var",
            ] {
                let full = format!("{name}.{bn}");
                let value = store.value(&full).map_err(|_| {
                    Error::Incompatible(format!("checkpoint missing parameter {full}"))
                })?;
                if value.shape() != [fo] {
                    return Err(Error::Incompatible(format!(
                        "parameter {full} has shape {:?}, expected [{fo}]",
                        value.shape()
                    )));
                }
            }
        }
        for (k, angle) in ANGLE_NAMES.iter().enumerate() {
            let n = self.config.bins.bin_count(k);
            for head in ["logit", "offset"] {
                check_linear(
                    store,
                    &format!("{STUDENT_PREFIX}.head.{angle}.{head}"),
                    self.config.fused_dim,
                    n,
                )?;
            }
        }
        for (name, (fi, fo)) in StudentModel::proj_layers(&self.config) {
            check_linear(store, &name, fi, fo)?;
        }
        assert_eq!(
            StudentModel::stack_dims(&self.config).last().unwrap().1,
            self.config.fused_dim
        );
        assert_eq!(
            StudentModel::proj_layers(&self.config).last().unwrap().1 .1,
            self.config.fused_dim
        );
        Ok(())
    }

    /// Forward pass. `train` selects batch-statistic batch norm (and
    /// emits running-stat updates); a frozen student group forces eval
    /// batch norm regardless, keeping frozen models batch-independent.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        train: bool,
    ) -> Result<StudentOutputs> {
        let c = &self.config;
        let b = tape.value(image).dim(0);
        if tape.value(image).shape() != [b, c.image_dim()] {
            return Err(Error::Shape {
                op: "student_forward",
                detail: format!(
                    "image shape {:?}, expected ({b}, {})",
                    tape.value(image).shape(),
                    c.image_dim()
                ),
            });
        }
        let train = train && !store.group_frozen(STUDENT_PREFIX)?;
        let x = mlp(
            tape,
            store,
            &format!("{STUDENT_PREFIX}.image"),
            c.student_image_hidden.len() + 1,
            image,
            false,
        )?;
        let mut h = x;
        let mut bn_updates = Vec::new();
        for i in 0..StudentModel::stack_dims(c).len() {
            let name = format!("{STUDENT_PREFIX}.stack.{i}");
            h = linear(tape, store, &name, h)?;
            let gamma = tape.param(store, &format!("{name}.bn.gamma"))?;
            let beta = tape.param(store, &format!("{name}.bn.beta"))?;
            h = if train {
                let (out, stats) = tape.batch_norm_train(h, gamma, beta)?;
                bn_updates.push((name.clone(), stats));
                out
            } else {
                let mean = store.value(&format!("{name}.bn.running_mean"))?.data().to_vec();
                let var = store.value(&format!("{name}.bn.running_var"))?.data().to_vec();
                tape.batch_norm_eval(h, gamma, beta, &mean, &var)?
            };
            h = tape.relu(h)?;
        }
        let heads = forward_heads(tape, store, &format!("{STUDENT_PREFIX}.head"), h)?;
        Ok(StudentOutputs {
            x,
            h,
            heads,
            bn_updates,
        })
    }

    /// Contrastive projection z_s = G_s(h_s).
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        mlp(
            tape,
            store,
            &format!("{STUDENT_PREFIX}.proj"),
            self.config.student_proj_hidden.len() + 1,
            h,
            false,
        )
    }

    /// Fold train-mode batch statistics into the running buffers:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(
        store: &mut ParamStore,
        updates: &[(String, BatchStats)],
        momentum: f64,
    ) -> Result<()> {
        for (name, stats) in updates {
            for (buffer, batch) in [
                ("running_mean", &stats.mean),
                ("running_var", &stats.var),
            ] {
                let full = format!("{name}.bn.{buffer}");
                let current = store.value(&full)?.clone();
                let mixed: Vec<f64> = current
                    .data()
                    .iter()
                    .zip(batch)
                    .map(|(r, b)| (1.0 - momentum) * r + momentum * b)
                    .collect();
                store.set_value(&full, Tensor::new(vec![batch.len()], mixed)?)?;
            }
        }
        Ok(())
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("ones shape")
}
