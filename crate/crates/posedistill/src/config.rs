//! Plain-text run configuration.
//!
//! Every hyperparameter of a run — dataset generation, model topology, and
//! training — is controlled by one `key = value` file; command-line flags
//! only select verbs and paths. The format is deliberately strict:
//!
//! * one `key = value` pair per line; blank lines and lines starting with
//!   `#` are ignored;
//! * unknown keys are an error (no silently ignored typos);
//! * duplicate keys are an error;
//! * keys not present keep their documented defaults.
//!
//! [`RunConfig::to_text`] renders the fully-resolved configuration back in a
//! canonical form (every key, fixed order, shortest round-trip float
//! formatting) so that `parse(to_text(c)) == c` exactly. The SHA-256 of that
//! canonical text is the configuration hash embedded in run artifacts, and
//! [`RunConfig::write_snapshot`] drops the resolved text (plus its hash) into
//! an output directory so every artifact records exactly what produced it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::datagen::{Category, GenerateConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::models::EncoderConfig;
use crate::trainer::{RotationMode, TrainConfig};

/// File name of the resolved-configuration snapshot written into every
/// output directory.
pub const SNAPSHOT_FILE: &str = "config.resolved.cfg";

/// Fully-resolved run configuration: what to generate, what model to build,
/// and how to train it.
///
/// `resolution` and `n_points` are single keys that set both the dataset
/// and the encoder sides, so a config file can never describe a model that
/// is incompatible with its own data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: GenerateConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: GenerateConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn cfg_err(line_no: usize, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("config line {line_no}: {detail}"))
}

fn parse_usize(key: &str, value: &str, line_no: usize) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| cfg_err(line_no, format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_u64(key: &str, value: &str, line_no: usize) -> Result<u64> {
    value
        .parse::<u64>()
        .map_err(|_| cfg_err(line_no, format!("{key}: expected a non-negative integer, got {value:?}")))
}

fn parse_f64(key: &str, value: &str, line_no: usize) -> Result<f64> {
    let v = value
        .parse::<f64>()
        .map_err(|_| cfg_err(line_no, format!("{key}: expected a number, got {value:?}")))?;
    if !v.is_finite() {
        return Err(cfg_err(line_no, format!("{key}: expected a finite number, got {value:?}")));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str, line_no: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(line_no, format!("{key}: expected true or false, got {value:?}"))),
    }
}

/// Comma-separated list of layer widths; an empty value is an empty list.
fn parse_widths(key: &str, value: &str, line_no: usize) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|tok| parse_usize(key, tok.trim(), line_no))
        .collect()
}

/// A `lo,hi` pair of signed bin indices.
fn parse_range(key: &str, value: &str, line_no: usize) -> Result<(i32, i32)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(cfg_err(line_no, format!("{key}: expected \"lo,hi\", got {value:?}")));
    }
    let lo = parts[0]
        .parse::<i32>()
        .map_err(|_| cfg_err(line_no, format!("{key}: expected an integer, got {:?}", parts[0])))?;
    let hi = parts[1]
        .parse::<i32>()
        .map_err(|_| cfg_err(line_no, format!("{key}: expected an integer, got {:?}", parts[1])))?;
    Ok((lo, hi))
}

fn parse_categories(key: &str, value: &str, line_no: usize) -> Result<Vec<Category>> {
    if value.is_empty() {
        return Err(cfg_err(line_no, format!("{key}: expected at least one category name")));
    }
    value
        .split(',')
        .map(|tok| Category::from_name(tok.trim()).map_err(|e| cfg_err(line_no, format!("{key}: {e}"))))
        .collect()
}

fn widths_text(widths: &[usize]) -> String {
    widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
}

fn categories_text(cats: &[Category]) -> String {
    cats.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parse a configuration file's text. Missing keys keep their defaults;
    /// unknown or duplicate keys are configuration errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeSet<String> = BTreeSet::new();

        // The split is assembled from up to three keys once all lines are read.
        let mut split_kind: Option<(String, usize)> = None;
        let mut unseen: Option<(Vec<Category>, usize)> = None;
        let mut k: Option<(usize, usize)> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((lhs, rhs)) = line.split_once('=') else {
                return Err(cfg_err(line_no, format!("expected \"key = value\", got {line:?}")));
            };
            let key = lhs.trim();
            let value = rhs.trim();
            if key.is_empty() {
                return Err(cfg_err(line_no, "empty key"));
            }
            if !seen.insert(key.to_string()) {
                return Err(cfg_err(line_no, format!("duplicate key {key:?}")));
            }

            match key {
                // -- dataset ------------------------------------------------
                "resolution" => {
                    let v = parse_usize(key, value, line_no)?;
                    cfg.dataset.resolution = v;
                    cfg.encoder.resolution = v;
                }
                "n_points" => {
                    let v = parse_usize(key, value, line_no)?;
                    cfg.dataset.n_points = v;
                    cfg.encoder.n_points = v;
                }
                "noise_sigma" => cfg.dataset.noise_sigma = parse_f64(key, value, line_no)?,
                "per_category_train" => {
                    cfg.dataset.per_category_train = parse_usize(key, value, line_no)?
                }
                "per_category_val" => {
                    cfg.dataset.per_category_val = parse_usize(key, value, line_no)?
                }
                "categories" => cfg.dataset.categories = parse_categories(key, value, line_no)?,
                "split" => split_kind = Some((value.to_string(), line_no)),
                "unseen" => unseen = Some((parse_categories(key, value, line_no)?, line_no)),
                "k" => k = Some((parse_usize(key, value, line_no)?, line_no)),
                "master_seed" => cfg.dataset.master_seed = parse_u64(key, value, line_no)?,

                // -- model topology ------------------------------------------
                "teacher_image_hidden" => {
                    cfg.encoder.teacher_image_hidden = parse_widths(key, value, line_no)?
                }
                "image_feature_dim" => {
                    cfg.encoder.image_feature_dim = parse_usize(key, value, line_no)?
                }
                "point_hidden" => cfg.encoder.point_hidden = parse_widths(key, value, line_no)?,
                "shape_feature_dim" => {
                    cfg.encoder.shape_feature_dim = parse_usize(key, value, line_no)?
                }
                "fuse_hidden" => cfg.encoder.fuse_hidden = parse_widths(key, value, line_no)?,
                "fused_dim" => cfg.encoder.fused_dim = parse_usize(key, value, line_no)?,
                "student_image_hidden" => {
                    cfg.encoder.student_image_hidden = parse_widths(key, value, line_no)?
                }
                "student_image_dim" => {
                    cfg.encoder.student_image_dim = parse_usize(key, value, line_no)?
                }
                "student_stack_hidden" => {
                    cfg.encoder.student_stack_hidden = parse_widths(key, value, line_no)?
                }
                "teacher_proj_hidden" => {
                    cfg.encoder.teacher_proj_hidden = parse_widths(key, value, line_no)?
                }
                "student_proj_hidden" => {
                    cfg.encoder.student_proj_hidden = parse_widths(key, value, line_no)?
                }
                "bin_width" => cfg.encoder.bins.bin_width = parse_f64(key, value, line_no)?,
                "azim_range" => cfg.encoder.bins.azim_range = parse_range(key, value, line_no)?,
                "elev_range" => cfg.encoder.bins.elev_range = parse_range(key, value, line_no)?,
                "inplane_range" => {
                    cfg.encoder.bins.inplane_range = parse_range(key, value, line_no)?
                }

                // -- training -------------------------------------------------
                "lr0" => cfg.train.lr0 = parse_f64(key, value, line_no)?,
                "epochs_stage1" => cfg.train.epochs_stage1 = parse_usize(key, value, line_no)?,
                "epochs_stage2" => cfg.train.epochs_stage2 = parse_usize(key, value, line_no)?,
                "batch_stage1" => cfg.train.batch_stage1 = parse_usize(key, value, line_no)?,
                "batch_stage2" => cfg.train.batch_stage2 = parse_usize(key, value, line_no)?,
                "seed" => cfg.train.seed = parse_u64(key, value, line_no)?,
                "kappa1" => cfg.train.weights.kappa1 = parse_f64(key, value, line_no)?,
                "kappa2" => cfg.train.weights.kappa2 = parse_f64(key, value, line_no)?,
                "omega1" => cfg.train.weights.omega1 = parse_f64(key, value, line_no)?,
                "omega2" => cfg.train.weights.omega2 = parse_f64(key, value, line_no)?,
                "omega3" => cfg.train.weights.omega3 = parse_f64(key, value, line_no)?,
                "tau" => cfg.train.weights.tau = parse_f64(key, value, line_no)?,
                "augment_stage1" => cfg.train.augment.stage1 = parse_bool(key, value, line_no)?,
                "augment_stage2" => cfg.train.augment.stage2 = parse_bool(key, value, line_no)?,
                "flip_prob" => cfg.train.augment.flip_prob = parse_f64(key, value, line_no)?,
                "max_rotation_deg" => {
                    cfg.train.augment.max_rotation_deg = parse_f64(key, value, line_no)?
                }
                "rotation_mode" => {
                    cfg.train.augment.rotation_mode = match value {
                        "re_render" => RotationMode::ReRender,
                        "image_rotate" => RotationMode::ImageRotate,
                        _ => {
                            return Err(cfg_err(
                                line_no,
                                format!("{key}: expected re_render or image_rotate, got {value:?}"),
                            ))
                        }
                    }
                }

                _ => return Err(cfg_err(line_no, format!("unknown key {key:?}"))),
            }
        }

        // Assemble the category split from its up-to-three keys.
        let kind = match &split_kind {
            None => "fully_supervised",
            Some((s, _)) => s.as_str(),
        };
        cfg.dataset.split = match kind {
            "fully_supervised" => {
                if let Some((_, ln)) = unseen {
                    return Err(cfg_err(ln, "\"unseen\" only applies to zero_shot or few_shot splits"));
                }
                if let Some((_, ln)) = k {
                    return Err(cfg_err(ln, "\"k\" only applies to few_shot splits"));
                }
                SplitSpec::FullySupervised
            }
            "zero_shot" => {
                let (_, split_ln) = split_kind.as_ref().expect("kind came from split_kind");
                if let Some((_, ln)) = k {
                    return Err(cfg_err(ln, "\"k\" only applies to few_shot splits"));
                }
                let Some((cats, _)) = unseen else {
                    return Err(cfg_err(*split_ln, "zero_shot requires an \"unseen\" category list"));
                };
                SplitSpec::ZeroShot { unseen: cats }
            }
            "few_shot" => {
                let (_, split_ln) = split_kind.as_ref().expect("kind came from split_kind");
                let Some((cats, _)) = unseen else {
                    return Err(cfg_err(*split_ln, "few_shot requires an \"unseen\" category list"));
                };
                let Some((shots, _)) = k else {
                    return Err(cfg_err(*split_ln, "few_shot requires \"k\", the shots per unseen category"));
                };
                SplitSpec::FewShot { unseen: cats, k: shots }
            }
            other => {
                let (_, ln) = split_kind.as_ref().expect("non-default kind came from split_kind");
                return Err(cfg_err(
                    *ln,
                    format!("split: expected fully_supervised, zero_shot, or few_shot, got {other:?}"),
                ));
            }
        };

        cfg.dataset.validate()?;
        cfg.encoder.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Read and parse a configuration file. A missing file is a
    /// configuration error (naming the path), not an I/O error: pointing a
    /// run at a config that does not exist is a mistake in the run request.
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "config file {} not found",
                path.display()
            )));
        }
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical resolved text: every key, fixed order, values formatted so
    /// they parse back to bit-identical settings.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let e = &self.encoder;
        let t = &self.train;
        let mut out = String::new();
        let mut line = |s: String| {
            out.push_str(&s);
            out.push('\n');
        };

        line("# dataset".to_string());
        line(format!("resolution = {}", d.resolution));
        line(format!("n_points = {}", d.n_points));
        line(format!("noise_sigma = {}", d.noise_sigma));
        line(format!("per_category_train = {}", d.per_category_train));
        line(format!("per_category_val = {}", d.per_category_val));
        line(format!("categories = {}", categories_text(&d.categories)));
        match &d.split {
            SplitSpec::FullySupervised => line("split = fully_supervised".to_string()),
            SplitSpec::ZeroShot { unseen } => {
                line("split = zero_shot".to_string());
                line(format!("unseen = {}", categories_text(unseen)));
            }
            SplitSpec::FewShot { unseen, k } => {
                line("split = few_shot".to_string());
                line(format!("unseen = {}", categories_text(unseen)));
                line(format!("k = {k}"));
            }
        }
        line(format!("master_seed = {}", d.master_seed));

        line("# model topology".to_string());
        line(format!("teacher_image_hidden = {}", widths_text(&e.teacher_image_hidden)));
        line(format!("image_feature_dim = {}", e.image_feature_dim));
        line(format!("point_hidden = {}", widths_text(&e.point_hidden)));
        line(format!("shape_feature_dim = {}", e.shape_feature_dim));
        line(format!("fuse_hidden = {}", widths_text(&e.fuse_hidden)));
        line(format!("fused_dim = {}", e.fused_dim));
        line(format!("student_image_hidden = {}", widths_text(&e.student_image_hidden)));
        line(format!("student_image_dim = {}", e.student_image_dim));
        line(format!("student_stack_hidden = {}", widths_text(&e.student_stack_hidden)));
        line(format!("teacher_proj_hidden = {}", widths_text(&e.teacher_proj_hidden)));
        line(format!("student_proj_hidden = {}", widths_text(&e.student_proj_hidden)));
        line(format!("bin_width = {}", e.bins.bin_width));
        line(format!("azim_range = {},{}", e.bins.azim_range.0, e.bins.azim_range.1));
        line(format!("elev_range = {},{}", e.bins.elev_range.0, e.bins.elev_range.1));
        line(format!(
            "inplane_range = {},{}",
            e.bins.inplane_range.0, e.bins.inplane_range.1
        ));

        line("# training".to_string());
        line(format!("lr0 = {}", t.lr0));
        line(format!("epochs_stage1 = {}", t.epochs_stage1));
        line(format!("epochs_stage2 = {}", t.epochs_stage2));
        line(format!("batch_stage1 = {}", t.batch_stage1));
        line(format!("batch_stage2 = {}", t.batch_stage2));
        line(format!("seed = {}", t.seed));
        line(format!("kappa1 = {}", t.weights.kappa1));
        line(format!("kappa2 = {}", t.weights.kappa2));
        line(format!("omega1 = {}", t.weights.omega1));
        line(format!("omega2 = {}", t.weights.omega2));
        line(format!("omega3 = {}", t.weights.omega3));
        line(format!("tau = {}", t.weights.tau));
        line(format!("augment_stage1 = {}", t.augment.stage1));
        line(format!("augment_stage2 = {}", t.augment.stage2));
        line(format!("flip_prob = {}", t.augment.flip_prob));
        line(format!("max_rotation_deg = {}", t.augment.max_rotation_deg));
        let mode = match t.augment.rotation_mode {
            RotationMode::ReRender => "re_render",
            RotationMode::ImageRotate => "image_rotate",
        };
        line(format!("rotation_mode = {mode}"));
        out
    }

    /// SHA-256 (hex) of the canonical resolved text — the configuration
    /// hash embedded in run artifacts.
    pub fn sha256_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Write the resolved configuration (with its hash as a trailing
    /// comment) into `dir` as [`SNAPSHOT_FILE`], creating `dir` if needed.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        let mut text = self.to_text();
        text.push_str(&format!("# sha256 = {}\n", self.sha256_hex()));
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
