//! Evaluation and experiment protocols: checkpoint evaluation with
//! per-category metric reports, zero-shot / few-shot protocols for unseen
//! categories, configuration-sweep ablations with CSV output, and pose
//! visualization as portable graymaps.
//!
//! The reported numbers are Acc30 (fraction of samples whose geodesic
//! rotation error is below 30°) and MedErr (median geodesic error in
//! degrees), overall and per category. Aggregation always iterates
//! categories in name order and samples in the caller's order, so reports
//! are deterministic and invariant to how the split was shuffled.

use crate::datagen::{render_clean, shape_spec_at, Category, Dataset, Geometry, SplitLists, SplitSpec};
use crate::diffmath::load_store;
use crate::error::{Error, Result};
use crate::models::EncoderConfig;
use crate::posemath::{acc30, mederr};
use crate::trainer::{
    check_dataset_compat, eval_errors, finetune_pose_only, predict_poses, run_strategy_inner,
    ModelKind, Strategy, TrainConfig, LAST_DIR,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// File name of the JSON metrics report written next to run artifacts.
pub const METRICS_FILE: &str = "metrics.json";
/// File name of the ablation result table.
pub const ABLATION_CSV: &str = "ablation.csv";
/// File name of the per-configuration ablation aggregates.
pub const ABLATION_SUMMARY_FILE: &str = "ablation_summary.json";
/// Exact header line of `ablation.csv`.
pub const ABLATION_CSV_HEADER: &str = "configuration,seed,acc30,mederr";

// ---------------------------------------------------------------------------
// Metric reports
// ---------------------------------------------------------------------------

/// Which stored index list of the dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Val,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            other => Err(Error::Config(format!(
                "unknown split {other:?}; expected \"train\" or \"val\""
            ))),
        }
    }

    fn indices(self, dataset: &Dataset) -> &[u32] {
        match self {
            EvalSplit::Train => &dataset.manifest.split.train,
            EvalSplit::Val => &dataset.manifest.split.val,
        }
    }
}

/// Metrics of one category within a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub count: usize,
    pub acc30: f64,
    pub mederr: f64,
}

/// Full evaluation report: overall and per-category Acc30 / MedErr, plus
/// the identity of the run that produced the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: Strategy,
    pub seed: u64,
    /// Fingerprint of the training run (hash over configs, dataset
    /// identity, and index lists) as stored in the checkpoint.
    pub config_sha256: String,
    /// Label of the evaluated index list ("train", "val", "val_unseen").
    pub split: String,
    pub count: usize,
    pub acc30: f64,
    pub mederr: f64,
    /// One row per category present in the split, in name order.
    pub per_category: Vec<CategoryMetrics>,
}

impl MetricsReport {
    /// Verify the internal consistency of the report: category counts sum
    /// to the total and the overall Acc30 equals the sample-weighted mean
    /// of the per-category Acc30 within 1e-12.
    pub fn check_consistency(&self) -> Result<()> {
        let cat_total: usize = self.per_category.iter().map(|c| c.count).sum();
        if cat_total != self.count {
            return Err(Error::Invalid(format!(
                "category counts sum to {cat_total}, report covers {} samples",
                self.count
            )));
        }
        let weighted: f64 = self
            .per_category
            .iter()
            .map(|c| c.acc30 * c.count as f64)
            .sum::<f64>()
            / self.count as f64;
        if (weighted - self.acc30).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "overall Acc30 {} differs from the weighted per-category mean {weighted}",
                self.acc30
            )));
        }
        Ok(())
    }

    /// Serialize the report to `path` as pretty-printed JSON. The output
    /// bytes are a pure function of the report contents.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("metrics serialization failed: {e}")))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Read a report previously written by [`MetricsReport::write`].
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad metrics file: {e}")))
    }
}

/// Aggregate per-sample angular errors (degrees) into a report. `indices`
/// and `errors` are parallel; categories come from the dataset.
pub fn report_from_errors(
    dataset: &Dataset,
    indices: &[u32],
    errors: &[f64],
    strategy: Strategy,
    seed: u64,
    config_sha256: &str,
    split: &str,
) -> Result<MetricsReport> {
    if indices.len() != errors.len() {
        return Err(Error::Invalid(format!(
            "{} indices with {} errors",
            indices.len(),
            errors.len()
        )));
    }
    let mut by_category: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for (&i, &e) in indices.iter().zip(errors) {
        by_category
            .entry(dataset.category_of(i as usize).name())
            .or_default()
            .push(e);
    }
    let per_category = by_category
        .into_iter()
        .map(|(name, errs)| {
            Ok(CategoryMetrics {
                category: name.to_string(),
                count: errs.len(),
                acc30: acc30(&errs)?,
                mederr: mederr(&errs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        strategy,
        seed,
        config_sha256: config_sha256.to_string(),
        split: split.to_string(),
        count: errors.len(),
        acc30: acc30(errors)?,
        mederr: mederr(errors)?,
        per_category,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation
// ---------------------------------------------------------------------------

struct LoadedCheckpoint {
    store: crate::diffmath::ParamStore,
    encoder: EncoderConfig,
    kind: ModelKind,
    strategy: Strategy,
    seed: u64,
    fingerprint: String,
}

fn model_kind_for_tag(tag: &str) -> Result<ModelKind> {
    match tag {
        "teacher" => Ok(ModelKind::Teacher),
        // Joint-phase checkpoints carry both models; their headline
        // metric — like their final artifact — is the student's.
        "student" | "joint" => Ok(ModelKind::Student),
        other => Err(Error::Format(format!(
            "checkpoint model tag {other:?} is not evaluable"
        ))),
    }
}

fn load_checkpoint_for_eval(ckpt_dir: &Path) -> Result<LoadedCheckpoint> {
    let (store, extra) = load_store(ckpt_dir)?;
    let encoder: EncoderConfig = serde_json::from_value(
        extra
            .get("encoder")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint lacks an encoder description".into()))?,
    )
    .map_err(|e| Error::Format(format!("checkpoint encoder unparsable: {e}")))?;
    let kind = model_kind_for_tag(
        extra
            .get("model")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("checkpoint lacks a model tag".into()))?,
    )?;
    let strategy = Strategy::from_name(
        extra
            .get("strategy")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Format("checkpoint lacks a strategy tag".into()))?,
    )?;
    let seed = extra
        .pointer("/train/seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("checkpoint lacks the training seed".into()))?;
    let fingerprint = extra
        .get("fingerprint")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format("checkpoint lacks a run fingerprint".into()))?
        .to_string();
    Ok(LoadedCheckpoint {
        store,
        encoder,
        kind,
        strategy,
        seed,
        fingerprint,
    })
}

fn evaluate_indices(
    ckpt_dir: &Path,
    dataset: &Dataset,
    indices: &[u32],
    split_label: &str,
) -> Result<MetricsReport> {
    let ckpt = load_checkpoint_for_eval(ckpt_dir)?;
    check_dataset_compat(dataset, &ckpt.encoder)?;
    let errors = eval_errors(&ckpt.store, &ckpt.encoder, ckpt.kind, dataset, indices)?;
    report_from_errors(
        dataset,
        indices,
        &errors,
        ckpt.strategy,
        ckpt.seed,
        &ckpt.fingerprint,
        split_label,
    )
}

/// Evaluate a checkpoint on one split of a dataset. Deterministic,
/// side-effect-free, and invariant to the order of the stored index list.
/// The checkpoint must match the dataset's sample shape (resolution and
/// points per cloud).
pub fn evaluate(ckpt_dir: &Path, dataset: &Dataset, split: EvalSplit) -> Result<MetricsReport> {
    evaluate_indices(ckpt_dir, dataset, split.indices(dataset), split.name())
}

// ---------------------------------------------------------------------------
// Zero-shot / few-shot protocols
// ---------------------------------------------------------------------------

/// Default epoch count for few-shot adaptation.
pub const DEFAULT_FINETUNE_EPOCHS: usize = 20;

/// Split label used for unseen-category evaluation reports.
pub const UNSEEN_SPLIT_LABEL: &str = "val_unseen";

/// Run the unseen-category protocol end to end and return metrics over
/// the unseen categories' validation samples.
///
/// The base phase trains `strategy` on the seen categories only (train
/// and model-selection lists are filtered to seen categories, so no
/// unseen sample influences training or checkpoint selection). With
/// `k = 0` — requiring a dataset generated with a zero-shot split — the
/// best base model is evaluated directly. With `k > 0` — requiring a
/// few-shot split generated with the same `k` — the base model is then
/// adapted on the k-per-category support samples with the pose loss only,
/// at a constant lr0/10 for `finetune_epochs` epochs, and the *final*
/// (not best) adapted model is evaluated, so the evaluation set never
/// selects the checkpoint.
///
/// Artifacts: `out_dir/base/` (base run), `out_dir/fewshot/` (adaptation,
/// when k > 0), `out_dir/metrics.json` (the returned report).
#[allow(clippy::too_many_arguments)]
pub fn run_fewshot(
    strategy: Strategy,
    dataset: &Dataset,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    teacher_ckpt: Option<&Path>,
    k: usize,
    finetune_epochs: usize,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let unseen: &[Category] = match &dataset.manifest.config.split {
        SplitSpec::FullySupervised => {
            return Err(Error::Config(
                "dataset has no unseen categories; generate it with a zero-shot or few-shot split"
                    .into(),
            ))
        }
        SplitSpec::ZeroShot { unseen } => {
            if k != 0 {
                return Err(Error::Config(format!(
                    "a zero-shot dataset provides no support samples; k must be 0, got {k}"
                )));
            }
            unseen
        }
        SplitSpec::FewShot { unseen, k: k_ds } => {
            if k != *k_ds {
                return Err(Error::Config(format!(
                    "k = {k} requested but the dataset's few-shot split provides k = {k_ds}"
                )));
            }
            unseen
        }
    };

    let split = &dataset.manifest.split;
    let is_unseen = |i: u32| -> bool { unseen.contains(&dataset.category_of(i as usize)) };
    let base_lists = SplitLists {
        train: split.train.iter().copied().filter(|&i| !is_unseen(i)).collect(),
        val: split.val.iter().copied().filter(|&i| !is_unseen(i)).collect(),
    };
    let support: Vec<u32> = split.train.iter().copied().filter(|&i| is_unseen(i)).collect();
    let eval_list: Vec<u32> = split.val.iter().copied().filter(|&i| is_unseen(i)).collect();

    if k == 0 && !support.is_empty() {
        return Err(Error::Invalid(format!(
            "zero-shot train list contains {} unseen-category samples",
            support.len()
        )));
    }
    if k > 0 && support.len() != k * unseen.len() {
        return Err(Error::Invalid(format!(
            "few-shot support list holds {} samples, expected k·|unseen| = {}",
            support.len(),
            k * unseen.len()
        )));
    }
    if eval_list.is_empty() {
        return Err(Error::Invalid(
            "no validation samples in the unseen categories".into(),
        ));
    }
    if base_lists.val.is_empty() {
        return Err(Error::Invalid(
            "no seen-category validation samples to select the base model on".into(),
        ));
    }

    let base = run_strategy_inner(
        strategy,
        dataset,
        encoder,
        config,
        teacher_ckpt,
        &out_dir.join("base"),
        &base_lists,
    )?;

    let final_ckpt = if k == 0 {
        base.best_dir.clone()
    } else {
        if support.len() < 2 {
            return Err(Error::Config(format!(
                "few-shot adaptation needs at least 2 support samples, got {}",
                support.len()
            )));
        }
        if finetune_epochs == 0 {
            return Err(Error::Config(
                "finetune_epochs must be at least 1 when k > 0".into(),
            ));
        }
        let mut ft = config.clone();
        ft.lr0 = config.lr0 / 10.0;
        ft.epochs_stage2 = finetune_epochs;
        let ft_lists = SplitLists {
            train: support,
            val: eval_list.clone(),
        };
        let report = finetune_pose_only(
            dataset,
            &base.best_dir,
            base.model,
            encoder,
            &ft,
            strategy,
            &out_dir.join("fewshot"),
            &ft_lists,
        )?;
        report.out_dir.join(LAST_DIR)
    };

    let report = evaluate_indices(&final_ckpt, dataset, &eval_list, UNSEEN_SPLIT_LABEL)?;
    report.write(&out_dir.join(METRICS_FILE))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

/// One ablation configuration: a strategy plus at most one knob turned
/// away from the base recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    /// Row label in `ablation.csv`; must be unique within a spec.
    pub name: String,
    pub strategy: Strategy,
    /// Override the embedding-guidance weight ω₂.
    pub omega2: Option<f64>,
    /// Override the output-distillation weight ω₃.
    pub omega3: Option<f64>,
    /// Force the student-stage augmentation flag.
    pub augment_stage2: Option<bool>,
    /// Halve every student-side layer width (min 2).
    pub slim_student: bool,
}

impl AblationEntry {
    fn plain(name: &str, strategy: Strategy) -> Self {
        AblationEntry {
            name: name.to_string(),
            strategy,
            omega2: None,
            omega3: None,
            augment_stage2: None,
            slim_student: false,
        }
    }

    /// Materialize the entry's configs from the base recipe. The returned
    /// configs carry `seed` so each (entry, seed) run is self-contained.
    pub fn apply(
        &self,
        encoder: &EncoderConfig,
        train: &TrainConfig,
        seed: u64,
    ) -> (EncoderConfig, TrainConfig) {
        let mut enc = encoder.clone();
        let mut tr = train.clone();
        tr.seed = seed;
        if let Some(v) = self.omega2 {
            tr.weights.omega2 = v;
        }
        if let Some(v) = self.omega3 {
            tr.weights.omega3 = v;
        }
        if let Some(a) = self.augment_stage2 {
            tr.augment.stage2 = a;
        }
        if self.slim_student {
            let halve = |ws: &mut Vec<usize>| {
                for w in ws.iter_mut() {
                    *w = (*w / 2).max(2);
                }
            };
            halve(&mut enc.student_image_hidden);
            enc.student_image_dim = (enc.student_image_dim / 2).max(2);
            halve(&mut enc.student_stack_hidden);
            halve(&mut enc.student_proj_hidden);
        }
        (enc, tr)
    }

    fn needs_shared_teacher(&self) -> bool {
        matches!(
            self.strategy,
            Strategy::ThreeDAugPose | Strategy::OneSideCL
        )
    }
}

/// An ablation sweep: which configurations to run over which seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
    pub entries: Vec<AblationEntry>,
}

impl AblationSpec {
    /// The standard sweep: every strategy, plus the full recipe with one
    /// component removed at a time, plus a half-width student.
    pub fn standard(seeds: Vec<u64>) -> Self {
        let full = Strategy::ThreeDAugPose;
        AblationSpec {
            seeds,
            entries: vec![
                AblationEntry::plain("teacher", Strategy::TeacherOnly),
                AblationEntry::plain("baseline", Strategy::StudentBaseline),
                AblationEntry::plain("3daug", full),
                AblationEntry::plain("onesidecl", Strategy::OneSideCL),
                AblationEntry::plain("jointcl", Strategy::JointCL),
                AblationEntry {
                    omega2: Some(0.0),
                    ..AblationEntry::plain("no_embed_distill", full)
                },
                AblationEntry {
                    omega3: Some(0.0),
                    ..AblationEntry::plain("no_output_distill", full)
                },
                AblationEntry {
                    augment_stage2: Some(false),
                    ..AblationEntry::plain("no_augmentation", full)
                },
                AblationEntry {
                    slim_student: true,
                    ..AblationEntry::plain("slim_student", full)
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        let mut seen_seeds = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen_seeds.insert(*s) {
                return Err(Error::Config(format!("duplicate ablation seed {s}")));
            }
        }
        if self.entries.is_empty() {
            return Err(Error::Config("ablation needs at least one entry".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.name.is_empty() || e.name.contains(',') || e.name.contains('\n') {
                return Err(Error::Config(format!(
                    "ablation entry name {:?} is empty or not CSV-safe",
                    e.name
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate ablation entry name {:?}",
                    e.name
                )));
            }
            // The shared-teacher directory is reserved for the plain
            // teacher run; any other recipe under that label would collide
            // with it on disk.
            if e.name == "teacher" && e.strategy != Strategy::TeacherOnly {
                return Err(Error::Config(
                    "an ablation entry named \"teacher\" must use the teacher strategy".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One data row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub configuration: String,
    pub seed: u64,
    pub acc30: f64,
    pub mederr: f64,
}

/// Per-configuration aggregate over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummaryRow {
    pub configuration: String,
    pub runs: usize,
    pub median_acc30: f64,
    pub median_mederr: f64,
}

/// Full result of an ablation sweep: the per-run rows (entry-major, seed
/// order within an entry) and the per-entry medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummaryRow>,
}

impl AblationTable {
    /// Render the rows as CSV text (header + one line per run).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.configuration, r.seed, r.acc30, r.mederr
            ));
        }
        out
    }
}

/// Median with the usual midpoint convention for even counts. The input
/// order does not matter.
fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Directory of the shared per-seed teacher within an ablation tree.
fn shared_teacher_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join("teacher").join(format!("seed{seed}"))
}

/// Run one (entry, seed) cell of an ablation into
/// `out_dir/<entry>/seed<seed>/`, training the shared teacher for that
/// seed first if the entry distills from one. Returns the validation
/// report of the run's best model (also written into the run directory
/// as `metrics.json`). Idempotent: completed runs are reported, not
/// retrained.
pub fn run_ablation_entry(
    entry: &AblationEntry,
    seed: u64,
    dataset: &Dataset,
    encoder: &EncoderConfig,
    train: &TrainConfig,
    out_dir: &Path,
) -> Result<MetricsReport> {
    let (enc_e, tr_e) = entry.apply(encoder, train, seed);
    let teacher_best = if entry.needs_shared_teacher() {
        let mut base_tr = train.clone();
        base_tr.seed = seed;
        let teacher_out = shared_teacher_dir(out_dir, seed);
        let outcome = run_strategy_inner(
            Strategy::TeacherOnly,
            dataset,
            encoder,
            &base_tr,
            None,
            &teacher_out,
            &dataset.manifest.split,
        )?;
        Some(outcome.best_dir)
    } else {
        None
    };
    let run_dir = out_dir.join(&entry.name).join(format!("seed{seed}"));
    let outcome = run_strategy_inner(
        entry.strategy,
        dataset,
        &enc_e,
        &tr_e,
        teacher_best.as_deref(),
        &run_dir,
        &dataset.manifest.split,
    )?;
    let report = evaluate(&outcome.best_dir, dataset, EvalSplit::Val)?;
    report.write(&run_dir.join(METRICS_FILE))?;
    Ok(report)
}

/// Run a full ablation sweep sequentially. Writes `ablation.csv` (exact
/// header `configuration,seed,acc30,mederr`, one row per run, entry-major
/// in spec order) and `ablation_summary.json` (per-entry medians) under
/// `out_dir`, and returns the table. Completed runs are reused, so an
/// interrupted sweep continues where it stopped.
pub fn run_ablation(
    spec: &AblationSpec,
    dataset: &Dataset,
    encoder: &EncoderConfig,
    train: &TrainConfig,
    out_dir: &Path,
) -> Result<AblationTable> {
    spec.validate()?;
    encoder.validate()?;
    train.validate()?;
    let mut rows = Vec::with_capacity(spec.entries.len() * spec.seeds.len());
    let mut summary = Vec::with_capacity(spec.entries.len());
    for entry in &spec.entries {
        let mut accs = Vec::with_capacity(spec.seeds.len());
        let mut meds = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let report = run_ablation_entry(entry, seed, dataset, encoder, train, out_dir)?;
            accs.push(report.acc30);
            meds.push(report.mederr);
            rows.push(AblationRow {
                configuration: entry.name.clone(),
                seed,
                acc30: report.acc30,
                mederr: report.mederr,
            });
        }
        summary.push(AblationSummaryRow {
            configuration: entry.name.clone(),
            runs: spec.seeds.len(),
            median_acc30: median(&accs),
            median_mederr: median(&meds),
        });
    }
    let table = AblationTable { rows, summary };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(ABLATION_CSV), table.to_csv())?;
    let summary_text = serde_json::to_string_pretty(&table.summary)
        .map_err(|e| Error::Format(format!("summary serialization failed: {e}")))?;
    fs::write(out_dir.join(ABLATION_SUMMARY_FILE), summary_text + "\n")?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Visualization
// ---------------------------------------------------------------------------

/// Write one grayscale image as a binary PGM (P5) file. Values are
/// clamped to [0, 1] and quantized to 8 bits.
fn write_pgm(path: &Path, pixels: &[f32], resolution: usize) -> Result<()> {
    if pixels.len() != resolution * resolution {
        return Err(Error::Invalid(format!(
            "{} pixels for a {resolution}×{resolution} graymap",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{resolution} {resolution}\n255\n").into_bytes();
    bytes.extend(
        pixels
            .iter()
            .map(|v| (f64::from(v.clamp(0.0, 1.0)) * 255.0).round() as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

/// Render qualitative comparisons for the first `n` validation samples:
/// for each sample index `i`, writes `i_input.pgm` (the stored input
/// image), `i_gt.pgm` (a noise-free render at the labeled pose), and
/// `i_pred.pgm` (a noise-free render at the model's predicted pose) into
/// `out_dir`. Returns the written paths; `n = 0` writes nothing.
pub fn visualize(
    ckpt_dir: &Path,
    dataset: &Dataset,
    n: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let ckpt = load_checkpoint_for_eval(ckpt_dir)?;
    check_dataset_compat(dataset, &ckpt.encoder)?;
    let indices: Vec<u32> = dataset
        .manifest
        .split
        .val
        .iter()
        .take(n)
        .copied()
        .collect();
    if indices.is_empty() {
        return Err(Error::Invalid("the validation split is empty".into()));
    }
    let preds = predict_poses(&ckpt.store, &ckpt.encoder, ckpt.kind, dataset, &indices)?;
    fs::create_dir_all(out_dir)?;
    let resolution = dataset.resolution();
    let mut written = Vec::with_capacity(3 * indices.len());
    for (&i, pred) in indices.iter().zip(&preds) {
        let sample = &dataset.samples[i as usize];
        let geom = Geometry::from_spec(&shape_spec_at(&dataset.manifest.config, i as usize))?;
        let input_path = out_dir.join(format!("{i}_input.pgm"));
        write_pgm(&input_path, &sample.image, resolution)?;
        let gt_path = out_dir.join(format!("{i}_gt.pgm"));
        write_pgm(&gt_path, &render_clean(&geom, &sample.pose, resolution)?, resolution)?;
        let pred_path = out_dir.join(format!("{i}_pred.pgm"));
        write_pgm(&pred_path, &render_clean(&geom, pred, resolution)?, resolution)?;
        written.extend([input_path, gt_path, pred_path]);
    }
    Ok(written)
}
