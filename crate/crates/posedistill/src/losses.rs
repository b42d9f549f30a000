//! Training objectives: bin/offset pose loss, the cross-modal InfoNCE
//! bridge, and the two distillation divergences (embedding KL, output KL),
//! plus the weighted teacher/student compositions.
//!
//! All losses are built on the caller's tape and return scalar roots, so
//! one `backward` call yields every gradient. Compositions skip terms
//! whose weight is exactly zero: the resulting tape is then structurally
//! identical to one that never mentions the term, which is what makes
//! "weight 0 ≡ term absent" hold bitwise through whole training runs.

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::HeadOutputs;
use crate::posemath::{AngleBinSpec, PoseTarget};

/// Loss weights: κ (teacher) and ω (student) mixing factors plus the
/// InfoNCE temperature τ.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    /// Teacher pose-loss weight κ₁.
    pub kappa1: f64,
    /// Teacher contrastive weight κ₂.
    pub kappa2: f64,
    /// Student pose-loss weight ω₁.
    pub omega1: f64,
    /// Student embedding-guidance weight ω₂ (KL or one-sided InfoNCE).
    pub omega2: f64,
    /// Student output-distillation weight ω₃.
    pub omega3: f64,
    /// Contrastive temperature τ.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kappa1: 1.0,
            kappa2: 0.5,
            omega1: 0.25,
            omega2: 0.75,
            omega3: 0.75,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kappa1", self.kappa1),
            ("kappa2", self.kappa2),
            ("omega1", self.omega1),
            ("omega2", self.omega2),
            ("omega3", self.omega3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "temperature tau must be finite and > 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// A composed loss: the scalar root plus the unweighted component values
/// for logging and the component-sum identity.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub total: Var,
    /// (name, unweighted value, weight) per active component.
    pub components: Vec<(String, f64, f64)>,
}

impl LossBundle {
    pub fn total_value(&self, tape: &Tape) -> f64 {
        tape.value_scalar(self.total)
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, v, _)| *v)
    }
}

/// One-hot (B, n) mask with a 1 at each row's target column.
fn one_hot_mask(tape: &mut Tape, cols: &[usize], n: usize) -> Result<Var> {
    let b = cols.len();
    let mut data = vec![0.0; b * n];
    for (i, c) in cols.iter().enumerate() {
        if *c >= n {
            return Err(Error::Invalid(format!(
                "target bin column {c} out of range for {n} bins"
            )));
        }
        data[i * n + c] = 1.0;
    }
    tape.constant(Tensor::new(vec![b, n], data)?)
}

/// Pose loss: per angle, softmax cross-entropy on the bin logits plus
/// smooth-L1 between the predicted offset at the ground-truth bin and the
/// target offset; summed over the three angles, averaged over the batch.
pub fn pose_loss(
    tape: &mut Tape,
    heads: &HeadOutputs,
    targets: &[PoseTarget],
    bins: &AngleBinSpec,
) -> Result<Var> {
    bins.validate()?;
    let b = targets.len();
    if b == 0 {
        return Err(Error::Invalid("pose loss over an empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for k in 0..3 {
        let n = bins.bin_count(k);
        let logits = heads.logits[k];
        if tape.value(logits).shape() != [b, n] {
            return Err(Error::Shape {
                op: "pose_loss",
                detail: format!(
                    "angle {k} logits shape {:?}, expected ({b}, {n})",
                    tape.value(logits).shape()
                ),
            });
        }
        let (lo, _) = bins.range(k);
        let cols: Vec<usize> = targets
            .iter()
            .map(|t| (t.bins[k] - lo) as usize)
            .collect();
        let mask = one_hot_mask(tape, &cols, n)?;

        // Cross-entropy: −mean over the batch of the target log-prob.
        let ls = tape.log_softmax(logits, 1)?;
        let picked = tape.mul(ls, mask)?;
        let ce_sum = tape.sum(picked)?;
        let ce = tape.scale(ce_sum, -1.0 / b as f64)?;

        // Offset regression at the ground-truth bin only.
        let masked_off = tape.mul(heads.offsets[k], mask)?;
        let picked_off = tape.sum_axis(masked_off, 1)?;
        let target_off: Vec<f64> = targets.iter().map(|t| t.offsets[k]).collect();
        let target_var = tape.constant(Tensor::new(vec![b], target_off)?)?;
        let diff = tape.sub(picked_off, target_var)?;
        let huber = tape.smooth_l1(diff)?;
        let off = tape.mean(huber)?;

        let angle_total = tape.add(ce, off)?;
        total = Some(match total {
            None => angle_total,
            Some(t) => tape.add(t, angle_total)?,
        });
    }
    Ok(total.unwrap())
}

/// Cross-modal InfoNCE: rows of `z` against rows of `h` under cosine
/// similarity at temperature `tau`; the positive for row i is column i,
/// all other columns are negatives. Batch-averaged.
pub fn infonce(tape: &mut Tape, z: Var, h: Var, tau: f64) -> Result<Var> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let (sz, sh) = (
        tape.value(z).shape().to_vec(),
        tape.value(h).shape().to_vec(),
    );
    if sz.len() != 2 || sz != sh {
        return Err(Error::Shape {
            op: "infonce",
            detail: format!("expected matching (B, D) inputs, got {sz:?} and {sh:?}"),
        });
    }
    let b = sz[0];
    if b < 2 {
        return Err(Error::Invalid(
            "contrastive batch must contain at least 2 samples".into(),
        ));
    }
    let zn = tape.l2_normalize(z)?;
    let hn = tape.l2_normalize(h)?;
    let hnt = tape.transpose(hn)?;
    let sims = tape.matmul(zn, hnt)?;
    let scaled = tape.scale(sims, 1.0 / tau)?;
    let ls = tape.log_softmax(scaled, 1)?;
    let eye = one_hot_mask(tape, &(0..b).collect::<Vec<_>>(), b)?;
    let picked = tape.mul(ls, eye)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// KL divergence between per-row softmax distributions over the feature
/// axis: mean over rows of KL(softmax(p) ‖ softmax(q)). Gradients flow
/// into both arguments; pass the reference side as a tape constant to
/// keep it fixed.
pub fn kl_softmax(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    let (sp, sq) = (
        tape.value(p_logits).shape().to_vec(),
        tape.value(q_logits).shape().to_vec(),
    );
    if sp.len() != 2 || sp != sq {
        return Err(Error::Shape {
            op: "kl_softmax",
            detail: format!("expected matching (B, D) inputs, got {sp:?} and {sq:?}"),
        });
    }
    let b = sp[0];
    let p = tape.softmax(p_logits, 1)?;
    let lp = tape.log_softmax(p_logits, 1)?;
    let lq = tape.log_softmax(q_logits, 1)?;
    let diff = tape.sub(lp, lq)?;
    let weighted = tape.mul(p, diff)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Embedding distillation: KL(softmax(z_t) ‖ softmax(z_s)) over the
/// embedding axis, batch-averaged.
pub fn kl_embed(tape: &mut Tape, z_teacher: Var, z_student: Var) -> Result<Var> {
    kl_softmax(tape, z_teacher, z_student)
}

/// Output distillation: per-angle KL between teacher and student bin
/// distributions, summed over the three angle heads.
pub fn kl_output(
    tape: &mut Tape,
    teacher_logits: &[Var; 3],
    student_logits: &[Var; 3],
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for k in 0..3 {
        let head = kl_softmax(tape, teacher_logits[k], student_logits[k])?;
        total = Some(match total {
            None => head,
            Some(t) => tape.add(t, head)?,
        });
    }
    Ok(total.unwrap())
}

fn accumulate(
    tape: &mut Tape,
    bundle: &mut Vec<(String, f64, f64)>,
    total: Option<Var>,
    name: &str,
    term: Var,
    weight: f64,
) -> Result<Option<Var>> {
    bundle.push((name.to_string(), tape.value_scalar(term), weight));
    let weighted = tape.scale(term, weight)?;
    Ok(Some(match total {
        None => weighted,
        Some(t) => tape.add(t, weighted)?,
    }))
}

/// Teacher objective: κ₁·pose + κ₂·InfoNCE(z_t, h_t). The contrastive
/// branch is skipped entirely when κ₂ = 0.
pub fn teacher_loss(
    tape: &mut Tape,
    heads: &HeadOutputs,
    z_t: Var,
    h_t: Var,
    targets: &[PoseTarget],
    bins: &AngleBinSpec,
    weights: &LossWeights,
) -> Result<LossBundle> {
    weights.validate()?;
    let mut components = Vec::new();
    let pose = pose_loss(tape, heads, targets, bins)?;
    let mut total = accumulate(tape, &mut components, None, "pose", pose, weights.kappa1)?;
    if weights.kappa2 != 0.0 {
        let cl = infonce(tape, z_t, h_t, weights.tau)?;
        total = accumulate(
            tape,
            &mut components,
            total,
            "contrastive",
            cl,
            weights.kappa2,
        )?;
    }
    Ok(LossBundle {
        total: total.unwrap(),
        components,
    })
}

/// How the ω₂ embedding-guidance term is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedGuidance {
    /// No embedding guidance (baseline students).
    None,
    /// KL(softmax(z_t) ‖ softmax(z_s)) — the distillation default.
    Kl,
    /// One-sided InfoNCE pulling z_s toward the (frozen) teacher h_t.
    ContrastiveToTeacher,
}

/// Teacher-side quantities entering the student loss. Pass them as tape
/// constants (built from a separate no-grad teacher pass) so no gradient
/// can reach the teacher.
#[derive(Debug, Clone, Copy)]
pub struct TeacherRefs {
    /// Teacher projection z_t (used by `EmbedGuidance::Kl`).
    pub z: Option<Var>,
    /// Teacher fused embedding h_t (used by
    /// `EmbedGuidance::ContrastiveToTeacher`).
    pub h: Option<Var>,
    /// Teacher bin logits (used by the ω₃ output-distillation term).
    pub logits: Option<[Var; 3]>,
}

/// Student objective: ω₁·pose + ω₂·embedding-guidance + ω₃·output-KL.
/// Every zero-weighted (or `EmbedGuidance::None`) branch is skipped, so
/// e.g. ω₂ = ω₃ = 0 builds exactly the baseline tape.
pub fn student_loss(
    tape: &mut Tape,
    heads: &HeadOutputs,
    z_s: Var,
    targets: &[PoseTarget],
    bins: &AngleBinSpec,
    weights: &LossWeights,
    guidance: EmbedGuidance,
    teacher: &TeacherRefs,
) -> Result<LossBundle> {
    weights.validate()?;
    let mut components = Vec::new();
    let pose = pose_loss(tape, heads, targets, bins)?;
    let mut total = accumulate(tape, &mut components, None, "pose", pose, weights.omega1)?;
    if weights.omega2 != 0.0 && guidance != EmbedGuidance::None {
        let term = match guidance {
            EmbedGuidance::Kl => {
                let z_t = teacher.z.ok_or_else(|| {
                    Error::Invalid("embedding KL requires teacher projections".into())
                })?;
                kl_embed(tape, z_t, z_s)?
            }
            EmbedGuidance::ContrastiveToTeacher => {
                let h_t = teacher.h.ok_or_else(|| {
                    Error::Invalid("one-sided contrastive requires teacher embeddings".into())
                })?;
                infonce(tape, z_s, h_t, weights.tau)?
            }
            EmbedGuidance::None => unreachable!(),
        };
        total = accumulate(tape, &mut components, total, "embed", term, weights.omega2)?;
    }
    if weights.omega3 != 0.0 {
        let t_logits = teacher.logits.as_ref().ok_or_else(|| {
            Error::Invalid("output distillation requires teacher logits".into())
        })?;
        let student_logits = heads.logits;
        let term = kl_output(tape, t_logits, &student_logits)?;
        total = accumulate(tape, &mut components, total, "output", term, weights.omega3)?;
    }
    Ok(LossBundle {
        total: total.unwrap(),
        components,
    })
}

#[cfg(test)]
mod tests;
