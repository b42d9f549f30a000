//! Euler-angle poses, rotation matrices, bin/offset pose encoding, and the
//! geodesic error metric.
//!
//! Conventions used throughout the crate:
//!
//! * A pose is (azimuth α, elevation β, in-plane rotation γ), radians.
//!   α and γ live on the half-open circle [−π, π); β is clamped to
//!   [−π/2, π/2].
//! * The view frame is x right, y up, z toward the viewer. The rotation
//!   applied to a canonical object is
//!   `R = R_inplane(γ) · R_elev(−β) · R_azim(−α)` where R_azim rotates about
//!   y, R_elev about x and R_inplane about z (the view axis).
//! * Coarse-to-fine encoding: each angle θ maps to an integer bin
//!   `j = floor(θ / B)` plus a fractional offset `δ = θ/B − j ∈ [0, 1)`,
//!   with bin width `B = π/12` (15°). Azimuth and in-plane use bins
//!   −12..=11, elevation −6..=5. Decoding returns `(j + δ)·B`.
//! * Angles are serialized as float64 radians; degrees appear only in
//!   reported metrics (geodesic errors, Acc30, MedErr).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Largest f64 strictly below 1; offsets are clamped here so that a bin
/// offset never reaches the next bin.
const OFFSET_MAX: f64 = 0.999_999_999_999_999_9;

/// Wrap an angle into [−π, π). In-range inputs are returned unchanged so
/// that wrapping is an exact identity on already-wrapped values.
pub fn wrap_angle(x: f64) -> f64 {
    if (-PI..PI).contains(&x) {
        return x;
    }
    let two_pi = 2.0 * PI;
    let mut y = (x + PI).rem_euclid(two_pi) - PI;
    if y >= PI {
        y -= two_pi;
    }
    if y < -PI {
        y = -PI;
    }
    y
}

/// Viewpoint as (azimuth, elevation, in-plane) Euler angles in radians.
/// Construction wraps α and γ into [−π, π) and clamps β into [−π/2, π/2],
/// so a value of this type is always in canonical form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerPose {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl EulerPose {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        assert!(
            alpha.is_finite() && beta.is_finite() && gamma.is_finite(),
            "pose angles must be finite"
        );
        EulerPose {
            alpha: wrap_angle(alpha),
            beta: beta.clamp(-PI / 2.0, PI / 2.0),
            gamma: wrap_angle(gamma),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Angles in encoding order: [azimuth, elevation, in-plane].
    pub fn angles(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }
}

/// Horizontal-flip label rule: (α, β, γ) → (−α, β, −γ).
pub fn augment_flip(pose: &EulerPose) -> EulerPose {
    EulerPose::new(-pose.alpha, pose.beta, -pose.gamma)
}

/// In-plane rotation label rule: rotating the image by φ adds φ to γ.
pub fn augment_rotate(pose: &EulerPose, phi: f64) -> EulerPose {
    EulerPose::new(pose.alpha, pose.beta, pose.gamma + phi)
}

/// 3×3 rotation matrix, row-major. `new` checks orthonormality and unit
/// determinant to 1e-9; matrices built by [`euler_to_matrix`] satisfy this
/// by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix {
    m: [[f64; 3]; 3],
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

fn mat3_det(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl RotationMatrix {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = RotationMatrix { m };
        let rtr = mat3_mul(&r.transpose().m, &m);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - expect).abs() > Self::TOLERANCE {
                    return Err(Error::Invalid(format!(
                        "matrix is not orthonormal: (RᵀR)[{i}][{j}] = {}",
                        rtr[i][j]
                    )));
                }
            }
        }
        let det = mat3_det(&m);
        if (det - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Invalid(format!("matrix determinant {det} != 1")));
        }
        Ok(r)
    }

    pub fn identity() -> Self {
        RotationMatrix {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn transpose(&self) -> Self {
        let mut t = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                t[i][j] = self.m[j][i];
            }
        }
        RotationMatrix { m: t }
    }

    pub fn mul(&self, other: &RotationMatrix) -> Self {
        RotationMatrix {
            m: mat3_mul(&self.m, &other.m),
        }
    }

    /// Apply to a column vector.
    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }
}

/// Rotation about the y (vertical) axis.
pub fn rot_azim(t: f64) -> RotationMatrix {
    let (s, c) = t.sin_cos();
    RotationMatrix {
        m: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
    }
}

/// Rotation about the x (horizontal, in-image) axis.
pub fn rot_elev(t: f64) -> RotationMatrix {
    let (s, c) = t.sin_cos();
    RotationMatrix {
        m: [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
    }
}

/// Rotation about the z (view) axis.
pub fn rot_inplane(t: f64) -> RotationMatrix {
    let (s, c) = t.sin_cos();
    RotationMatrix {
        m: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

/// R = R_inplane(γ) · R_elev(−β) · R_azim(−α).
pub fn euler_to_matrix(pose: &EulerPose) -> RotationMatrix {
    rot_inplane(pose.gamma)
        .mul(&rot_elev(-pose.beta))
        .mul(&rot_azim(-pose.alpha))
}

/// Geodesic distance on SO(3) in degrees:
/// arccos(clamp((trace(r1ᵀ·r2) − 1) / 2, −1, 1)) · 180/π.
///
/// Evaluated as atan2(‖skew(r1ᵀ·r2)‖, trace − 1), which equals the arccos
/// form on rotation matrices but stays accurate near 0° and 180°, where
/// arccos of a rounded trace loses up to ~2e-6 degrees.
pub fn geodesic_error_deg(r1: &RotationMatrix, r2: &RotationMatrix) -> f64 {
    let p = r1.transpose().mul(r2).m;
    let trace = p[0][0] + p[1][1] + p[2][2];
    let v = [p[2][1] - p[1][2], p[0][2] - p[2][0], p[1][0] - p[0][1]];
    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    s.atan2(trace - 1.0).to_degrees()
}

/// Bin layout for the coarse-to-fine encoding. Ranges are inclusive bin
/// indices; `bin_width × count` must tile each angle's domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleBinSpec {
    pub bin_width: f64,
    pub azim_range: (i32, i32),
    pub elev_range: (i32, i32),
    pub inplane_range: (i32, i32),
}

impl Default for AngleBinSpec {
    fn default() -> Self {
        AngleBinSpec {
            bin_width: PI / 12.0,
            azim_range: (-12, 11),
            elev_range: (-6, 5),
            inplane_range: (-12, 11),
        }
    }
}

impl AngleBinSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width.is_finite() && self.bin_width > 0.0) {
            return Err(Error::Invalid(format!(
                "bin width must be positive, got {}",
                self.bin_width
            )));
        }
        let spans = [
            (self.azim_range, 2.0 * PI, "azimuth"),
            (self.elev_range, PI, "elevation"),
            (self.inplane_range, 2.0 * PI, "in-plane"),
        ];
        for ((lo, hi), span, name) in spans {
            if lo > hi {
                return Err(Error::Invalid(format!("{name} bin range {lo}..={hi} is empty")));
            }
            let count = (hi - lo + 1) as f64;
            if (count * self.bin_width - span).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "{name} bins do not tile the domain: {count} × {} != {span}",
                    self.bin_width
                )));
            }
        }
        Ok(())
    }

    /// Inclusive index range for angle 0 (azimuth), 1 (elevation),
    /// 2 (in-plane).
    pub fn range(&self, angle: usize) -> (i32, i32) {
        match angle {
            0 => self.azim_range,
            1 => self.elev_range,
            2 => self.inplane_range,
            _ => panic!("angle index {angle} out of range"),
        }
    }

    pub fn bin_count(&self, angle: usize) -> usize {
        let (lo, hi) = self.range(angle);
        (hi - lo + 1) as usize
    }

    /// Bin counts per angle, encoding order.
    pub fn bin_counts(&self) -> [usize; 3] {
        [self.bin_count(0), self.bin_count(1), self.bin_count(2)]
    }
}

/// Ground-truth encoding of one pose: per-angle bin index plus fractional
/// offset in [0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseTarget {
    pub bins: [i32; 3],
    pub offsets: [f64; 3],
}

/// Encode a pose into bin indices and offsets. Bins are clamped into the
/// spec's ranges (relevant only at the closed top of the elevation domain,
/// β = +π/2, where the offset is then clamped just below 1).
pub fn encode_pose(pose: &EulerPose, spec: &AngleBinSpec) -> Result<PoseTarget> {
    spec.validate()?;
    let mut bins = [0i32; 3];
    let mut offsets = [0f64; 3];
    for (k, theta) in pose.angles().into_iter().enumerate() {
        let (lo, hi) = spec.range(k);
        let t = theta / spec.bin_width;
        let j = (t.floor() as i32).clamp(lo, hi);
        let delta = (t - j as f64).clamp(0.0, OFFSET_MAX);
        bins[k] = j;
        offsets[k] = delta;
    }
    Ok(PoseTarget { bins, offsets })
}

/// Model output for one sample: per-angle bin scores plus a per-bin offset
/// prediction in [0, 1]. Lengths follow `AngleBinSpec::bin_counts`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosePrediction {
    pub bin_scores: [Vec<f64>; 3],
    pub offsets: [Vec<f64>; 3],
}

impl PosePrediction {
    pub fn new(bin_scores: [Vec<f64>; 3], offsets: [Vec<f64>; 3], spec: &AngleBinSpec) -> Result<Self> {
        for k in 0..3 {
            let n = spec.bin_count(k);
            if bin_scores[k].len() != n || offsets[k].len() != n {
                return Err(Error::Invalid(format!(
                    "angle {k}: expected {n} bins, got {} scores / {} offsets",
                    bin_scores[k].len(),
                    offsets[k].len()
                )));
            }
            if bin_scores[k].iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("angle {k}: non-finite bin score")));
            }
            if offsets[k].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Invalid(format!("angle {k}: offset outside [0, 1]")));
            }
        }
        Ok(PosePrediction { bin_scores, offsets })
    }
}

/// Decode a prediction to angles: pick the arg-max bin per angle (ties go
/// to the smaller index), then θ = (j + δ_j)·B, wrapped/clamped into the
/// angle's domain.
pub fn decode_pose(pred: &PosePrediction, spec: &AngleBinSpec) -> Result<EulerPose> {
    spec.validate()?;
    let mut angles = [0f64; 3];
    for k in 0..3 {
        let (lo, _) = spec.range(k);
        let scores = &pred.bin_scores[k];
        if scores.len() != spec.bin_count(k) {
            return Err(Error::Invalid(format!(
                "angle {k}: {} scores for {} bins",
                scores.len(),
                spec.bin_count(k)
            )));
        }
        let mut best = 0usize;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        let j = lo + best as i32;
        angles[k] = (j as f64 + pred.offsets[k][best]) * spec.bin_width;
    }
    Ok(EulerPose::new(angles[0], angles[1], angles[2]))
}

/// Ideal prediction for a target: one-hot scores at the target bin and the
/// target offset stored at that bin. Used by round-trip tests and report
/// rendering.
pub fn prediction_from_target(target: &PoseTarget, spec: &AngleBinSpec) -> PosePrediction {
    let mut bin_scores: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    let mut offsets: [Vec<f64>; 3] = [vec![], vec![], vec![]];
    for k in 0..3 {
        let (lo, _) = spec.range(k);
        let n = spec.bin_count(k);
        let col = (target.bins[k] - lo) as usize;
        let mut s = vec![0.0; n];
        s[col] = 1.0;
        let mut o = vec![0.0; n];
        o[col] = target.offsets[k];
        bin_scores[k] = s;
        offsets[k] = o;
    }
    PosePrediction { bin_scores, offsets }
}

/// Fraction of errors strictly below 30°. Errors must be finite and
/// non-empty.
pub fn acc30(errors_deg: &[f64]) -> Result<f64> {
    if errors_deg.is_empty() {
        return Err(Error::Invalid("acc30 of an empty error list".into()));
    }
    if errors_deg.iter().any(|e| !e.is_finite()) {
        return Err(Error::Invalid("acc30 with non-finite error".into()));
    }
    let hits = errors_deg.iter().filter(|e| **e < 30.0).count();
    Ok(hits as f64 / errors_deg.len() as f64)
}

/// Median error in degrees; an even-length list returns the mean of the two
/// central order statistics.
pub fn mederr(errors_deg: &[f64]) -> Result<f64> {
    if errors_deg.is_empty() {
        return Err(Error::Invalid("mederr of an empty error list".into()));
    }
    if errors_deg.iter().any(|e| !e.is_finite()) {
        return Err(Error::Invalid("mederr with non-finite error".into()));
    }
    let mut sorted = errors_deg.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// Geodesic error between two poses' rotation matrices, degrees.
pub fn pose_error_deg(a: &EulerPose, b: &EulerPose) -> f64 {
    geodesic_error_deg(&euler_to_matrix(a), &euler_to_matrix(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> EulerPose {
        EulerPose::new(
            rng.random_range(-PI..PI),
            rng.random_range(-PI / 2.0..=PI / 2.0),
            rng.random_range(-PI..PI),
        )
    }

    /// Test-local matrix product oracle, kept independent of the library's
    /// implementation.
    fn oracle_matrix(pose: &EulerPose) -> [[f64; 3]; 3] {
        fn mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
            let mut c = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for (k, bk) in b.iter().enumerate() {
                        c[i][j] += a[i][k] * bk[j];
                    }
                }
            }
            c
        }
        let (sa, ca) = (-pose.alpha()).sin_cos();
        let (sb, cb) = (-pose.beta()).sin_cos();
        let (sg, cg) = pose.gamma().sin_cos();
        let ry = [[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cb, -sb], [0.0, sb, cb]];
        let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
        mul(mul(rz, rx), ry)
    }

    #[test]
    fn wrap_angle_edges() {
        assert_eq!(wrap_angle(0.0), 0.0);
        assert_eq!(wrap_angle(-PI), -PI);
        assert_eq!(wrap_angle(PI), -PI);
        assert!((wrap_angle(3.0 * PI) - (-PI)).abs() < 1e-12);
        assert!((wrap_angle(2.0 * PI)).abs() < 1e-12);
        let x = 1.234;
        assert_eq!(wrap_angle(x), x);
        assert!((wrap_angle(x + 2.0 * PI) - x).abs() < 1e-12);
        assert!((wrap_angle(x - 6.0 * PI) - x).abs() < 1e-12);
    }

    #[test]
    fn identity_pose_gives_identity_matrix() {
        let r = euler_to_matrix(&EulerPose::new(0.0, 0.0, 0.0));
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((r.rows()[i][j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn elementary_pose_matrices() {
        // α = 90°: R = R_azim(−π/2).
        let r = euler_to_matrix(&EulerPose::new(PI / 2.0, 0.0, 0.0));
        let expect = [[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
        // β = 90°: R = R_elev(−π/2).
        let rb = euler_to_matrix(&EulerPose::new(0.0, PI / 2.0, 0.0));
        let expect_b = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]];
        // γ = 90°: R = R_inplane(π/2).
        let rg = euler_to_matrix(&EulerPose::new(0.0, 0.0, PI / 2.0));
        let expect_g = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((r.rows()[i][j] - expect[i][j]).abs() < 1e-15, "azim");
                assert!((rb.rows()[i][j] - expect_b[i][j]).abs() < 1e-15, "elev");
                assert!((rg.rows()[i][j] - expect_g[i][j]).abs() < 1e-15, "inplane");
            }
        }
    }

    #[test]
    fn matrix_matches_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let p = random_pose(&mut rng);
            let r = euler_to_matrix(&p);
            let o = oracle_matrix(&p);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((r.rows()[i][j] - o[i][j]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn euler_matrices_are_valid_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let r = euler_to_matrix(&random_pose(&mut rng));
            RotationMatrix::new(*r.rows()).expect("orthonormal with unit determinant");
        }
    }

    #[test]
    fn rotation_matrix_rejects_invalid() {
        assert!(RotationMatrix::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.01]]).is_err());
        // Orthonormal but det = −1 (a reflection).
        assert!(RotationMatrix::new([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn encode_known_values() {
        let spec = AngleBinSpec::default();
        let b = spec.bin_width;

        // α at an exact half-bin position: bin 2, offset 1/2.
        let t = encode_pose(&EulerPose::new(2.5 * b, 0.0, 0.0), &spec).unwrap();
        assert_eq!(t.bins[0], 2);
        assert!((t.offsets[0] - 0.5).abs() < 1e-12);

        // The same position quoted in radians (37.5°).
        let t = encode_pose(&EulerPose::new(0.6545, 0.0, 0.0), &spec).unwrap();
        assert_eq!(t.bins[0], 2);
        assert!((t.offsets[0] - 0.5).abs() < 1e-4);

        // β = −π/2 is the first elevation bin with offset 0.
        let t = encode_pose(&EulerPose::new(0.0, -PI / 2.0, 0.0), &spec).unwrap();
        assert_eq!(t.bins[1], -6);
        assert!(t.offsets[1].abs() < 1e-12);

        // β = +π/2 (closed top of the domain): clamps into bin 5 with the
        // offset capped just below 1.
        let t = encode_pose(&EulerPose::new(0.0, PI / 2.0, 0.0), &spec).unwrap();
        assert_eq!(t.bins[1], 5);
        assert!(t.offsets[1] < 1.0 && t.offsets[1] > 1.0 - 1e-9);

        // α = −π is the first azimuth bin.
        let t = encode_pose(&EulerPose::new(-PI, 0.0, 0.0), &spec).unwrap();
        assert_eq!(t.bins[0], -12);
        assert!(t.offsets[0].abs() < 1e-12);
    }

    #[test]
    fn decode_breaks_ties_toward_smaller_index() {
        let spec = AngleBinSpec::default();
        let mut scores: [Vec<f64>; 3] = [vec![0.0; 24], vec![0.0; 12], vec![0.0; 24]];
        // Two equal maxima per angle; the smaller index must win.
        scores[0][3] = 1.0;
        scores[0][9] = 1.0;
        scores[1][2] = 1.0;
        scores[1][7] = 1.0;
        scores[2][0] = 1.0;
        scores[2][23] = 1.0;
        let offsets: [Vec<f64>; 3] = [vec![0.0; 24], vec![0.0; 12], vec![0.0; 24]];
        let pred = PosePrediction::new(scores, offsets, &spec).unwrap();
        let pose = decode_pose(&pred, &spec).unwrap();
        assert!((pose.alpha() - (-12 + 3) as f64 * spec.bin_width).abs() < 1e-12);
        assert!((pose.beta() - (-6 + 2) as f64 * spec.bin_width).abs() < 1e-12);
        assert!((pose.gamma() - (-12) as f64 * spec.bin_width).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip_10k() {
        let spec = AngleBinSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let mut max_err = 0f64;
        for _ in 0..10_000 {
            let p = random_pose(&mut rng);
            let target = encode_pose(&p, &spec).unwrap();
            let pred = prediction_from_target(&target, &spec);
            let q = decode_pose(&pred, &spec).unwrap();
            for (a, b) in p.angles().into_iter().zip(q.angles()) {
                max_err = max_err.max(wrap_angle(a - b).abs());
            }
        }
        assert!(max_err < 1e-9, "max round-trip angle error {max_err}");
    }

    #[test]
    fn acc30_counts_strictly_below_threshold() {
        let errs = [0.0, 10.0, 29.999, 30.0, 30.001, 45.0, 1.0, 15.0, 5.0, 29.0];
        // 7 of 10 are strictly below 30: a report of 0.70 means exactly that.
        assert!((acc30(&errs).unwrap() - 0.7).abs() < 1e-15);
        assert!(acc30(&[]).is_err());
    }

    #[test]
    fn mederr_even_and_odd() {
        assert_eq!(mederr(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(mederr(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(mederr(&[]).is_err());
    }

    #[test]
    fn mederr_uniform_sample_near_half_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let errs: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..60.0)).collect();
        let m = mederr(&errs).unwrap();
        assert!((m - 30.0).abs() < 1.0, "median of U[0,60] sample was {m}");
    }

    #[test]
    fn flip_examples_and_involution() {
        let p = augment_flip(&EulerPose::new(30f64.to_radians(), 10f64.to_radians(), 40f64.to_radians()));
        assert!((p.alpha().to_degrees() + 30.0).abs() < 1e-12);
        assert!((p.beta().to_degrees() - 10.0).abs() < 1e-12);
        assert!((p.gamma().to_degrees() + 40.0).abs() < 1e-12);

        // Azimuth −180° maps to itself (wrap keeps −π).
        let q = augment_flip(&EulerPose::new(-PI, 0.2, 0.0));
        assert_eq!(q.alpha(), -PI);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let q = augment_flip(&augment_flip(&p));
            assert_eq!(p.angles(), q.angles());
        }
    }

    #[test]
    fn rotate_identity_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let q = augment_rotate(&p, 0.0);
            assert_eq!(p.angles(), q.angles());

            let (f1, f2) = (rng.random_range(-PI..PI), rng.random_range(-PI..PI));
            let a = augment_rotate(&augment_rotate(&p, f1), f2);
            let b = augment_rotate(&p, wrap_angle(f1 + f2));
            assert!(wrap_angle(a.gamma() - b.gamma()).abs() < 1e-12);
            assert_eq!(a.alpha(), b.alpha());
            assert_eq!(a.beta(), b.beta());
        }
    }

    #[test]
    fn geodesic_metric_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let (pa, pb, pc) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let (ra, rb, rc) = (euler_to_matrix(&pa), euler_to_matrix(&pb), euler_to_matrix(&pc));
            let dab = geodesic_error_deg(&ra, &rb);
            let dba = geodesic_error_deg(&rb, &ra);
            assert!((dab - dba).abs() < 1e-6, "symmetry");
            assert!(geodesic_error_deg(&ra, &ra) < 1e-6, "zero at equality");
            assert!(dab > 1e-6 || pose_error_deg(&pa, &pb) < 1e-6, "positive when distinct");
            let (dac, dcb) = (geodesic_error_deg(&ra, &rc), geodesic_error_deg(&rc, &rb));
            assert!(dab <= dac + dcb + 1e-6, "triangle inequality");
            assert!((0.0..=180.0 + 1e-9).contains(&dab));
        }
    }

    #[test]
    fn geodesic_known_value() {
        // 90° about the view axis.
        let a = euler_to_matrix(&EulerPose::new(0.0, 0.0, 0.0));
        let b = euler_to_matrix(&EulerPose::new(0.0, 0.0, PI / 2.0));
        assert!((geodesic_error_deg(&a, &b) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn bin_spec_validation() {
        assert!(AngleBinSpec::default().validate().is_ok());
        let mut bad = AngleBinSpec::default();
        bad.bin_width = PI / 10.0;
        assert!(bad.validate().is_err());
        let mut bad = AngleBinSpec::default();
        bad.elev_range = (-5, 5);
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn prop_encode_offsets_in_range(a in -PI..PI, b in -PI/2.0..=PI/2.0, g in -PI..PI) {
            let spec = AngleBinSpec::default();
            let t = encode_pose(&EulerPose::new(a, b, g), &spec).unwrap();
            for k in 0..3 {
                let (lo, hi) = spec.range(k);
                prop_assert!(t.bins[k] >= lo && t.bins[k] <= hi);
                prop_assert!(t.offsets[k] >= 0.0 && t.offsets[k] < 1.0);
            }
        }

        #[test]
        fn prop_wrap_angle_in_domain(x in -100.0f64..100.0) {
            let y = wrap_angle(x);
            prop_assert!((-PI..PI).contains(&y));
            // Same point on the circle.
            let d = (x - y).rem_euclid(2.0 * PI);
            prop_assert!(d < 1e-9 || (2.0 * PI - d) < 1e-9);
        }
    }
}
