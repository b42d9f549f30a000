//! Orthographic depth renderer with an exactly rotation-equivariant
//! in-plane treatment.
//!
//! # Camera model
//!
//! Square image, pixel centers at `x = (j + 0.5)·(2/W) − 1`,
//! `y = 1 − (i + 0.5)·(2/H)` (row 0 at the top). Rays start on the plane
//! `z = 2` and travel along `−z`. The shape lives inside the unit sphere,
//! so hit parameters fall in `[1, 3]`. Pixel value encodes normalized hit
//! depth: `0.1 + 0.9·(z_hit + 1)/2` (nearest surface → 1.0, farthest →
//! 0.1), background 0.
//!
//! # In-plane quantization
//!
//! The in-plane angle is snapped to multiples of `π/2²⁰` before ray
//! casting and split into whole quarter turns plus a residual in
//! `[0, π/2)`. Quarter turns are applied to the finished image as an
//! exact pixel permutation, so rotating a pose by +90° produces the
//! bitwise-identical pixel permutation of the original render — the
//! property the rotation-augmentation consistency checks rely on. The
//! quantum is far below the angular resolution any pixel grid can
//! express, so the snap is invisible in the output.

use crate::datagen::primitives::Geometry;
use crate::error::{Error, Result};
use crate::posemath::{rot_azim, rot_elev, rot_inplane, EulerPose};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Angular quantum of the in-plane decomposition: π / 2²⁰.
pub const INPLANE_QUANTUM: f64 = std::f64::consts::PI / ((1u64 << 20) as f64);
/// Quanta per quarter turn.
const QUARTER_TURN_UNITS: i64 = 1 << 19;

/// Minimum supported image resolution.
pub const MIN_RESOLUTION: usize = 8;

/// Noise-free depth render of the shape under the given pose.
pub fn render_clean(geom: &Geometry, pose: &EulerPose, resolution: usize) -> Result<Vec<f32>> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::Config(format!(
            "render resolution {resolution} below minimum {MIN_RESOLUTION}"
        )));
    }
    // Snap the in-plane angle to the quantum grid and split off whole
    // quarter turns (k) from the residual (rho ∈ [0, π/2)).
    let m = (pose.gamma() / INPLANE_QUANTUM).round() as i64;
    let k = m.div_euclid(QUARTER_TURN_UNITS);
    let rho = m.rem_euclid(QUARTER_TURN_UNITS) as f64 * INPLANE_QUANTUM;
    let base = rot_inplane(rho)
        .mul(&rot_elev(-pose.beta()))
        .mul(&rot_azim(-pose.alpha()));
    // A ray hits the rotated shape where the inversely rotated ray hits
    // the canonical shape; rotation preserves the hit parameter.
    let rt = base.transpose();
    let dir = rt.apply([0.0, 0.0, -1.0]);
    let step = 2.0 / resolution as f64;
    let mut img = vec![0.0f32; resolution * resolution];
    for i in 0..resolution {
        let y = 1.0 - (i as f64 + 0.5) * step;
        for j in 0..resolution {
            let x = (j as f64 + 0.5) * step - 1.0;
            let origin = rt.apply([x, y, 2.0]);
            if let Some(t) = geom.ray_hit(origin, dir) {
                let z_hit = 2.0 - t;
                img[i * resolution + j] = (0.1 + 0.9 * (z_hit + 1.0) / 2.0) as f32;
            }
        }
    }
    Ok(rot90_pow(&img, resolution, k.rem_euclid(4) as u32))
}

/// Add clamped Gaussian pixel noise; deterministic in the seed.
pub fn apply_noise(pixels: &[f32], sigma: f64, seed: u64) -> Result<Vec<f32>> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(pixels.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(pixels
        .iter()
        .map(|p| (*p as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect())
}

/// Render with per-sample noise: clean pass, then clamped Gaussian noise.
pub fn render_noisy(
    geom: &Geometry,
    pose: &EulerPose,
    resolution: usize,
    sigma: f64,
    noise_seed: u64,
) -> Result<Vec<f32>> {
    let clean = render_clean(geom, pose, resolution)?;
    apply_noise(&clean, sigma, noise_seed)
}

/// Exact 90° counter-clockwise pixel permutation of a square image
/// (counter-clockwise in the x-right / y-up scene frame):
/// `out[i][j] = in[j][W−1−i]`.
pub fn rot90_ccw(img: &[f32], w: usize) -> Vec<f32> {
    debug_assert_eq!(img.len(), w * w);
    let mut out = vec![0.0f32; img.len()];
    for i in 0..w {
        for j in 0..w {
            out[i * w + j] = img[j * w + (w - 1 - i)];
        }
    }
    out
}

/// `k` quarter turns counter-clockwise (k taken mod 4).
pub fn rot90_pow(img: &[f32], w: usize, k: u32) -> Vec<f32> {
    let mut out = img.to_vec();
    for _ in 0..(k % 4) {
        out = rot90_ccw(&out, w);
    }
    out
}

/// Horizontal mirror (x ↦ −x): `out[i][j] = in[i][W−1−j]`.
pub fn mirror_image(img: &[f32], w: usize) -> Vec<f32> {
    debug_assert_eq!(img.len(), w * w);
    let mut out = vec![0.0f32; img.len()];
    for i in 0..w {
        for j in 0..w {
            out[i * w + j] = img[i * w + (w - 1 - j)];
        }
    }
    out
}

/// Nearest-neighbor rotation of a square image by `phi` counter-clockwise
/// about the image center; pixels pulled from outside the frame become 0.
///
/// Independent of the renderer's quarter-turn machinery on purpose: at
/// `phi = ±90°` the source positions are exact pixel centers, so this
/// reduces to the same permutation as `rot90_pow`, which the consistency
/// tests assert.
pub fn nn_rotate(img: &[f32], w: usize, phi: f64) -> Vec<f32> {
    debug_assert_eq!(img.len(), w * w);
    let step = 2.0 / w as f64;
    let (s, c) = (-phi).sin_cos();
    let mut out = vec![0.0f32; img.len()];
    for i in 0..w {
        let y = 1.0 - (i as f64 + 0.5) * step;
        for j in 0..w {
            let x = (j as f64 + 0.5) * step - 1.0;
            // Pull from the inversely rotated source position.
            let xs = c * x - s * y;
            let ys = s * x + c * y;
            let js = ((xs + 1.0) / step - 0.5).round();
            let is = ((1.0 - ys) / step - 0.5).round();
            if js >= 0.0 && is >= 0.0 && (js as usize) < w && (is as usize) < w {
                out[i * w + j] = img[is as usize * w + js as usize];
            }
        }
    }
    out
}
