//! Procedural 3D primitives: parameterized shape specs, area-uniform
//! surface sampling, analytic surface-residual functions, ray
//! intersection, and the canonical-frame construction shared by the point
//! clouds and the renderer.
//!
//! # Canonical frame
//!
//! Each primitive is defined in a local frame (box centered at the origin,
//! cylinder/cone axis on z, ...). The canonical frame then applies two
//! fixed transforms:
//!
//! 1. an offset `(0, dy, dz)` translating the primitive away from the
//!    origin, and
//! 2. a uniform scale putting the farthest surface point exactly on the
//!    unit sphere.
//!
//! The offset is load-bearing: centered boxes/cylinders/cones are
//! invariant under 180° self-rotations, which makes their pose
//! unrecoverable from images in principle. Shifting the primitive off the
//! rotation center breaks every such self-symmetry while keeping `dx = 0`,
//! so the shape stays mirror-symmetric about the x = 0 plane — the
//! property the horizontal-flip label rule relies on. `lshape` is the one
//! deliberately x-asymmetric category. Offsets of zero are accepted (used
//! by tests that need exact rotational symmetry, e.g. spheres).

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The six shape categories of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Box,
    Cylinder,
    Cone,
    Ellipsoid,
    Lshape,
    Tshape,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Box,
        Category::Cylinder,
        Category::Cone,
        Category::Ellipsoid,
        Category::Lshape,
        Category::Tshape,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::Cylinder => "cylinder",
            Category::Cone => "cone",
            Category::Ellipsoid => "ellipsoid",
            Category::Lshape => "lshape",
            Category::Tshape => "tshape",
        }
    }

    pub fn from_name(name: &str) -> Result<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown category {name:?}")))
    }

    pub fn id(&self) -> u16 {
        Category::ALL.iter().position(|c| c == self).unwrap() as u16
    }

    pub fn from_id(id: u16) -> Result<Category> {
        Category::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("category id {id} out of range")))
    }

    /// Whether the canonical shape is mirror-symmetric about x = 0 (the
    /// precondition of the exact flip-augmentation property).
    pub fn mirror_symmetric(&self) -> bool {
        !matches!(self, Category::Lshape)
    }

    /// Number of size parameters, including the trailing (dy, dz) offset.
    pub fn param_count(&self) -> usize {
        match self {
            Category::Box => 5,        // hx, hy, hz, dy, dz
            Category::Cylinder => 4,   // r, h, dy, dz
            Category::Cone => 4,       // r, h, dy, dz
            Category::Ellipsoid => 5,  // a, b, c, dy, dz
            Category::Lshape => 7,     // w, hy, t, foot_w, foot_h, dy, dz
            Category::Tshape => 7,     // w, hy, bar_w, bar_h, t, dy, dz
        }
    }
}

/// Documented parameter bounds: dimensions in (0, `DIM_MAX`], offsets in
/// [0, `OFFSET_MAX`]. The generator draws from narrower ranges inside
/// these bounds (see `ShapeSpec::sample`).
pub const DIM_MAX: f64 = 1.6;
pub const OFFSET_PARAM_MAX: f64 = 0.4;

/// A fully parameterized shape instance. Same seed → same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub category: Category,
    /// Per-category layout documented in `Category::param_count`; the last
    /// two entries are always the canonical offset (dy, dz).
    pub size_params: Vec<f64>,
    pub instance_seed: u64,
}

impl ShapeSpec {
    pub fn new(category: Category, size_params: Vec<f64>, instance_seed: u64) -> Result<Self> {
        if size_params.len() != category.param_count() {
            return Err(Error::Config(format!(
                "{} expects {} size params, got {}",
                category.name(),
                category.param_count(),
                size_params.len()
            )));
        }
        let n_dims = size_params.len() - 2;
        for (i, p) in size_params.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::Config(format!(
                    "size param {i} of {} is not finite",
                    category.name()
                )));
            }
            if i < n_dims && (*p <= 0.0 || *p > DIM_MAX) {
                return Err(Error::Config(format!(
                    "dimension param {i} of {} out of (0, {DIM_MAX}]: {p}",
                    category.name()
                )));
            }
            if i >= n_dims && (*p < 0.0 || *p > OFFSET_PARAM_MAX) {
                return Err(Error::Config(format!(
                    "offset param {i} of {} out of [0, {OFFSET_PARAM_MAX}]: {p}",
                    category.name()
                )));
            }
        }
        Ok(ShapeSpec {
            category,
            size_params,
            instance_seed,
        })
    }

    /// Draw a randomized instance of the category from the generator
    /// ranges. Deterministic in (category, seed).
    pub fn sample(category: Category, instance_seed: u64) -> ShapeSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
        let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let dims = match category {
            Category::Box => vec![r(0.30, 0.45), r(0.55, 0.75), r(0.15, 0.28)],
            Category::Cylinder => vec![r(0.25, 0.38), r(1.0, 1.5)],
            Category::Cone => vec![r(0.30, 0.45), r(1.0, 1.5)],
            Category::Ellipsoid => vec![r(0.22, 0.32), r(0.45, 0.60), r(0.12, 0.20)],
            Category::Lshape => vec![
                r(0.12, 0.18),
                r(0.45, 0.60),
                r(0.12, 0.18),
                r(0.20, 0.28),
                r(0.10, 0.15),
            ],
            Category::Tshape => vec![
                r(0.10, 0.15),
                r(0.45, 0.58),
                r(0.32, 0.45),
                r(0.09, 0.13),
                r(0.12, 0.18),
            ],
        };
        let mut size_params = dims;
        size_params.push(r(0.15, 0.25)); // dy
        size_params.push(r(0.10, 0.20)); // dz
        ShapeSpec::new(category, size_params, instance_seed).expect("generator ranges are valid")
    }

    pub fn offset(&self) -> [f64; 3] {
        let n = self.size_params.len();
        [0.0, self.size_params[n - 2], self.size_params[n - 1]]
    }
}

/// Axis-aligned box in the local frame.
#[derive(Debug, Clone, Copy)]
struct BoxGeom {
    center: [f64; 3],
    half: [f64; 3],
}

impl BoxGeom {
    fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let q = [
            (p[0] - self.center[0]).abs() - self.half[0],
            (p[1] - self.center[1]).abs() - self.half[1],
            (p[2] - self.center[2]).abs() - self.half[2],
        ];
        let outside = [q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)];
        let out_len = (outside[0] * outside[0] + outside[1] * outside[1] + outside[2] * outside[2])
            .sqrt();
        out_len + q[0].max(q[1]).max(q[2]).min(0.0)
    }

    fn area(&self) -> f64 {
        8.0 * (self.half[0] * self.half[1]
            + self.half[1] * self.half[2]
            + self.half[0] * self.half[2])
    }

    /// Area-uniform point on the box surface.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let [hx, hy, hz] = self.half;
        let areas = [hy * hz, hx * hz, hx * hy]; // per axis-pair, ×8 total
        let total: f64 = areas.iter().sum();
        let mut pick = rng.random_range(0.0..total);
        let mut axis = 2;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                axis = i;
                break;
            }
            pick -= a;
        }
        let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        let mut p = [
            rng.random_range(-hx..hx),
            rng.random_range(-hy..hy),
            rng.random_range(-hz..hz),
        ];
        p[axis] = sign * self.half[axis];
        [
            p[0] + self.center[0],
            p[1] + self.center[1],
            p[2] + self.center[2],
        ]
    }

    /// Parameter of the ray's entry into the box, if it hits.
    fn ray_entry(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for axis in 0..3 {
            let lo = self.center[axis] - self.half[axis];
            let hi = self.center[axis] + self.half[axis];
            if d[axis].abs() < 1e-15 {
                if o[axis] < lo || o[axis] > hi {
                    return None;
                }
                continue;
            }
            let mut t0 = (lo - o[axis]) / d[axis];
            let mut t1 = (hi - o[axis]) / d[axis];
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        (t_near >= 0.0).then_some(t_near)
    }

    fn max_corner_norm(&self, offset: [f64; 3]) -> f64 {
        let mut best: f64 = 0.0;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let p = [
                        self.center[0] + sx * self.half[0] + offset[0],
                        self.center[1] + sy * self.half[1] + offset[1],
                        self.center[2] + sz * self.half[2] + offset[2],
                    ];
                    best = best.max(norm(p));
                }
            }
        }
        best
    }
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[derive(Debug, Clone)]
enum Kind {
    Box(BoxGeom),
    /// radius, half-height; axis z
    Cylinder(f64, f64),
    /// base radius, half-height; apex at +z
    Cone(f64, f64),
    /// semi-axes
    Ellipsoid([f64; 3]),
    /// union of two overlapping boxes
    TwoBox(BoxGeom, BoxGeom),
}

/// A shape instanced in the canonical frame: local geometry + offset +
/// unit-sphere normalization scale.
#[derive(Debug, Clone)]
pub struct Geometry {
    kind: Kind,
    offset: [f64; 3],
    /// canonical = (local + offset) · scale
    scale: f64,
}

/// Keeps ‖canonical point‖ strictly ≤ 1 despite rounding in the
/// normalization division.
const NORM_SHRINK: f64 = 1.0 - 1e-12;

impl Geometry {
    pub fn from_spec(spec: &ShapeSpec) -> Result<Geometry> {
        // Re-validate so hand-built specs cannot bypass range checks.
        let spec = ShapeSpec::new(spec.category, spec.size_params.clone(), spec.instance_seed)?;
        let p = &spec.size_params;
        let kind = match spec.category {
            Category::Box => Kind::Box(BoxGeom {
                center: [0.0; 3],
                half: [p[0], p[1], p[2]],
            }),
            Category::Cylinder => Kind::Cylinder(p[0], p[1] / 2.0),
            Category::Cone => Kind::Cone(p[0], p[1] / 2.0),
            Category::Ellipsoid => Kind::Ellipsoid([p[0], p[1], p[2]]),
            Category::Lshape => {
                let (w, hy, t, fw, fh) = (p[0], p[1], p[2], p[3], p[4]);
                // Tall bar plus a foot protruding toward +x; the foot
                // penetrates the bar (no coplanar faces) and is thinner in
                // z so union surface sampling stays area-uniform.
                Kind::TwoBox(
                    BoxGeom {
                        center: [0.0; 3],
                        half: [w, hy, t],
                    },
                    BoxGeom {
                        center: [w + 0.6 * fw, -hy + 1.1 * fh, 0.0],
                        half: [fw, fh, 0.8 * t],
                    },
                )
            }
            Category::Tshape => {
                let (w, hy, bw, bh, t) = (p[0], p[1], p[2], p[3], p[4]);
                // Stem plus a wider crossbar near the top, overlapping the
                // stem and poking slightly above it; x-symmetric.
                Kind::TwoBox(
                    BoxGeom {
                        center: [0.0; 3],
                        half: [w, hy, t],
                    },
                    BoxGeom {
                        center: [0.0, hy - 0.9 * bh, 0.0],
                        half: [bw, bh, 0.85 * t],
                    },
                )
            }
        };
        let offset = spec.offset();
        let radius = bounding_radius(&kind, offset);
        Ok(Geometry {
            kind,
            offset,
            scale: NORM_SHRINK / radius,
        })
    }

    /// Farthest canonical-frame point distance before normalization.
    pub fn local_bounding_radius(&self) -> f64 {
        NORM_SHRINK / self.scale
    }

    fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] / self.scale - self.offset[0],
            p[1] / self.scale - self.offset[1],
            p[2] / self.scale - self.offset[2],
        ]
    }

    fn to_canonical(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] + self.offset[0]) * self.scale,
            (p[1] + self.offset[1]) * self.scale,
            (p[2] + self.offset[2]) * self.scale,
        ]
    }

    /// Area-uniform surface point in the canonical frame.
    pub fn sample_surface(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        self.to_canonical(self.sample_surface_local(rng))
    }

    /// Area-uniform surface point in the local frame (before offset and
    /// normalization) — the frame in which the primitive definitions
    /// (half-extents, radii) apply literally.
    pub fn sample_surface_local(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match &self.kind {
            Kind::Box(b) => b.sample_surface(rng),
            Kind::Cylinder(r, hh) => {
                let (r, hh) = (*r, *hh);
                let cap = std::f64::consts::PI * r * r;
                let side = 2.0 * std::f64::consts::PI * r * 2.0 * hh;
                let pick = rng.random_range(0.0..(2.0 * cap + side));
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                if pick < side {
                    let z = rng.random_range(-hh..hh);
                    [r * theta.cos(), r * theta.sin(), z]
                } else {
                    let rho = r * rng.random_range(0.0f64..1.0).sqrt();
                    let z = if pick < side + cap { -hh } else { hh };
                    [rho * theta.cos(), rho * theta.sin(), z]
                }
            }
            Kind::Cone(r, hh) => {
                let base = std::f64::consts::PI * r * r;
                let slant = (r * r + 4.0 * hh * hh).sqrt();
                let lateral = std::f64::consts::PI * r * slant;
                let pick = rng.random_range(0.0..(base + lateral));
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                if pick < base {
                    let rho = r * rng.random_range(0.0f64..1.0).sqrt();
                    [rho * theta.cos(), rho * theta.sin(), -hh]
                } else {
                    // Fraction of the way from apex to rim; area grows
                    // linearly with the radius, hence the sqrt.
                    let f = rng.random_range(0.0f64..1.0).sqrt();
                    let rho = f * r;
                    [rho * theta.cos(), rho * theta.sin(), hh - f * 2.0 * hh]
                }
            }
            Kind::Ellipsoid(s) => {
                let min_s = s[0].min(s[1]).min(s[2]);
                loop {
                    // Uniform direction, then accept proportionally to the
                    // local area stretch of u ↦ (a·ux, b·uy, c·uz).
                    let u = unit_vector(rng);
                    let g = norm([u[0] / s[0], u[1] / s[1], u[2] / s[2]]);
                    if rng.random_range(0.0..1.0) < g * min_s {
                        return [s[0] * u[0], s[1] * u[1], s[2] * u[2]];
                    }
                }
            }
            Kind::TwoBox(a, b) => {
                let (area_a, area_b) = (a.area(), b.area());
                loop {
                    let on_a = rng.random_range(0.0..(area_a + area_b)) < area_a;
                    let (own, other) = if on_a { (a, b) } else { (b, a) };
                    let p = own.sample_surface(rng);
                    // Keep only points on the union surface: reject those
                    // strictly inside the other box.
                    if other.signed_distance(p) >= -1e-12 {
                        return p;
                    }
                }
            }
        }
    }

    /// Analytic surface residual in the canonical frame: exactly zero on
    /// the surface, approximately the Euclidean distance near it (exact
    /// for boxes, cylinders and cones; a scaled implicit function for
    /// ellipsoids), negative inside.
    pub fn surface_distance(&self, p: [f64; 3]) -> f64 {
        self.local_surface_distance(self.to_local(p)) * self.scale
    }

    fn local_surface_distance(&self, p: [f64; 3]) -> f64 {
        match &self.kind {
            Kind::Box(b) => b.signed_distance(p),
            Kind::Cylinder(r, hh) => {
                let dr = (p[0] * p[0] + p[1] * p[1]).sqrt() - r;
                let dz = p[2].abs() - hh;
                let out = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                out + dr.max(dz).min(0.0)
            }
            Kind::Cone(r, hh) => {
                // Distance in the (radius, z) half-plane to the union of
                // the base disc edge/face and the apex-to-rim segment.
                let rho = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let z = p[2];
                let base = if rho <= *r {
                    (z + hh).abs()
                } else {
                    ((rho - r).powi(2) + (z + hh).powi(2)).sqrt()
                };
                let lateral = dist_point_segment([rho, z], [0.0, *hh], [*r, -*hh]);
                let d = base.min(lateral);
                // Inside test: below the lateral line and above the base.
                let inside = z > -hh && rho / r < (hh - z) / (2.0 * hh) && z < *hh;
                if inside {
                    -d
                } else {
                    d
                }
            }
            Kind::Ellipsoid(s) => {
                let g = norm([p[0] / s[0], p[1] / s[1], p[2] / s[2]]);
                (g - 1.0) * s[0].min(s[1]).min(s[2])
            }
            Kind::TwoBox(a, b) => a.signed_distance(p).min(b.signed_distance(p)),
        }
    }

    /// First intersection parameter of the canonical-frame ray
    /// `origin + t·dir` (dir unit length) with the shape surface, t ≥ 0.
    pub fn ray_hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        let o = self.to_local(origin);
        self.local_ray_hit(o, dir).map(|t| t * self.scale)
    }

    fn local_ray_hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match &self.kind {
            Kind::Box(b) => b.ray_entry(o, d),
            Kind::Cylinder(r, hh) => {
                let mut best: Option<f64> = None;
                // Lateral sheet: quadratic in the xy components.
                let a = d[0] * d[0] + d[1] * d[1];
                let bq = 2.0 * (o[0] * d[0] + o[1] * d[1]);
                let c = o[0] * o[0] + o[1] * o[1] - r * r;
                for t in quadratic_roots(a, bq, c) {
                    if t >= 0.0 && (o[2] + t * d[2]).abs() <= *hh {
                        best = Some(best.map_or(t, |b: f64| b.min(t)));
                    }
                }
                // Caps.
                for zc in [-*hh, *hh] {
                    if d[2].abs() > 1e-15 {
                        let t = (zc - o[2]) / d[2];
                        if t >= 0.0 {
                            let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
                            if x * x + y * y <= r * r {
                                best = Some(best.map_or(t, |b: f64| b.min(t)));
                            }
                        }
                    }
                }
                best
            }
            Kind::Cone(r, hh) => {
                let mut best: Option<f64> = None;
                // Lateral sheet: x² + y² = k²(hh − z)², z ∈ [−hh, hh].
                let k = r / (2.0 * hh);
                let w = hh - o[2];
                let a = d[0] * d[0] + d[1] * d[1] - k * k * d[2] * d[2];
                let bq = 2.0 * (o[0] * d[0] + o[1] * d[1] + k * k * w * d[2]);
                let c = o[0] * o[0] + o[1] * o[1] - k * k * w * w;
                let roots = if a.abs() < 1e-14 {
                    if bq.abs() < 1e-14 {
                        vec![]
                    } else {
                        vec![-c / bq]
                    }
                } else {
                    quadratic_roots(a, bq, c)
                };
                for t in roots {
                    if t >= 0.0 {
                        let z = o[2] + t * d[2];
                        if (-*hh..=*hh).contains(&z) {
                            best = Some(best.map_or(t, |b: f64| b.min(t)));
                        }
                    }
                }
                // Base disc.
                if d[2].abs() > 1e-15 {
                    let t = (-hh - o[2]) / d[2];
                    if t >= 0.0 {
                        let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
                        if x * x + y * y <= r * r {
                            best = Some(best.map_or(t, |b: f64| b.min(t)));
                        }
                    }
                }
                best
            }
            Kind::Ellipsoid(s) => {
                let os = [o[0] / s[0], o[1] / s[1], o[2] / s[2]];
                let ds = [d[0] / s[0], d[1] / s[1], d[2] / s[2]];
                let a = ds[0] * ds[0] + ds[1] * ds[1] + ds[2] * ds[2];
                let b = 2.0 * (os[0] * ds[0] + os[1] * ds[1] + os[2] * ds[2]);
                let c = os[0] * os[0] + os[1] * os[1] + os[2] * os[2] - 1.0;
                quadratic_roots(a, b, c)
                    .into_iter()
                    .filter(|t| *t >= 0.0)
                    .fold(None, |best, t| Some(best.map_or(t, |b: f64| b.min(t))))
            }
            Kind::TwoBox(a, b) => {
                // First entry into either solid is the union surface.
                match (a.ray_entry(o, d), b.ray_entry(o, d)) {
                    (Some(x), Some(y)) => Some(x.min(y)),
                    (x, y) => x.or(y),
                }
            }
        }
    }

}

/// Both real roots of ax² + bx + c, ascending; empty when none.
fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 || a == 0.0 {
        return vec![];
    }
    let sq = disc.sqrt();
    // Citardauq-stable form: compute the larger-magnitude root first.
    let q = -0.5 * (b + b.signum() * sq);
    let (r0, r1) = if q == 0.0 {
        (0.0, 0.0)
    } else {
        (q / a, c / q)
    };
    if r0 <= r1 {
        vec![r0, r1]
    } else {
        vec![r1, r0]
    }
}

fn dist_point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n2: f64 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// sup over the local surface of ‖p + offset‖ — the normalization radius.
/// Exact for polyhedral/convex-extreme shapes (corners, rims, apex);
/// solved by 1D root finding for ellipsoids.
fn bounding_radius(kind: &Kind, offset: [f64; 3]) -> f64 {
    match kind {
        Kind::Box(b) => b.max_corner_norm(offset),
        Kind::Cylinder(r, hh) => {
            // Extreme points are the two rim circles; the farthest rim
            // point aligns the xy component with the offset.
            let dxy = (offset[0] * offset[0] + offset[1] * offset[1]).sqrt();
            let z = hh + offset[2].abs();
            ((r + dxy).powi(2) + z * z).sqrt()
        }
        Kind::Cone(r, hh) => {
            let dxy = (offset[0] * offset[0] + offset[1] * offset[1]).sqrt();
            let apex = (dxy * dxy + (hh + offset[2]).powi(2)).sqrt();
            let rim = ((r + dxy).powi(2) + (offset[2] - hh).powi(2)).sqrt();
            apex.max(rim)
        }
        Kind::Ellipsoid(s) => ellipsoid_max_norm(*s, offset),
        Kind::TwoBox(a, b) => a.max_corner_norm(offset).max(b.max_corner_norm(offset)),
    }
}

/// max ‖p + d‖ over the ellipsoid (p/s)² = 1, via the Lagrange conditions:
/// stationary points satisfy p_i = d_i s_i² / (λ − s_i²). The maximizer
/// with p aligned to d has λ above every pole; axes with d_i = 0
/// contribute extra candidate branches (λ = s_i²).
fn ellipsoid_max_norm(s: [f64; 3], d: [f64; 3]) -> f64 {
    if d.iter().all(|x| *x == 0.0) {
        return s[0].max(s[1]).max(s[2]);
    }
    let constraint = |lam: f64| -> f64 {
        let mut sum = 0.0;
        for i in 0..3 {
            if d[i] != 0.0 {
                let den = lam - s[i] * s[i];
                sum += d[i] * d[i] * s[i] * s[i] / (den * den);
            }
        }
        sum
    };
    let pole = (0..3)
        .filter(|&i| d[i] != 0.0)
        .map(|i| s[i] * s[i])
        .fold(0.0f64, f64::max);
    // Bisect constraint(λ) = 1 on (pole, ∞): strictly decreasing there.
    let mut lo = pole + 1e-15;
    let mut hi = pole + 1.0;
    while constraint(hi) > 1.0 {
        hi *= 2.0;
    }
    while constraint(lo) < 1.0 {
        lo = pole + (lo - pole) / 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if constraint(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lam = 0.5 * (lo + hi);
    let mut p = [0.0; 3];
    for i in 0..3 {
        if d[i] != 0.0 {
            p[i] = d[i] * s[i] * s[i] / (lam - s[i] * s[i]);
        }
    }
    let mut best = norm([p[0] + d[0], p[1] + d[1], p[2] + d[2]]);
    // Branches for zero-offset axes: the maximizer may leave the d-plane
    // when that axis is long (λ = s_i²).
    for i in 0..3 {
        if d[i] != 0.0 {
            continue;
        }
        let li = s[i] * s[i];
        let mut q = [0.0; 3];
        let mut ok = true;
        let mut rem = 1.0;
        for j in 0..3 {
            if j == i || d[j] == 0.0 {
                continue;
            }
            let den = li - s[j] * s[j];
            if den.abs() < 1e-12 {
                ok = false;
                break;
            }
            q[j] = d[j] * s[j] * s[j] / den;
            rem -= (q[j] / s[j]).powi(2);
        }
        if ok && rem >= 0.0 {
            q[i] = s[i] * rem.sqrt();
            best = best.max(norm([q[0] + d[0], q[1] + d[1], q[2] + d[2]]));
        }
    }
    best
}
