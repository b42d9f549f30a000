//! Oracle and property tests for primitives, renderer, and dataset I/O.
//!
//! Bitwise render assertions use fixed seeds on purpose: the renderer's
//! angle snap and the final f32 cast make equality exact for any pose
//! whose snapped decisions don't sit on a rounding boundary; fixed seeds
//! freeze those decisions so the properties are reproducible.

use super::dataset::{build_split, DATASET_VERSION};
use super::*;
use crate::error::Error;
use crate::posemath::{augment_flip, augment_rotate, pose_error_deg, EulerPose};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{FRAC_PI_2, PI};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_pose(rng: &mut ChaCha8Rng) -> EulerPose {
    EulerPose::new(
        rng.random_range(-PI..PI),
        rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
        rng.random_range(-PI..PI),
    )
}

fn bits(img: &[f32]) -> Vec<u32> {
    img.iter().map(|p| p.to_bits()).collect()
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / a.len() as f64
}

#[test]
fn unit_box_points_touch_their_half_extents() {
    let spec = ShapeSpec::new(Category::Box, vec![0.5, 0.5, 0.5, 0.0, 0.0], 1).unwrap();
    let geom = Geometry::from_spec(&spec).unwrap();
    let mut r = rng(11);
    for _ in 0..2000 {
        let p = geom.sample_surface_local(&mut r);
        let m = p[0].abs().max(p[1].abs()).max(p[2].abs());
        assert!((m - 0.5).abs() < 1e-9, "point {p:?} not on a face");
    }
}

#[test]
fn cylinder_points_lie_on_lateral_sheet_or_caps() {
    let spec = ShapeSpec::new(Category::Cylinder, vec![0.3, 1.0, 0.0, 0.0], 2).unwrap();
    let geom = Geometry::from_spec(&spec).unwrap();
    let mut r = rng(12);
    for _ in 0..2000 {
        let p = geom.sample_surface_local(&mut r);
        let radial = (p[0] * p[0] + p[1] * p[1]).sqrt();
        let on_sheet = (radial - 0.3).abs() < 1e-6;
        let on_cap = (p[2].abs() - 0.5).abs() < 1e-6 && radial <= 0.3 + 1e-9;
        assert!(on_sheet || on_cap, "point {p:?} off the cylinder surface");
    }
}

#[test]
fn point_clouds_are_canonical_and_on_surface() {
    for (i, cat) in Category::ALL.into_iter().enumerate() {
        let spec = ShapeSpec::sample(cat, 100 + i as u64);
        let geom = Geometry::from_spec(&spec).unwrap();
        let cloud = sample_point_cloud(&spec, 512).unwrap();
        assert_eq!(cloud.len(), 3 * 512);
        for p in cloud.chunks_exact(3) {
            let p = [p[0], p[1], p[2]];
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!(n <= 1.0, "{}: point outside the unit sphere: {n}", cat.name());
            let d = geom.surface_distance(p).abs();
            assert!(d < 1e-6, "{}: surface residual {d} at {p:?}", cat.name());
        }
    }
}

#[test]
fn point_clouds_are_deterministic() {
    let spec = ShapeSpec::sample(Category::Lshape, 7);
    let a = sample_point_cloud(&spec, 64).unwrap();
    let b = sample_point_cloud(&spec, 64).unwrap();
    let to_bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(to_bits(&a), to_bits(&b));
}

#[test]
fn point_cloud_size_below_minimum_is_rejected() {
    let spec = ShapeSpec::sample(Category::Box, 3);
    assert!(matches!(
        sample_point_cloud(&spec, 7),
        Err(Error::Config(_))
    ));
}

#[test]
fn invalid_size_params_are_rejected() {
    assert!(matches!(
        ShapeSpec::new(Category::Box, vec![0.5, 0.5, 0.5], 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        ShapeSpec::new(Category::Box, vec![0.5, -0.1, 0.5, 0.0, 0.0], 0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        ShapeSpec::new(Category::Cylinder, vec![0.3, 1.0, 0.9, 0.0], 0),
        Err(Error::Config(_))
    ));
    // Geometry construction re-validates hand-built specs.
    let mut spec = ShapeSpec::sample(Category::Cone, 0);
    spec.size_params[0] = f64::NAN;
    assert!(matches!(Geometry::from_spec(&spec), Err(Error::Config(_))));
}

#[test]
fn bounding_radius_is_a_tight_upper_bound() {
    for (i, cat) in Category::ALL.into_iter().enumerate() {
        let spec = ShapeSpec::sample(cat, 500 + i as u64);
        let geom = Geometry::from_spec(&spec).unwrap();
        let mut r = rng(600 + i as u64);
        let mut max_norm: f64 = 0.0;
        for _ in 0..30_000 {
            let p = geom.sample_surface(&mut r);
            max_norm = max_norm.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
        }
        assert!(max_norm <= 1.0, "{}: normalization violated", cat.name());
        assert!(
            max_norm > 1.0 - 0.03,
            "{}: normalization loose (max sampled norm {max_norm})",
            cat.name()
        );
    }
}

#[test]
fn ellipsoid_bounding_radius_matches_scan_oracle() {
    // Offset sphere: radius + offset norm in closed form.
    let sphere = ShapeSpec::new(Category::Ellipsoid, vec![0.5, 0.5, 0.5, 0.2, 0.1], 0).unwrap();
    let geom = Geometry::from_spec(&sphere).unwrap();
    let expect = 0.5 + (0.2f64 * 0.2 + 0.1 * 0.1).sqrt();
    assert!((geom.local_bounding_radius() - expect).abs() < 1e-9);

    // Offset along the long axis: endpoint wins.
    let prolate = ShapeSpec::new(Category::Ellipsoid, vec![0.2, 0.6, 0.2, 0.3, 0.0], 0).unwrap();
    let geom = Geometry::from_spec(&prolate).unwrap();
    assert!((geom.local_bounding_radius() - 0.9).abs() < 1e-9);

    // Small offset along a short axis: the farthest point leaves the
    // offset axis entirely. Oracle: dense scan of the x = 0 ellipse.
    let s = [0.2, 0.6, 0.2];
    let d = [0.0, 0.0, 0.05];
    let tilted =
        ShapeSpec::new(Category::Ellipsoid, vec![s[0], s[1], s[2], d[1], d[2]], 0).unwrap();
    let geom = Geometry::from_spec(&tilted).unwrap();
    let mut best: f64 = 0.0;
    for i in 0..1_000_000 {
        let t = i as f64 / 1_000_000.0 * std::f64::consts::TAU;
        let y = s[1] * t.cos();
        let z = s[2] * t.sin() + d[2];
        best = best.max((y * y + z * z).sqrt());
    }
    assert!(
        (geom.local_bounding_radius() - best).abs() < 1e-6,
        "bisection {} vs scan {best}",
        geom.local_bounding_radius()
    );
}

#[test]
fn sphere_renders_identically_under_any_pose() {
    let spec = ShapeSpec::new(Category::Ellipsoid, vec![0.5, 0.5, 0.5, 0.0, 0.0], 0).unwrap();
    let geom = Geometry::from_spec(&spec).unwrap();
    let reference = render_clean(&geom, &EulerPose::new(0.0, 0.0, 0.0), 32).unwrap();
    assert!(reference.iter().any(|p| *p > 0.0));
    let mut r = rng(21);
    for _ in 0..8 {
        let pose = random_pose(&mut r);
        let img = render_clean(&geom, &pose, 32).unwrap();
        assert_eq!(bits(&img), bits(&reference), "pose {:?}", pose.angles());
    }
}

#[test]
fn quarter_turn_pose_rotation_is_a_bitwise_pixel_rotation() {
    let mut r = rng(22);
    for (i, cat) in Category::ALL.into_iter().enumerate() {
        let spec = ShapeSpec::sample(cat, 700 + i as u64);
        let geom = Geometry::from_spec(&spec).unwrap();
        for _ in 0..4 {
            let pose = random_pose(&mut r);
            let img = render_clean(&geom, &pose, 32).unwrap();
            let rotated_pose = augment_rotate(&pose, FRAC_PI_2);
            let img_rot = render_clean(&geom, &rotated_pose, 32).unwrap();
            assert_eq!(
                bits(&img_rot),
                bits(&rot90_ccw(&img, 32)),
                "{} pose {:?}",
                cat.name(),
                pose.angles()
            );
            // The image-space oracle agrees exactly at quarter turns.
            assert_eq!(bits(&img_rot), bits(&nn_rotate(&img, 32, FRAC_PI_2)));
        }
    }
}

#[test]
fn nn_rotate_quarter_turns_equal_exact_permutations() {
    let mut r = rng(23);
    let img: Vec<f32> = (0..16 * 16).map(|_| r.random_range(0.0..1.0)).collect();
    assert_eq!(bits(&nn_rotate(&img, 16, 0.0)), bits(&img));
    assert_eq!(bits(&nn_rotate(&img, 16, FRAC_PI_2)), bits(&rot90_ccw(&img, 16)));
    assert_eq!(
        bits(&nn_rotate(&img, 16, PI)),
        bits(&rot90_pow(&img, 16, 2))
    );
    assert_eq!(
        bits(&nn_rotate(&img, 16, -FRAC_PI_2)),
        bits(&rot90_pow(&img, 16, 3))
    );
    // Four quarter turns restore the image.
    assert_eq!(bits(&rot90_pow(&img, 16, 4)), bits(&img));
}

#[test]
fn flip_rule_mirrors_renders_of_x_symmetric_shapes() {
    let mut r = rng(24);
    for (i, cat) in Category::ALL.into_iter().enumerate() {
        if !cat.mirror_symmetric() {
            continue;
        }
        let spec = ShapeSpec::sample(cat, 800 + i as u64);
        let geom = Geometry::from_spec(&spec).unwrap();
        for _ in 0..5 {
            let pose = random_pose(&mut r);
            let flipped = render_clean(&geom, &augment_flip(&pose), 32).unwrap();
            let mirrored = mirror_image(&render_clean(&geom, &pose, 32).unwrap(), 32);
            let diff = mean_abs_diff(&flipped, &mirrored);
            assert!(
                diff <= 0.02,
                "{}: flip/mirror mean abs diff {diff} at pose {:?}",
                cat.name(),
                pose.angles()
            );
        }
    }
}

#[test]
fn flip_rule_fails_for_the_x_asymmetric_category() {
    // Negative control: lshape's foot breaks the mirror symmetry the flip
    // label rule needs, so the identity must not hold there.
    let spec = ShapeSpec::sample(Category::Lshape, 801);
    let geom = Geometry::from_spec(&spec).unwrap();
    let pose = EulerPose::new(0.4, 0.2, 0.3);
    let flipped = render_clean(&geom, &augment_flip(&pose), 32).unwrap();
    let mirrored = mirror_image(&render_clean(&geom, &pose, 32).unwrap(), 32);
    assert!(mean_abs_diff(&flipped, &mirrored) > 0.02);
}

#[test]
fn renders_are_bounded_with_nonempty_foreground() {
    let mut r = rng(25);
    for (i, cat) in Category::ALL.into_iter().enumerate() {
        let spec = ShapeSpec::sample(cat, 900 + i as u64);
        let geom = Geometry::from_spec(&spec).unwrap();
        let pose = random_pose(&mut r);
        let img = render_clean(&geom, &pose, 32).unwrap();
        let foreground = img.iter().filter(|p| **p > 0.0).count();
        assert!(foreground > 0, "{}: empty render", cat.name());
        for p in &img {
            assert!(
                *p == 0.0 || (0.0999..=1.0).contains(&(*p as f64)),
                "{}: pixel {p} outside the depth-value range",
                cat.name()
            );
        }
    }
}

#[test]
fn render_rejects_tiny_resolutions() {
    let spec = ShapeSpec::sample(Category::Box, 1);
    let geom = Geometry::from_spec(&spec).unwrap();
    let pose = EulerPose::new(0.0, 0.0, 0.0);
    assert!(matches!(
        render_clean(&geom, &pose, 7),
        Err(Error::Config(_))
    ));
    assert!(render_clean(&geom, &pose, 8).is_ok());
}

#[test]
fn noise_is_deterministic_seeded_and_clamped() {
    let spec = ShapeSpec::sample(Category::Cone, 31);
    let geom = Geometry::from_spec(&spec).unwrap();
    let pose = EulerPose::new(0.5, -0.3, 1.0);
    let clean = render_clean(&geom, &pose, 16).unwrap();
    let a = apply_noise(&clean, 0.05, 77).unwrap();
    let b = apply_noise(&clean, 0.05, 77).unwrap();
    let c = apply_noise(&clean, 0.05, 78).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
    assert!(a.iter().all(|p| (0.0..=1.0).contains(&(*p as f64))));
    assert_eq!(bits(&apply_noise(&clean, 0.0, 77).unwrap()), bits(&clean));
    assert!(matches!(
        apply_noise(&clean, -0.1, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn box_pose_is_recoverable_by_nearest_render() {
    // Pose identifiability: with the canonical offset in place, no two
    // well-separated poses of a box produce the same image, so a
    // coarse-to-fine nearest-render search must land within 15°.
    let spec = ShapeSpec::new(Category::Box, vec![0.38, 0.65, 0.22, 0.2, 0.15], 40).unwrap();
    let geom = Geometry::from_spec(&spec).unwrap();
    let res = 32;

    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum()
    };

    // Coarse pose grid, 15° pitch.
    let step = PI / 12.0;
    let mut grid = Vec::new();
    for ia in 0..24 {
        for ib in 0..=12 {
            for ig in 0..24 {
                let pose = EulerPose::new(
                    -PI + ia as f64 * step,
                    -FRAC_PI_2 + ib as f64 * step,
                    -PI + ig as f64 * step,
                );
                let img = render_clean(&geom, &pose, res).unwrap();
                grid.push((pose, img));
            }
        }
    }

    let mut r = rng(41);
    let queries = 40;
    let mut hits = 0;
    for _ in 0..queries {
        let truth = random_pose(&mut r);
        let target = render_clean(&geom, &truth, res).unwrap();
        let coarse = grid
            .iter()
            .min_by(|x, y| {
                dist(&x.1, &target)
                    .partial_cmp(&dist(&y.1, &target))
                    .unwrap()
            })
            .unwrap()
            .0
            .clone();
        // Local refinement, 3° pitch around the coarse winner.
        let fine_step = PI / 60.0;
        let mut best = (f64::INFINITY, coarse.clone());
        for da in -4..=4 {
            for db in -4..=4 {
                for dg in -4..=4 {
                    let cand = EulerPose::new(
                        coarse.alpha() + da as f64 * fine_step,
                        (coarse.beta() + db as f64 * fine_step).clamp(-FRAC_PI_2, FRAC_PI_2),
                        coarse.gamma() + dg as f64 * fine_step,
                    );
                    let img = render_clean(&geom, &cand, res).unwrap();
                    let d = dist(&img, &target);
                    if d < best.0 {
                        best = (d, cand);
                    }
                }
            }
        }
        if pose_error_deg(&best.1, &truth) < 15.0 {
            hits += 1;
        }
    }
    assert!(
        hits as f64 >= 0.95 * queries as f64,
        "only {hits}/{queries} poses recovered within 15°"
    );
}

fn tiny_config() -> GenerateConfig {
    GenerateConfig {
        resolution: 8,
        n_points: 8,
        noise_sigma: 0.05,
        per_category_train: 8,
        per_category_val: 2,
        categories: Category::ALL.to_vec(),
        split: SplitSpec::FullySupervised,
        master_seed: 99,
    }
}

#[test]
fn default_benchmark_split_counts() {
    let config = GenerateConfig::default();
    assert_eq!(config.total_samples(), 3000);
    let split = build_split(&config);
    assert_eq!(split.train.len(), 2400);
    assert_eq!(split.val.len(), 600);
}

#[test]
fn split_modes_shape_the_training_pool() {
    let mut config = tiny_config();
    config.per_category_train = 12;
    let unseen = vec![Category::Ellipsoid, Category::Tshape];

    config.split = SplitSpec::ZeroShot {
        unseen: unseen.clone(),
    };
    let split = build_split(&config);
    assert_eq!(split.train.len(), 4 * 12);
    assert_eq!(split.val.len(), 6 * 2);
    for idx in &split.train {
        let cat = super::dataset::category_at(&config, *idx as usize);
        assert!(!unseen.contains(&cat), "unseen category leaked into train");
    }

    config.split = SplitSpec::FewShot {
        unseen: unseen.clone(),
        k: 10,
    };
    let split = build_split(&config);
    for u in &unseen {
        let count = split
            .train
            .iter()
            .filter(|i| super::dataset::category_at(&config, **i as usize) == *u)
            .count();
        assert_eq!(count, 10, "few-shot must keep exactly k samples of {}", u.name());
    }
    assert_eq!(split.train.len(), 4 * 12 + 2 * 10);

    // Train and val never overlap and stay in range.
    let total = config.total_samples() as u32;
    for t in &split.train {
        assert!(!split.val.contains(t));
        assert!(*t < total);
    }

    config.split = SplitSpec::FewShot {
        unseen,
        k: 13,
    };
    assert!(matches!(config.validate(), Err(Error::Config(_))));
}

#[test]
fn dataset_generation_is_deterministic_and_rerenderable() {
    let config = tiny_config();
    let d1 = generate_dataset(&config).unwrap();
    let d2 = generate_dataset(&config).unwrap();
    assert_eq!(d1.manifest.blob_crc32, d2.manifest.blob_crc32);
    assert_eq!(d1.manifest.config_sha256, d2.manifest.config_sha256);
    assert_eq!(d1.samples.len(), 60);

    // Any stored sample is reproducible from the config alone.
    for index in [0usize, 13, 37, 59] {
        let spec = shape_spec_at(&config, index);
        let geom = Geometry::from_spec(&spec).unwrap();
        let pose = pose_at(&config, index);
        let image = render_noisy(
            &geom,
            &pose,
            config.resolution,
            config.noise_sigma,
            noise_seed_at(&config, index),
        )
        .unwrap();
        assert_eq!(bits(&image), bits(&d1.samples[index].image));
        let cloud: Vec<f32> = sample_point_cloud(&spec, config.n_points)
            .unwrap()
            .into_iter()
            .map(|v| v as f32)
            .collect();
        assert_eq!(bits(&cloud), bits(&d1.samples[index].cloud));
        assert_eq!(spec.category.id(), d1.samples[index].category_id);
        assert_eq!(pose.angles(), d1.samples[index].pose.angles());
    }
}

#[test]
fn dataset_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let original = generate_dataset(&config).unwrap();
    write_dataset(dir.path(), &original).unwrap();
    let loaded = read_dataset(dir.path()).unwrap();
    assert_eq!(loaded.manifest, original.manifest);
    assert_eq!(loaded.samples.len(), original.samples.len());
    for (a, b) in loaded.samples.iter().zip(&original.samples) {
        assert_eq!(bits(&a.image), bits(&b.image));
        assert_eq!(bits(&a.cloud), bits(&b.cloud));
        assert_eq!(a.pose.angles(), b.pose.angles());
        assert_eq!(a.category_id, b.category_id);
    }
    // Re-writing produces byte-identical files.
    let bytes1 = std::fs::read(dir.path().join("samples.bin")).unwrap();
    let manifest1 = std::fs::read(dir.path().join("manifest.json")).unwrap();
    write_dataset(dir.path(), &loaded).unwrap();
    assert_eq!(bytes1, std::fs::read(dir.path().join("samples.bin")).unwrap());
    assert_eq!(
        manifest1,
        std::fs::read(dir.path().join("manifest.json")).unwrap()
    );
}

#[test]
fn dataset_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let dataset = generate_dataset(&config).unwrap();
    write_dataset(dir.path(), &dataset).unwrap();
    let samples_path = dir.path().join("samples.bin");
    let manifest_path = dir.path().join("manifest.json");
    let good_samples = std::fs::read(&samples_path).unwrap();
    let good_manifest = std::fs::read(&manifest_path).unwrap();

    // Corrupted magic.
    let mut bad = good_samples.clone();
    bad[0] ^= 0xff;
    std::fs::write(&samples_path, &bad).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));

    // Flipped payload byte: checksum mismatch.
    let mut bad = good_samples.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0x01;
    std::fs::write(&samples_path, &bad).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));

    // Truncated blob.
    std::fs::write(&samples_path, &good_samples[..good_samples.len() - 10]).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    std::fs::write(&samples_path, &good_samples).unwrap();

    // Unsupported version.
    let text = String::from_utf8(good_manifest.clone()).unwrap();
    let bumped = text.replace(
        &format!("\"version\": {DATASET_VERSION}"),
        "\"version\": 99",
    );
    assert_ne!(text, bumped);
    std::fs::write(&manifest_path, bumped).unwrap();
    assert!(matches!(
        read_dataset(dir.path()),
        Err(Error::Incompatible(_))
    ));

    // Malformed manifest JSON.
    std::fs::write(&manifest_path, &good_manifest[..good_manifest.len() / 2]).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
    std::fs::write(&manifest_path, &good_manifest).unwrap();

    // Absent directory.
    assert!(matches!(
        read_dataset(&dir.path().join("nope")),
        Err(Error::Io(_))
    ));

    // Intact again after restoring everything.
    assert!(read_dataset(dir.path()).is_ok());
}

#[test]
fn generate_config_validation_rejects_bad_fields() {
    let mut c = tiny_config();
    c.resolution = 7;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny_config();
    c.n_points = 7;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny_config();
    c.noise_sigma = -0.5;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny_config();
    c.categories = vec![Category::Box, Category::Box];
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny_config();
    c.split = SplitSpec::ZeroShot {
        unseen: Category::ALL.to_vec(),
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny_config();
    c.categories = vec![Category::Box, Category::Cone];
    c.split = SplitSpec::ZeroShot {
        unseen: vec![Category::Tshape],
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
}
