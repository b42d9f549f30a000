use super::*;
use crate::diffmath::{grad_check, Tape, Tensor};
use crate::models::HeadOutputs;
use crate::posemath::{AngleBinSpec, PoseTarget};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Heads whose logits are all equal (uniform distributions) and whose
/// offsets at the ground-truth bin differ from the target by `off_err`.
fn uniform_heads(
    tape: &mut Tape,
    targets: &[PoseTarget],
    bins: &AngleBinSpec,
    off_err: f64,
) -> HeadOutputs {
    let b = targets.len();
    let mut logits = Vec::new();
    let mut offsets = Vec::new();
    for k in 0..3 {
        let n = bins.bin_count(k);
        logits.push(
            tape.constant(Tensor::zeros(vec![b, n])).unwrap(),
        );
        let (lo, _) = bins.range(k);
        let mut off = vec![0.0; b * n];
        for (i, t) in targets.iter().enumerate() {
            let col = (t.bins[k] - lo) as usize;
            off[i * n + col] = t.offsets[k] + off_err;
        }
        offsets.push(tape.constant(Tensor::new(vec![b, n], off).unwrap()).unwrap());
    }
    HeadOutputs {
        logits: [logits[0], logits[1], logits[2]],
        offsets: [offsets[0], offsets[1], offsets[2]],
    }
}

fn sample_targets(rng: &mut ChaCha8Rng, bins: &AngleBinSpec, b: usize) -> Vec<PoseTarget> {
    (0..b)
        .map(|_| {
            let mut t = PoseTarget {
                bins: [0; 3],
                offsets: [0.0; 3],
            };
            for k in 0..3 {
                let (lo, hi) = bins.range(k);
                t.bins[k] = rng.random_range(lo..hi);
                t.offsets[k] = rng.random_range(0.0..0.999);
            }
            t
        })
        .collect()
}

#[test]
fn uniform_logits_give_log_bin_count_cross_entropy() {
    let bins = AngleBinSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let targets = sample_targets(&mut rng, &bins, 6);
    let mut tape = Tape::new();
    let heads = uniform_heads(&mut tape, &targets, &bins, 0.0);
    let loss = pose_loss(&mut tape, &heads, &targets, &bins).unwrap();
    let expected = 2.0 * (24f64).ln() + (12f64).ln();
    assert!(
        (tape.value_scalar(loss) - expected).abs() < 1e-12,
        "got {}, expected {expected}",
        tape.value_scalar(loss)
    );
}

#[test]
fn small_offset_error_adds_half_square_per_angle() {
    let bins = AngleBinSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let targets = sample_targets(&mut rng, &bins, 5);
    // Keep target+error inside the offset range so the constructed heads
    // stay meaningful.
    let targets: Vec<PoseTarget> = targets
        .into_iter()
        .map(|mut t| {
            t.offsets = [0.3, 0.4, 0.5];
            t
        })
        .collect();
    let mut tape = Tape::new();
    let heads = uniform_heads(&mut tape, &targets, &bins, 0.2);
    let loss = pose_loss(&mut tape, &heads, &targets, &bins).unwrap();
    let expected = 2.0 * (24f64).ln() + (12f64).ln() + 3.0 * 0.5 * 0.2 * 0.2;
    assert!(
        (tape.value_scalar(loss) - expected).abs() < 1e-12,
        "got {}, expected {expected}",
        tape.value_scalar(loss)
    );
}

#[test]
fn pose_loss_decreases_as_the_correct_logit_grows() {
    let bins = AngleBinSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let targets = sample_targets(&mut rng, &bins, 4);
    let mut prev = f64::INFINITY;
    for boost in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let mut tape = Tape::new();
        let b = targets.len();
        let mut logits = Vec::new();
        let mut offsets = Vec::new();
        for k in 0..3 {
            let n = bins.bin_count(k);
            let (lo, _) = bins.range(k);
            let mut data = vec![0.0; b * n];
            for (i, t) in targets.iter().enumerate() {
                data[i * n + (t.bins[k] - lo) as usize] = boost;
            }
            logits.push(tape.constant(Tensor::new(vec![b, n], data).unwrap()).unwrap());
            offsets.push(tape.constant(Tensor::zeros(vec![b, n])).unwrap());
        }
        let heads = HeadOutputs {
            logits: [logits[0], logits[1], logits[2]],
            offsets: [offsets[0], offsets[1], offsets[2]],
        };
        let loss = pose_loss(&mut tape, &heads, &targets, &bins).unwrap();
        let v = tape.value_scalar(loss);
        assert!(v < prev, "loss {v} did not decrease from {prev} at boost {boost}");
        prev = v;
    }
}

#[test]
fn pose_loss_rejects_bad_shapes_and_empty_batches() {
    let bins = AngleBinSpec::default();
    let mut tape = Tape::new();
    let heads = uniform_heads(
        &mut tape,
        &[PoseTarget {
            bins: [0; 3],
            offsets: [0.0; 3],
        }],
        &bins,
        0.0,
    );
    let err = pose_loss(&mut tape, &heads, &[], &bins).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)));

    // Two targets against a batch-of-one head.
    let two = vec![
        PoseTarget {
            bins: [0; 3],
            offsets: [0.0; 3],
        };
        2
    ];
    let err = pose_loss(&mut tape, &heads, &two, &bins).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
}

#[test]
fn identical_rows_make_infonce_log_batch_size() {
    let mut tape = Tape::new();
    let b = 8;
    let z_row = [0.3, -1.2, 0.7, 2.0];
    let h_row = [1.0, 0.5, -0.25, 0.1];
    let z = tape
        .constant(Tensor::new(vec![b, 4], z_row.repeat(b)).unwrap())
        .unwrap();
    let h = tape
        .constant(Tensor::new(vec![b, 4], h_row.repeat(b)).unwrap())
        .unwrap();
    let loss = infonce(&mut tape, z, h, 0.1).unwrap();
    assert!(
        (tape.value_scalar(loss) - (b as f64).ln()).abs() < 1e-12,
        "got {}, expected ln {b}",
        tape.value_scalar(loss)
    );
}

#[test]
fn orthonormal_alignment_reaches_the_contrastive_floor() {
    // z = h = standard basis rows: positives at similarity 1, negatives at
    // 0, so each row's loss is exactly ln(1 + (B−1)·exp(−1/τ)).
    let mut tape = Tape::new();
    let b = 4;
    let mut eye = vec![0.0; b * b];
    for i in 0..b {
        eye[i * b + i] = 1.0;
    }
    let z = tape
        .constant(Tensor::new(vec![b, b], eye.clone()).unwrap())
        .unwrap();
    let h = tape.constant(Tensor::new(vec![b, b], eye).unwrap()).unwrap();
    let loss = infonce(&mut tape, z, h, 0.1).unwrap();
    let expected = (3.0 * (-10.0f64).exp()).ln_1p();
    assert!(
        (tape.value_scalar(loss) - expected).abs() < 1e-12,
        "got {}, expected {expected}",
        tape.value_scalar(loss)
    );
}

#[test]
fn infonce_is_scale_invariant_in_both_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let zt = rand_tensor(&mut rng, vec![5, 7], -1.0, 1.0);
    let ht = rand_tensor(&mut rng, vec![5, 7], -1.0, 1.0);
    let base = {
        let mut tape = Tape::new();
        let z = tape.constant(zt.clone()).unwrap();
        let h = tape.constant(ht.clone()).unwrap();
        let l = infonce(&mut tape, z, h, 0.1).unwrap();
        tape.value_scalar(l)
    };
    for (sz, sh) in [(3.7, 1.0), (1.0, 0.25), (0.01, 40.0)] {
        let mut tape = Tape::new();
        let z = tape
            .constant(Tensor::new(
                vec![5, 7],
                zt.data().iter().map(|v| v * sz).collect(),
            ).unwrap())
            .unwrap();
        let h = tape
            .constant(Tensor::new(
                vec![5, 7],
                ht.data().iter().map(|v| v * sh).collect(),
            ).unwrap())
            .unwrap();
        let l = infonce(&mut tape, z, h, 0.1).unwrap();
        assert!(
            (tape.value_scalar(l) - base).abs() < 1e-9,
            "scaling ({sz}, {sh}) moved the loss: {} vs {base}",
            tape.value_scalar(l)
        );
    }
}

#[test]
fn infonce_stays_below_the_alignment_bound() {
    // Per row: loss_i ≤ ln B + (1 − s_ii)/τ, where s_ii is the positive
    // cosine similarity, computed here independently in plain arithmetic.
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..20 {
        let b = 2 + (trial % 5);
        let d = 3 + (trial % 4);
        let zt = rand_tensor(&mut rng, vec![b, d], -2.0, 2.0);
        let ht = rand_tensor(&mut rng, vec![b, d], -2.0, 2.0);
        let tau = 0.1 + 0.3 * (trial as f64 / 20.0);
        let mut diag_min = f64::INFINITY;
        for i in 0..b {
            let zr = &zt.data()[i * d..(i + 1) * d];
            let hr = &ht.data()[i * d..(i + 1) * d];
            let dot: f64 = zr.iter().zip(hr).map(|(a, b)| a * b).sum();
            let nz: f64 = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nh: f64 = hr.iter().map(|v| v * v).sum::<f64>().sqrt();
            diag_min = diag_min.min(dot / (nz * nh));
        }
        let mut tape = Tape::new();
        let z = tape.constant(zt).unwrap();
        let h = tape.constant(ht).unwrap();
        let l = infonce(&mut tape, z, h, tau).unwrap();
        let bound = (b as f64).ln() + (1.0 - diag_min) / tau;
        assert!(
            tape.value_scalar(l) <= bound + 1e-12,
            "loss {} exceeds bound {bound} (trial {trial})",
            tape.value_scalar(l)
        );
        assert!(tape.value_scalar(l) >= 0.0 - 1e-12);
    }
}

#[test]
fn contrastive_batches_of_one_are_rejected() {
    let mut tape = Tape::new();
    let z = tape
        .constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap())
        .unwrap();
    let h = tape
        .constant(Tensor::new(vec![1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap())
        .unwrap();
    assert!(matches!(
        infonce(&mut tape, z, h, 0.1).unwrap_err(),
        Error::Invalid(_)
    ));
    let z2 = tape
        .constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let h3 = tape
        .constant(Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap())
        .unwrap();
    assert!(matches!(
        infonce(&mut tape, z2, h3, 0.1).unwrap_err(),
        Error::Shape { .. }
    ));
    assert!(matches!(
        infonce(&mut tape, z2, z2, 0.0).unwrap_err(),
        Error::Config(_)
    ));
}

#[test]
fn kl_matches_a_hand_computed_binary_case() {
    // softmax(0, 0) = (1/2, 1/2); softmax(ln 9, 0) = (9/10, 1/10).
    // KL = ½ ln(½ / 9⁄10) + ½ ln(½ / 1⁄10) = ln(5/3).
    let mut tape = Tape::new();
    let p = tape
        .constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap())
        .unwrap();
    let q = tape
        .constant(Tensor::new(vec![2, 2], vec![9f64.ln(), 0.0, 9f64.ln(), 0.0]).unwrap())
        .unwrap();
    let kl = kl_softmax(&mut tape, p, q).unwrap();
    let expected = (5.0f64 / 3.0).ln();
    assert!(
        (tape.value_scalar(kl) - expected).abs() < 1e-9,
        "got {}, expected {expected}",
        tape.value_scalar(kl)
    );
}

#[test]
fn kl_is_nonnegative_and_vanishes_only_at_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let pt = rand_tensor(&mut rng, vec![4, 6], -3.0, 3.0);
        let mut qd = pt.data().to_vec();
        let idx = rng.random_range(0..qd.len());
        qd[idx] += 0.5;
        let qt = Tensor::new(vec![4, 6], qd).unwrap();

        let mut tape = Tape::new();
        let p = tape.constant(pt.clone()).unwrap();
        let p2 = tape.constant(pt.clone()).unwrap();
        let q = tape.constant(qt).unwrap();

        let self_kl = kl_softmax(&mut tape, p, p2).unwrap();
        assert!(
            tape.value_scalar(self_kl).abs() <= 1e-9,
            "KL(p‖p) = {}",
            tape.value_scalar(self_kl)
        );
        let cross = kl_softmax(&mut tape, p, q).unwrap();
        assert!(
            tape.value_scalar(cross) > 1e-9,
            "KL(p‖q) = {} for perturbed q",
            tape.value_scalar(cross)
        );
    }
}

#[test]
fn confident_teacher_output_kl_is_log_bin_count() {
    // Head 0: teacher certain of bin 7, student uniform → KL ≈ ln 24.
    // Heads 1 and 2: identical logits → KL exactly 0.
    let mut tape = Tape::new();
    let b = 3;
    let mut peaked = vec![0.0; b * 24];
    for i in 0..b {
        peaked[i * 24 + 7] = 50.0;
    }
    let t0 = tape.constant(Tensor::new(vec![b, 24], peaked).unwrap()).unwrap();
    let s0 = tape.constant(Tensor::zeros(vec![b, 24])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let shared1 = tape.constant(rand_tensor(&mut rng, vec![b, 12], -1.0, 1.0)).unwrap();
    let shared2 = tape.constant(rand_tensor(&mut rng, vec![b, 24], -1.0, 1.0)).unwrap();
    let kl = kl_output(&mut tape, &[t0, shared1, shared2], &[s0, shared1, shared2]).unwrap();
    assert!(
        (tape.value_scalar(kl) - (24f64).ln()).abs() < 1e-9,
        "got {}, expected ln 24",
        tape.value_scalar(kl)
    );
}

#[test]
fn composite_totals_equal_weighted_component_sums() {
    let bins = AngleBinSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let b = 5;
    let targets = sample_targets(&mut rng, &bins, b);
    let weights = LossWeights::default();

    let mut tape = Tape::new();
    let mut logits = Vec::new();
    let mut offsets = Vec::new();
    let mut t_logits = Vec::new();
    for k in 0..3 {
        let n = bins.bin_count(k);
        logits.push(tape.constant(rand_tensor(&mut rng, vec![b, n], -1.0, 1.0)).unwrap());
        offsets.push(tape.constant(rand_tensor(&mut rng, vec![b, n], 0.0, 1.0)).unwrap());
        t_logits.push(tape.constant(rand_tensor(&mut rng, vec![b, n], -1.0, 1.0)).unwrap());
    }
    let heads = HeadOutputs {
        logits: [logits[0], logits[1], logits[2]],
        offsets: [offsets[0], offsets[1], offsets[2]],
    };
    let z_s = tape.constant(rand_tensor(&mut rng, vec![b, 16], -1.0, 1.0)).unwrap();
    let z_t = tape.constant(rand_tensor(&mut rng, vec![b, 16], -1.0, 1.0)).unwrap();
    let h_t = tape.constant(rand_tensor(&mut rng, vec![b, 6], -1.0, 1.0)).unwrap();
    let teacher = TeacherRefs {
        z: Some(z_t),
        h: Some(h_t),
        logits: Some([t_logits[0], t_logits[1], t_logits[2]]),
    };
    let bundle = student_loss(
        &mut tape,
        &heads,
        z_s,
        &targets,
        &bins,
        &weights,
        EmbedGuidance::Kl,
        &teacher,
    )
    .unwrap();
    assert_eq!(bundle.components.len(), 3);
    let sum: f64 = bundle.components.iter().map(|(_, v, w)| v * w).sum();
    assert!(
        (bundle.total_value(&tape) - sum).abs() < 1e-12,
        "total {} vs weighted sum {sum}",
        bundle.total_value(&tape)
    );

    let t_bundle = teacher_loss(&mut tape, &heads, z_s, h_t, &targets, &bins, &weights);
    // h_t has dim 6 but z_s has 16: shape error is the correct outcome here.
    assert!(t_bundle.is_err());
    let z_th = tape.constant(rand_tensor(&mut rng, vec![b, 6], -1.0, 1.0)).unwrap();
    let t_bundle =
        teacher_loss(&mut tape, &heads, z_th, h_t, &targets, &bins, &weights).unwrap();
    assert_eq!(t_bundle.components.len(), 2);
    let sum: f64 = t_bundle.components.iter().map(|(_, v, w)| v * w).sum();
    assert!((t_bundle.total_value(&tape) - sum).abs() < 1e-12);
}

#[test]
fn zero_weights_build_the_same_tape_as_absent_terms() {
    let bins = AngleBinSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let b = 4;
    let targets = sample_targets(&mut rng, &bins, b);

    let build_heads = |tape: &mut Tape, rng: &mut ChaCha8Rng| {
        let mut logits = Vec::new();
        let mut offsets = Vec::new();
        for k in 0..3 {
            let n = bins.bin_count(k);
            logits.push(tape.constant(rand_tensor(rng, vec![b, n], -1.0, 1.0)).unwrap());
            offsets.push(tape.constant(rand_tensor(rng, vec![b, n], 0.0, 1.0)).unwrap());
        }
        HeadOutputs {
            logits: [logits[0], logits[1], logits[2]],
            offsets: [offsets[0], offsets[1], offsets[2]],
        }
    };

    // Teacher with κ₂ = 0 must yield bitwise the bare pose loss.
    let mut rng_a = ChaCha8Rng::seed_from_u64(43);
    let mut tape_a = Tape::new();
    let heads_a = build_heads(&mut tape_a, &mut rng_a);
    let z = tape_a.constant(rand_tensor(&mut rng_a, vec![b, 6], -1.0, 1.0)).unwrap();
    let h = tape_a.constant(rand_tensor(&mut rng_a, vec![b, 6], -1.0, 1.0)).unwrap();
    let weights = LossWeights {
        kappa2: 0.0,
        ..LossWeights::default()
    };
    let bundle = teacher_loss(&mut tape_a, &heads_a, z, h, &targets, &bins, &weights).unwrap();
    assert_eq!(bundle.components.len(), 1);

    let mut rng_b = ChaCha8Rng::seed_from_u64(43);
    let mut tape_b = Tape::new();
    let heads_b = build_heads(&mut tape_b, &mut rng_b);
    let plain = pose_loss(&mut tape_b, &heads_b, &targets, &bins).unwrap();
    assert_eq!(
        bundle.total_value(&tape_a).to_bits(),
        tape_b.value_scalar(plain).to_bits(),
        "κ₂ = 0 differs bitwise from the pose-only tape"
    );

    // Student with ω₂ = ω₃ = 0 needs no teacher quantities at all.
    let mut tape_c = Tape::new();
    let mut rng_c = ChaCha8Rng::seed_from_u64(43);
    let heads_c = build_heads(&mut tape_c, &mut rng_c);
    let z_s = tape_c.constant(rand_tensor(&mut rng_c, vec![b, 16], -1.0, 1.0)).unwrap();
    let weights = LossWeights {
        omega1: 1.0,
        omega2: 0.0,
        omega3: 0.0,
        ..LossWeights::default()
    };
    let none = TeacherRefs {
        z: None,
        h: None,
        logits: None,
    };
    let bundle = student_loss(
        &mut tape_c,
        &heads_c,
        z_s,
        &targets,
        &bins,
        &weights,
        EmbedGuidance::Kl,
        &none,
    )
    .unwrap();
    assert_eq!(bundle.components.len(), 1);
    let plain_c = {
        let mut tape_d = Tape::new();
        let mut rng_d = ChaCha8Rng::seed_from_u64(43);
        let heads_d = build_heads(&mut tape_d, &mut rng_d);
        let p = pose_loss(&mut tape_d, &heads_d, &targets, &bins).unwrap();
        tape_d.value_scalar(p)
    };
    assert_eq!(bundle.total_value(&tape_c).to_bits(), plain_c.to_bits());
}

#[test]
fn missing_teacher_quantities_are_reported() {
    let bins = AngleBinSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let b = 3;
    let targets = sample_targets(&mut rng, &bins, b);
    let mut tape = Tape::new();
    let mut logits = Vec::new();
    let mut offsets = Vec::new();
    for k in 0..3 {
        let n = bins.bin_count(k);
        logits.push(tape.constant(rand_tensor(&mut rng, vec![b, n], -1.0, 1.0)).unwrap());
        offsets.push(tape.constant(rand_tensor(&mut rng, vec![b, n], 0.0, 1.0)).unwrap());
    }
    let heads = HeadOutputs {
        logits: [logits[0], logits[1], logits[2]],
        offsets: [offsets[0], offsets[1], offsets[2]],
    };
    let z_s = tape.constant(rand_tensor(&mut rng, vec![b, 16], -1.0, 1.0)).unwrap();
    let none = TeacherRefs {
        z: None,
        h: None,
        logits: None,
    };
    let err = student_loss(
        &mut tape,
        &heads,
        z_s,
        &targets,
        &bins,
        &LossWeights::default(),
        EmbedGuidance::Kl,
        &none,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Invalid(_)));
}

#[test]
fn loss_weight_validation_rejects_bad_values() {
    let mut w = LossWeights::default();
    w.kappa1 = -0.1;
    assert!(matches!(w.validate().unwrap_err(), Error::Config(_)));
    let mut w = LossWeights::default();
    w.tau = 0.0;
    assert!(matches!(w.validate().unwrap_err(), Error::Config(_)));
    let mut w = LossWeights::default();
    w.omega3 = f64::NAN;
    assert!(matches!(w.validate().unwrap_err(), Error::Config(_)));
    assert!(LossWeights::default().validate().is_ok());
}

/// Finite-difference checks: a handful per loss here; the wide sweep runs
/// in the acceptance suite.
#[test]
fn loss_gradients_match_finite_differences() {
    let eps = 1e-5;
    let tol = 1e-4;
    let bins = AngleBinSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(51);

    for trial in 0..3 {
        let b = 3 + trial;
        let targets = sample_targets(&mut rng, &bins, b);

        // Pose loss w.r.t. logits and offsets of every head.
        let mut inputs = BTreeMap::new();
        for k in 0..3 {
            let n = bins.bin_count(k);
            inputs.insert(format!("logits{k}"), rand_tensor(&mut rng, vec![b, n], -1.0, 1.0));
            inputs.insert(format!("off{k}"), rand_tensor(&mut rng, vec![b, n], 0.0, 1.0));
        }
        let targets_c = targets.clone();
        let bins_c = bins.clone();
        let report = grad_check(
            move |ins: &BTreeMap<String, Tensor>| {
                let mut tape = Tape::new();
                let mut lg = Vec::new();
                let mut of = Vec::new();
                for k in 0..3 {
                    lg.push(tape.leaf(&format!("logits{k}"), ins[&format!("logits{k}")].clone())?);
                    of.push(tape.leaf(&format!("off{k}"), ins[&format!("off{k}")].clone())?);
                }
                let heads = HeadOutputs {
                    logits: [lg[0], lg[1], lg[2]],
                    offsets: [of[0], of[1], of[2]],
                };
                let loss = pose_loss(&mut tape, &heads, &targets_c, &bins_c)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value_scalar(loss), grads))
            },
            &inputs,
            eps,
        )
        .unwrap();
        assert!(
            report.max_rel_err < tol,
            "pose grad mismatch {} at {}",
            report.max_rel_err,
            report.worst_input
        );

        // InfoNCE w.r.t. both sides.
        let mut inputs = BTreeMap::new();
        inputs.insert("z".to_string(), rand_tensor(&mut rng, vec![b, 5], -1.0, 1.0));
        inputs.insert("h".to_string(), rand_tensor(&mut rng, vec![b, 5], -1.0, 1.0));
        let report = grad_check(
            |ins: &BTreeMap<String, Tensor>| {
                let mut tape = Tape::new();
                let z = tape.leaf("z", ins["z"].clone())?;
                let h = tape.leaf("h", ins["h"].clone())?;
                let loss = infonce(&mut tape, z, h, 0.1)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value_scalar(loss), grads))
            },
            &inputs,
            eps,
        )
        .unwrap();
        assert!(
            report.max_rel_err < tol,
            "infonce grad mismatch {} at {}",
            report.max_rel_err,
            report.worst_input
        );

        // KL w.r.t. both argument logits.
        let mut inputs = BTreeMap::new();
        inputs.insert("p".to_string(), rand_tensor(&mut rng, vec![b, 6], -2.0, 2.0));
        inputs.insert("q".to_string(), rand_tensor(&mut rng, vec![b, 6], -2.0, 2.0));
        let report = grad_check(
            |ins: &BTreeMap<String, Tensor>| {
                let mut tape = Tape::new();
                let p = tape.leaf("p", ins["p"].clone())?;
                let q = tape.leaf("q", ins["q"].clone())?;
                let loss = kl_softmax(&mut tape, p, q)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value_scalar(loss), grads))
            },
            &inputs,
            eps,
        )
        .unwrap();
        assert!(
            report.max_rel_err < tol,
            "kl grad mismatch {} at {}",
            report.max_rel_err,
            report.worst_input
        );
    }
}
