//! Cross-module properties checked over many random configurations:
//! analytic Jacobians against finite differences, rigid-motion equivariance
//! of forward kinematics, triangulation round trips, clamp idempotence,
//! correspondence-table bijectivity, and noiseless solver round trips.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ikfit::cameras::{gc_at_threshold, ring_rig, robust_triangulate, Observation};
use ikfit::lm;
use ikfit::mapping::{discover_correspondences, DEFAULT_KERNEL_TAU};
use ikfit::residuals::{marker_residuals, ActiveSet, MarkerFrame};
use ikfit::skeleton::{
    clamp_to_limits, fk, forward_kinematics, is_within_limits, pose_jacobian, ParamMask,
    PoseState,
};
use ikfit::synth::{generate_scene, random_chain, sample_pose, SceneSpec};

/// Central finite differences of the site positions with respect to every
/// generalized coordinate.
fn fd_jacobian(
    skel: &ikfit::skeleton::Skeleton,
    pose: &PoseState,
    sites: &[String],
    step: f64,
) -> Vec<Vec<Vector3<f64>>> {
    let mut out = Vec::with_capacity(skel.nq());
    for i in 0..skel.nq() {
        let mut plus = pose.clone();
        plus.q[i] += step;
        let mut minus = pose.clone();
        minus.q[i] -= step;
        let fp = forward_kinematics(skel, &plus).unwrap();
        let fm = forward_kinematics(skel, &minus).unwrap();
        out.push(
            sites
                .iter()
                .map(|s| (fp[s] - fm[s]) / (2.0 * step))
                .collect(),
        );
    }
    out
}

#[test]
fn jacobian_matches_finite_differences_on_100_random_skeletons() {
    let started = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let dofs = rng.gen_range(3..=20);
        let skel = random_chain(dofs, &mut rng).unwrap();
        let spec = SceneSpec { seed: case, rotation_range: 0.4, ..Default::default() };
        let pose = sample_pose(&skel, &spec, &mut rng);
        let sites: Vec<String> = skel.sites().iter().map(|s| s.name.clone()).collect();
        let mask = ParamMask::q_only(&skel);
        let analytic = pose_jacobian(&skel, &pose, &sites, &mask).unwrap();
        let numeric = fd_jacobian(&skel, &pose, &sites, 1e-6);
        for (col, fd_col) in numeric.iter().enumerate() {
            for (s, fd) in fd_col.iter().enumerate() {
                for axis in 0..3 {
                    let a = analytic[(3 * s + axis, col)];
                    let n = fd[axis];
                    let denom = n.abs().max(1e-6);
                    assert!(
                        (a - n).abs() / denom < 1e-4,
                        "case {case} col {col} site {s} axis {axis}: {a} vs {n}"
                    );
                }
            }
        }
    }
    assert!(started.elapsed().as_secs() < 30, "took {:?}", started.elapsed());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Moving the free root by a rigid transform moves every site rigidly.
    #[test]
    fn fk_is_equivariant_under_root_motion(
        seed in 0u64..1000,
        tx in -0.5f64..0.5, ty in -0.5f64..0.5, tz in -0.5f64..0.5,
        rx in -0.8f64..0.8, ry in -0.8f64..0.8, rz in -0.8f64..0.8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skel = random_chain(rng.gen_range(2..8), &mut rng).unwrap();
        let spec = SceneSpec { seed, ..Default::default() };
        let mut pose = sample_pose(&skel, &spec, &mut rng);
        // Keep the base pose's root at identity so composition is exact.
        for i in 0..6 {
            pose.q[i] = 0.0;
        }
        let base = forward_kinematics(&skel, &pose).unwrap();

        let mut moved = pose.clone();
        moved.q[0] = tx;
        moved.q[1] = ty;
        moved.q[2] = tz;
        moved.q[3] = rx;
        moved.q[4] = ry;
        moved.q[5] = rz;
        let rot = Rotation3::new(Vector3::new(rx, ry, rz));
        let t = Vector3::new(tx, ty, tz);
        let transformed = forward_kinematics(&skel, &moved).unwrap();
        for (name, p) in &base {
            let expected = rot * p + t;
            prop_assert!((transformed[name] - expected).norm() < 1e-9);
        }
    }

    /// The stacked residual norm equals the naively recomputed weighted
    /// objective.
    #[test]
    fn residual_loss_equals_naive_objective(
        seed in 0u64..1000,
        w0 in 0.0f64..2.0, w1 in 0.0f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skel = random_chain(3, &mut rng).unwrap();
        let spec = SceneSpec { seed, ..Default::default() };
        let pose = sample_pose(&skel, &spec, &mut rng);
        let names: Vec<String> = skel.sites().iter().map(|s| s.name.clone()).collect();
        let targets: Vec<Vector3<f64>> = names
            .iter()
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let weights: Vec<f64> = (0..names.len())
            .map(|i| if i % 2 == 0 { w0 } else { w1 })
            .collect();
        let frame = MarkerFrame::new(
            names
                .iter()
                .zip(&targets)
                .zip(&weights)
                .map(|((n, t), w)| (n.clone(), *t, *w)),
        )
        .unwrap();
        let active = ActiveSet::new(ParamMask::q_only(&skel), vec![]);
        let block = marker_residuals(&skel, &pose, &frame, &active, 0.0).unwrap();

        let positions = forward_kinematics(&skel, &pose).unwrap();
        let naive: f64 = names
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((n, t), w)| w * (positions[n] - t).norm_squared())
            .sum();
        prop_assert!((block.loss() - naive).abs() <= 1e-9 * naive.max(1.0));
    }

    /// Clamping is idempotent and always lands inside the limits.
    #[test]
    fn clamp_is_idempotent_and_feasible(seed in 0u64..1000, blowup in 1.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skel = random_chain(rng.gen_range(2..10), &mut rng).unwrap();
        let spec = SceneSpec { seed, limit_fraction: 1.0, ..Default::default() };
        let mut pose = sample_pose(&skel, &spec, &mut rng);
        pose.q *= blowup;
        let once = clamp_to_limits(&skel, &pose).unwrap();
        prop_assert!(is_within_limits(&skel, &once));
        let twice = clamp_to_limits(&skel, &once).unwrap();
        prop_assert_eq!(once, twice);
    }

    /// A point in front of several cameras triangulates back exactly.
    #[test]
    fn triangulation_round_trip(
        cams in 2usize..8,
        px in -0.6f64..0.6, py in -0.6f64..0.6, pz in -0.4f64..0.4,
    ) {
        let rig = ring_rig(cams, 3.0, 1.2, Vector3::zeros(), 1100.0, (1920, 1080)).unwrap();
        let point = Vector3::new(px, py, pz);
        let detections: Vec<Observation> = rig
            .cameras()
            .iter()
            .map(|c| Observation {
                camera: c.id.clone(),
                pixel: c.project(&point).pixel,
                confidence: 1.0,
            })
            .collect();
        let (recovered, weights) = robust_triangulate(&rig, &detections, 10.0).unwrap();
        prop_assert!((recovered - point).norm() < 1e-8);
        prop_assert!(weights.iter().all(|&w| w > 0.9));
    }

    /// GC is monotone non-decreasing in the pixel threshold.
    #[test]
    fn gc_monotone_in_threshold(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skel = random_chain(4, &mut rng).unwrap();
        let spec = SceneSpec {
            pixel_sigma: 6.0,
            rig: Some(Default::default()),
            seed,
            ..Default::default()
        };
        let scene = generate_scene(&skel, &spec, 1).unwrap();
        let rig = scene.rig.as_ref().unwrap();
        let truth = forward_kinematics(&skel, &scene.ground_truth[0]).unwrap();
        let mut last = 0.0;
        for threshold in [1.0, 3.0, 6.0, 10.0, 25.0, 100.0] {
            let gc = gc_at_threshold(rig, &truth, &scene.multiview_frames[0], threshold).unwrap();
            prop_assert!(gc >= last);
            last = gc;
        }
        prop_assert!((last - 1.0).abs() < 1e-12);
    }

    /// Discovery always yields a bijective table.
    #[test]
    fn discovered_tables_are_bijective(seed in 0u64..1000, n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference: BTreeMap<String, Vector3<f64>> = (0..n)
            .map(|i| {
                (
                    format!("r{i:02}"),
                    Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                )
            })
            .collect();
        // More external candidates than references, jittered.
        let external: BTreeMap<String, Vector3<f64>> = reference
            .values()
            .enumerate()
            .flat_map(|(i, p)| {
                let jitter = Vector3::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), 0.0);
                vec![
                    (format!("e{i:02}"), p + jitter),
                    (format!("x{i:02}"), p + Vector3::new(0.3, 0.3, 0.3)),
                ]
            })
            .collect();
        let pairing: BTreeMap<String, String> = reference
            .keys()
            .map(|k| (k.clone(), format!("site_{k}")))
            .collect();
        let table = discover_correspondences(
            &[external],
            &[reference],
            &pairing,
            &BTreeMap::new(),
            DEFAULT_KERNEL_TAU,
        )
        .unwrap();
        let mut exts = std::collections::BTreeSet::new();
        let mut sites = std::collections::BTreeSet::new();
        for e in table.entries() {
            prop_assert!(exts.insert(e.external_id.clone()));
            prop_assert!(sites.insert(e.site.clone()));
            prop_assert!(e.weight.is_finite() && e.weight >= 0.0);
        }
        prop_assert_eq!(table.entries().len(), n);
    }
}

#[test]
fn noiseless_monocular_round_trip_over_50_seeds() {
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dofs = rng.gen_range(2..=6); // plus the 6-DOF root stays ≤ 12
        let skel = random_chain(dofs, &mut rng).unwrap();
        let spec = SceneSpec {
            seed,
            rotation_range: 0.3,
            limit_fraction: 0.25,
            ..Default::default()
        };
        let scene = generate_scene(&skel, &spec, 1).unwrap();
        let truth = &scene.ground_truth[0];

        // Reject generators too close to a ball-joint parameterization
        // singularity (‖ω‖ near π) — none should occur with these ranges.
        let near_singular = skel.bodies().iter().enumerate().any(|(b, body)| {
            matches!(body.joint, ikfit::skeleton::JointKind::Ball { .. }) && {
                let off = skel.q_offset(b);
                let norm = Vector3::new(truth.q[off], truth.q[off + 1], truth.q[off + 2]).norm();
                (norm - std::f64::consts::PI).abs() < 1e-2
            }
        });
        assert!(!near_singular, "seed {seed} sampled a near-singular generator");

        let obj = lm::MarkerObjective::new(&skel, &scene.marker_frames[0]);
        let config = lm::default_monocular_config(&skel).unwrap();
        let report = lm::run_staged(&obj, &config).unwrap();
        for (i, dof) in skel.dofs().iter().enumerate() {
            if !dof.translational {
                let err = (report.final_pose.q[i] - truth.q[i]).abs();
                if err >= 1e-3 {
                    failures.push((seed, i, err));
                }
            }
        }
    }
    assert!(failures.is_empty(), "angle recovery failures: {failures:?}");
}

#[test]
fn fk_scale_semantics_scale_bones_and_sites() {
    // Doubling a hand's scale group doubles every hand-site position
    // relative to the torso at the zero pose, since the factor multiplies
    // both bone translations and site offsets; torso sites stay put.
    let skel = ikfit::synth::two_hand_fixture().unwrap();
    let pose = PoseState::zero(&skel);
    let mut scaled = pose.clone();
    for s in scaled.scales.iter_mut() {
        *s = 2.0;
    }
    let base = fk(&skel, &pose).unwrap();
    let big = fk(&skel, &scaled).unwrap();
    let torso = base.body_translations[0];
    for (i, site) in skel.sites().iter().enumerate() {
        let expected = if site.body == 0 {
            base.site_positions[i]
        } else {
            torso + 2.0 * (base.site_positions[i] - torso)
        };
        assert!(
            (big.site_positions[i] - expected).norm() < 1e-9,
            "site {} off by {}",
            site.name,
            (big.site_positions[i] - expected).norm()
        );
    }
}
