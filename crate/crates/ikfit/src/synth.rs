//! Synthetic-scene generator: ground-truth poses sampled inside joint
//! limits, marker frames from forward kinematics plus isotropic noise, and
//! multi-camera detections with pixel noise and dropout. Fully deterministic
//! per seed, so generated scenes serve as oracles for the solvers.

use nalgebra::{UnitVector3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cameras::{ring_rig, CameraRig};
use crate::error::{Error, Result};
use crate::residuals::{Detection, MarkerFrame, MultiviewFrame};
use crate::skeleton::{
    fk, unit_y, unit_z, Body, JointKind, PoseState, ScaleGroup, Site, Skeleton,
};

/// Ring-of-cameras layout around a target point.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RigLayout {
    pub cameras: usize,
    pub radius: f64,
    pub height: f64,
    pub target: Vector3<f64>,
    pub focal: f64,
    pub image_size: (u32, u32),
}

impl Default for RigLayout {
    fn default() -> Self {
        RigLayout {
            cameras: 8,
            radius: 3.0,
            height: 1.0,
            target: Vector3::zeros(),
            focal: 1200.0,
            image_size: (1920, 1080),
        }
    }
}

/// Sampling and corruption parameters for one synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    /// Fraction of each limited joint range used by the pose sampler,
    /// centered on the range midpoint. Defaults to 0.9 so clamping stays
    /// inactive in round-trip tests.
    pub limit_fraction: f64,
    /// Half-range (radians) for rotational coordinates without limits.
    pub rotation_range: f64,
    /// Half-range (meters) for translational coordinates without limits.
    pub translation_range: f64,
    /// Isotropic 3D marker noise, meters.
    pub marker_sigma: f64,
    /// Isotropic 2D detection noise, pixels.
    pub pixel_sigma: f64,
    /// Per (camera, site) dropout probability; dropped pairs keep their
    /// projected pixel but get confidence 0.
    pub dropout: f64,
    /// Camera layout; `None` generates a marker-only scene.
    pub rig: Option<RigLayout>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            limit_fraction: 0.9,
            rotation_range: 0.5,
            translation_range: 0.1,
            marker_sigma: 0.0,
            pixel_sigma: 0.0,
            dropout: 0.0,
            rig: None,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.limit_fraction) {
            return Err(Error::InvalidScene("limit_fraction must be in [0, 1]".into()));
        }
        if self.marker_sigma < 0.0 || self.pixel_sigma < 0.0 {
            return Err(Error::InvalidScene("noise sigmas must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::InvalidScene("dropout must be in [0, 1]".into()));
        }
        if self.rotation_range < 0.0 || self.translation_range < 0.0 {
            return Err(Error::InvalidScene("sampler ranges must be >= 0".into()));
        }
        if let Some(rig) = &self.rig {
            if rig.cameras == 0 {
                return Err(Error::InvalidScene(
                    "multiview scene requires at least one camera".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Generated scene: ground truth plus the observation streams derived from it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub ground_truth: Vec<PoseState>,
    pub marker_frames: Vec<MarkerFrame>,
    pub multiview_frames: Vec<MultiviewFrame>,
    pub rig: Option<CameraRig>,
}

fn sample_range(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Draw a pose uniformly inside the spec's per-DOF ranges. Limited joints
/// sample the middle `limit_fraction` of their range; unlimited joints use
/// the spec's default half-ranges.
pub fn sample_pose(skel: &Skeleton, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> PoseState {
    let mut pose = PoseState::zero(skel);
    for (i, dof) in skel.dofs().iter().enumerate() {
        pose.q[i] = match dof.limit {
            Some((lo, hi)) => {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo) * spec.limit_fraction;
                sample_range(rng, mid - half, mid + half)
            }
            None => {
                let half = if dof.translational {
                    spec.translation_range
                } else {
                    spec.rotation_range
                };
                sample_range(rng, -half, half)
            }
        };
    }
    pose
}

fn gaussian3(normal: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
}

/// Generate `frames` time samples: ground-truth poses, noisy marker frames,
/// and (when a rig layout is present) noisy multiview detections.
/// Projections behind a camera or outside its image get confidence 0,
/// matching solver preprocessing.
pub fn generate_scene(skel: &Skeleton, spec: &SceneSpec, frames: usize) -> Result<Scene> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::InvalidScene("frame count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rig = match &spec.rig {
        Some(layout) => Some(ring_rig(
            layout.cameras,
            layout.radius,
            layout.height,
            layout.target,
            layout.focal,
            layout.image_size,
        )?),
        None => None,
    };
    let marker_noise = Normal::new(0.0, spec.marker_sigma.max(1e-300))
        .map_err(|e| Error::InvalidScene(e.to_string()))?;
    let pixel_noise = Normal::new(0.0, spec.pixel_sigma.max(1e-300))
        .map_err(|e| Error::InvalidScene(e.to_string()))?;

    let mut ground_truth = Vec::with_capacity(frames);
    let mut marker_frames = Vec::with_capacity(frames);
    let mut multiview_frames = Vec::with_capacity(frames);

    for _ in 0..frames {
        let pose = sample_pose(skel, spec, &mut rng);
        let fk_result = fk(skel, &pose)?;

        let mut entries = Vec::with_capacity(skel.sites().len());
        for (i, site) in skel.sites().iter().enumerate() {
            let mut p = fk_result.site_positions[i];
            if spec.marker_sigma > 0.0 {
                p += gaussian3(&marker_noise, &mut rng);
            }
            entries.push((site.name.clone(), p, 1.0));
        }
        marker_frames.push(MarkerFrame::new(entries)?);

        if let Some(rig) = &rig {
            let mut frame = MultiviewFrame::new();
            for camera in rig.cameras() {
                for (i, site) in skel.sites().iter().enumerate() {
                    let projection = camera.project(&fk_result.site_positions[i]);
                    let mut pixel = projection.pixel;
                    if projection.valid && spec.pixel_sigma > 0.0 {
                        pixel.x += pixel_noise.sample(&mut rng);
                        pixel.y += pixel_noise.sample(&mut rng);
                    }
                    // One dropout draw per pair regardless of validity keeps
                    // the random stream independent of camera geometry.
                    let dropped = rng.gen_range(0.0..1.0) < spec.dropout;
                    let confidence =
                        if dropped || !projection.valid || !camera.in_bounds(&pixel) {
                            0.0
                        } else {
                            1.0
                        };
                    frame.insert(&camera.id, &site.name, Detection { pixel, confidence });
                }
            }
            multiview_frames.push(frame);
        }

        ground_truth.push(pose);
    }

    Ok(Scene { ground_truth, marker_frames, multiview_frames, rig })
}

/// Displace one camera's detections by a fixed pixel shift — a controlled
/// outlier for triangulation-robustness tests. Confidences are untouched.
pub fn inject_camera_outlier(frame: &mut MultiviewFrame, camera: &str, shift: nalgebra::Vector2<f64>) {
    frame.shift_view(camera, shift);
}

fn random_unit_axis(rng: &mut ChaCha8Rng) -> UnitVector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if v.norm() > 0.2 {
            return UnitVector3::new_normalize(v);
        }
    }
}

/// Random serial chain with `rotational_dofs` non-root rotational
/// coordinates (a mix of hinges and ball joints), random link lengths and
/// axes. Total coordinate count is `rotational_dofs + 6` for the free root.
///
/// Each link carries two markers — its tip plus a perpendicular stud — so
/// rotation about the bone axis stays observable, and the root carries a
/// wide marker triad; both are needed for the chain to be identifiable from
/// one frame.
pub fn random_chain(rotational_dofs: usize, rng: &mut ChaCha8Rng) -> Result<Skeleton> {
    let mut joints = Vec::new();
    let mut remaining = rotational_dofs;
    let mut used_axes: Vec<UnitVector3<f64>> = Vec::new();
    while remaining > 0 {
        if remaining >= 3 && rng.gen_bool(0.35) {
            joints.push(JointKind::Ball { limits: [Some((-0.8, 0.8)); 3] });
            remaining -= 3;
        } else {
            // Near-parallel hinge axes close along the chain make the pair
            // nearly redundant; resample until the new axis is well
            // separated from the two most recent ones.
            let axis = loop {
                let a = random_unit_axis(rng);
                let recent = used_axes.iter().rev().take(2);
                if recent.into_iter().all(|p| p.dot(&a).abs() <= 0.6) {
                    break a;
                }
            };
            used_axes.push(axis);
            joints.push(JointKind::Hinge {
                axis,
                limits: if rng.gen_bool(0.5) { Some((-1.4, 1.4)) } else { None },
            });
            remaining -= 1;
        }
    }

    let mut bodies = vec![Body {
        name: "root".into(),
        parent: None,
        local_translation: Vector3::zeros(),
        joint: JointKind::FreeRoot,
    }];
    let lever = 0.3 * joints.len().max(1) as f64;
    let mut sites = vec![
        Site { name: "base".into(), body: 0, local_offset: Vector3::zeros(), core: true },
        Site {
            name: "base_u".into(),
            body: 0,
            local_offset: Vector3::new(0.0, lever, 0.0),
            core: true,
        },
        Site {
            name: "base_v".into(),
            body: 0,
            local_offset: Vector3::new(0.0, 0.0, lever),
            core: true,
        },
        Site {
            name: "base_w".into(),
            body: 0,
            local_offset: Vector3::new(-lever, 0.0, 0.0),
            core: true,
        },
    ];
    let n_links = joints.len();
    for (i, joint) in joints.into_iter().enumerate() {
        let link = Vector3::new(
            rng.gen_range(0.2..0.35),
            rng.gen_range(-0.08..0.08),
            rng.gen_range(-0.08..0.08),
        );
        bodies.push(Body {
            name: format!("link{i}"),
            parent: Some(i),
            local_translation: link,
            joint,
        });
        sites.push(Site {
            name: format!("tip{i}"),
            body: i + 1,
            local_offset: link,
            core: i < 2,
        });
        let stud = link.cross(&Vector3::z());
        let stud = if stud.norm() < 1e-6 { link.cross(&Vector3::y()) } else { stud };
        let stud = stud.normalize() * (2.0 * link.norm());
        let stud2 = link.cross(&stud).normalize() * (2.0 * link.norm());
        sites.push(Site {
            name: format!("stud{i}"),
            body: i + 1,
            local_offset: link + stud,
            core: i < 2,
        });
        sites.push(Site {
            name: format!("stud{i}b"),
            body: i + 1,
            local_offset: link + stud2,
            core: i < 2,
        });
        // A wide marker triad on the terminal link pins the distal end the
        // same way the root triad pins the proximal end, so mid-chain joints
        // cannot trade off against each other cheaply.
        if i + 1 == n_links {
            for (tag, dir) in [("end_u", stud), ("end_v", stud2), ("end_w", -stud - stud2)] {
                sites.push(Site {
                    name: tag.to_string(),
                    body: i + 1,
                    local_offset: link + dir.normalize() * lever,
                    core: false,
                });
            }
        }
    }
    Skeleton::new(bodies, sites, vec![])
}

const FINGERS: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

/// Two-hand fixture: free-root torso, per hand a ball wrist plus five
/// three-hinge fingers — 42 generalized coordinates, 21 sites per hand plus
/// a torso marker triad, and one scale group per hand.
pub fn two_hand_fixture() -> Result<Skeleton> {
    let mut bodies = vec![Body {
        name: "torso".into(),
        parent: None,
        local_translation: Vector3::zeros(),
        joint: JointKind::FreeRoot,
    }];
    let mut sites = Vec::new();
    let mut groups = Vec::new();

    // Torso marker triad with lever arms comparable to the hand span, so the
    // root pose stays well conditioned against the wrist rotations.
    for (name, offset) in [
        ("torso_c", Vector3::zeros()),
        ("torso_u", Vector3::new(0.0, 0.7, 0.0)),
        ("torso_v", Vector3::new(0.0, 0.0, 0.7)),
        ("torso_w", Vector3::new(-0.7, -0.35, 0.0)),
    ] {
        sites.push(Site { name: name.into(), body: 0, local_offset: offset, core: true });
    }

    for (hand, sign) in [("left", -1.0), ("right", 1.0)] {
        let wrist = bodies.len();
        bodies.push(Body {
            name: format!("{hand}_wrist"),
            parent: Some(0),
            local_translation: Vector3::new(sign * 0.25, 0.0, 0.0),
            joint: JointKind::Ball { limits: [Some((-1.0, 1.0)); 3] },
        });
        sites.push(Site {
            name: format!("{hand}_wrist"),
            body: wrist,
            local_offset: Vector3::zeros(),
            core: true,
        });
        let mut hand_bodies = vec![wrist];
        for (f, finger) in FINGERS.iter().enumerate() {
            let spread = 0.045 * (f as f64 - 2.0);
            let segments = [
                (format!("{hand}_{finger}_mcp"), Vector3::new(sign * 0.10, spread, 0.0)),
                (format!("{hand}_{finger}_pip"), Vector3::new(sign * 0.08, 0.0, 0.0)),
                (format!("{hand}_{finger}_dip"), Vector3::new(sign * 0.06, 0.0, 0.0)),
            ];
            let mut parent = wrist;
            for (name, translation) in segments {
                let id = bodies.len();
                bodies.push(Body {
                    name: name.clone(),
                    parent: Some(parent),
                    local_translation: translation,
                    // Thumb flexes about y, the other fingers about z.
                    joint: JointKind::Hinge {
                        axis: if *finger == "thumb" { unit_y() } else { unit_z() },
                        limits: Some((-0.2, 1.6)),
                    },
                });
                sites.push(Site {
                    name,
                    body: id,
                    local_offset: Vector3::zeros(),
                    core: false,
                });
                hand_bodies.push(id);
                parent = id;
            }
            sites.push(Site {
                name: format!("{hand}_{finger}_tip"),
                body: parent,
                local_offset: Vector3::new(sign * 0.05, 0.0, 0.0),
                core: false,
            });
        }
        groups.push(ScaleGroup { name: hand.into(), bodies: hand_bodies });
    }

    Skeleton::new(bodies, sites, groups)
}
