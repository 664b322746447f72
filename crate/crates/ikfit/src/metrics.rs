//! Procrustes alignment and pose evaluation metrics: region-aligned PA-MPJPE
//! in millimeters, joint-angle mean absolute error in degrees, and cross-view
//! joint-angle consistency.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{PoseState, Skeleton};

/// Named alignment set with an optional separate reporting set.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AlignmentRegion {
    pub name: String,
    pub site_names: Vec<String>,
    /// Sites whose error is reported; defaults to the alignment set.
    #[serde(default)]
    pub report_sites: Option<Vec<String>>,
}

impl AlignmentRegion {
    pub fn report_set(&self) -> &[String] {
        self.report_sites.as_deref().unwrap_or(&self.site_names)
    }
}

/// Similarity transform `x ↦ s·R·x + t` with the transformed source points.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub aligned_source: Vec<Vector3<f64>>,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn residual(&self, target: &[Vector3<f64>]) -> f64 {
        self.aligned_source
            .iter()
            .zip(target)
            .map(|(a, t)| (a - t).norm_squared())
            .sum()
    }
}

/// Closed-form similarity transform minimizing `Σ‖s·R·x_i + t − y_i‖²`
/// (Umeyama), with det(R) = +1 enforced.
pub fn procrustes_align(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Alignment> {
    if source.len() != target.len() {
        return Err(Error::DegenerateAlignment(format!(
            "point sets differ in size ({} vs {})",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::DegenerateAlignment("need at least 3 points".into()));
    }
    let nf = n as f64;
    let mu_x: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / nf;
    let mu_y: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / nf;

    let mut sigma_x = 0.0;
    let mut cov = Matrix3::zeros();
    for (x, y) in source.iter().zip(target) {
        let xc = x - mu_x;
        let yc = y - mu_y;
        sigma_x += xc.norm_squared();
        cov += yc * xc.transpose();
    }
    sigma_x /= nf;
    cov /= nf;

    if sigma_x < 1e-18 {
        return Err(Error::DegenerateAlignment("source points coincide".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    // Collinear targets leave the rotation about their axis undetermined.
    if svd.singular_values[1] < 1e-12 {
        return Err(Error::DegenerateAlignment("target points are collinear".into()));
    }
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u * v_t).determinant() < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * v_t;
    let scale = svd.singular_values.dot(&s_diag) / sigma_x;
    let translation = mu_y - scale * (rotation * mu_x);

    let aligned_source = source
        .iter()
        .map(|p| scale * (rotation * p) + translation)
        .collect();
    Ok(Alignment { scale, rotation, translation, aligned_source })
}

fn gather(
    map: &BTreeMap<String, Vector3<f64>>,
    names: &[String],
) -> Result<Vec<Vector3<f64>>> {
    names
        .iter()
        .map(|n| {
            map.get(n)
                .copied()
                .ok_or_else(|| Error::Evaluation(format!("site '{n}' missing from pose")))
        })
        .collect()
}

/// Procrustes-aligned mean per-joint position error in millimeters. The
/// alignment is fit on `region.site_names` and the error reported over
/// `region.report_set()`.
pub fn pa_mpjpe(
    pred: &BTreeMap<String, Vector3<f64>>,
    reference: &BTreeMap<String, Vector3<f64>>,
    region: &AlignmentRegion,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let src = gather(pred, &region.site_names)?;
    let dst = gather(reference, &region.site_names)?;
    let alignment = procrustes_align(&src, &dst)?;

    let mut per_site = BTreeMap::new();
    let mut sum = 0.0;
    for name in region.report_set() {
        let p = pred
            .get(name)
            .ok_or_else(|| Error::Evaluation(format!("site '{name}' missing from prediction")))?;
        let r = reference
            .get(name)
            .ok_or_else(|| Error::Evaluation(format!("site '{name}' missing from reference")))?;
        let err_mm = (alignment.apply(p) - r).norm() * 1000.0;
        per_site.insert(name.clone(), err_mm);
        sum += err_mm;
    }
    if per_site.is_empty() {
        return Err(Error::Evaluation("region reports no sites".into()));
    }
    Ok((sum / per_site.len() as f64, per_site))
}

/// Label of one rotational coordinate: `body[component]`.
pub fn rotational_dof_labels(skel: &Skeleton) -> Vec<String> {
    skel.dofs()
        .iter()
        .filter(|d| !d.translational)
        .map(|d| format!("{}[{}]", skel.bodies()[d.body].name, d.component))
        .collect()
}

fn rotational_dofs<'a>(
    skel: &'a Skeleton,
    joint_subset: Option<&[String]>,
) -> Result<Vec<(usize, String)>> {
    let allowed: Option<std::collections::HashSet<&String>> =
        joint_subset.map(|s| s.iter().collect());
    if let Some(subset) = joint_subset {
        for name in subset {
            if skel.body_id(name).is_none() {
                return Err(Error::SkeletonMismatch(format!("unknown joint '{name}'")));
            }
        }
    }
    Ok(skel
        .dofs()
        .iter()
        .enumerate()
        .filter(|(_, d)| !d.translational)
        .filter(|(_, d)| {
            allowed
                .as_ref()
                .is_none_or(|set| set.contains(&skel.bodies()[d.body].name))
        })
        .map(|(i, d)| (i, format!("{}[{}]", skel.bodies()[d.body].name, d.component)))
        .collect())
}

/// Per-DOF absolute joint-angle difference in degrees, over the rotational
/// coordinates of the selected joints (all joints when the subset is absent).
/// Ball-joint components are compared in the exponential-map parameterization.
pub fn joint_angle_mae(
    skel: &Skeleton,
    pred: &PoseState,
    reference: &PoseState,
    joint_subset: Option<&[String]>,
) -> Result<BTreeMap<String, f64>> {
    pred.check(skel).map_err(|_| {
        Error::SkeletonMismatch("prediction pose does not match skeleton".into())
    })?;
    reference.check(skel).map_err(|_| {
        Error::SkeletonMismatch("reference pose does not match skeleton".into())
    })?;
    let mut out = BTreeMap::new();
    for (i, label) in rotational_dofs(skel, joint_subset)? {
        out.insert(label, (pred.q[i] - reference.q[i]).abs().to_degrees());
    }
    Ok(out)
}

/// Geodesic angle (degrees) between the two poses' ball-joint rotations —
/// the alternative 3-DOF angular metric.
pub fn ball_joint_geodesic_deg(
    skel: &Skeleton,
    pred: &PoseState,
    reference: &PoseState,
    body: &str,
) -> Result<f64> {
    let id = skel
        .body_id(body)
        .ok_or_else(|| Error::SkeletonMismatch(format!("unknown joint '{body}'")))?;
    if !matches!(skel.bodies()[id].joint, crate::skeleton::JointKind::Ball { .. }) {
        return Err(Error::SkeletonMismatch(format!("'{body}' is not a ball joint")));
    }
    let off = skel.q_offset(id);
    let rp = Rotation3::new(Vector3::new(pred.q[off], pred.q[off + 1], pred.q[off + 2]));
    let rr = Rotation3::new(Vector3::new(
        reference.q[off],
        reference.q[off + 1],
        reference.q[off + 2],
    ));
    Ok((rp * rr.inverse()).angle().to_degrees())
}

/// Population standard deviation of each rotational coordinate across views,
/// in degrees.
pub fn cross_view_consistency(
    skel: &Skeleton,
    poses_per_view: &[PoseState],
    joint_subset: Option<&[String]>,
) -> Result<BTreeMap<String, f64>> {
    if poses_per_view.len() < 2 {
        return Err(Error::Evaluation(format!(
            "cross-view consistency needs >= 2 views, got {}",
            poses_per_view.len()
        )));
    }
    for pose in poses_per_view {
        pose.check(skel)
            .map_err(|_| Error::SkeletonMismatch("view pose does not match skeleton".into()))?;
    }
    let n = poses_per_view.len() as f64;
    let mut out = BTreeMap::new();
    for (i, label) in rotational_dofs(skel, joint_subset)? {
        let mean: f64 = poses_per_view.iter().map(|p| p.q[i]).sum::<f64>() / n;
        let var: f64 = poses_per_view
            .iter()
            .map(|p| (p.q[i] - mean).powi(2))
            .sum::<f64>()
            / n;
        out.insert(label, var.sqrt().to_degrees());
    }
    Ok(out)
}

/// Mean of a per-DOF metric map.
pub fn mean_of(metric: &BTreeMap<String, f64>) -> f64 {
    if metric.is_empty() {
        return 0.0;
    }
    metric.values().sum::<f64>() / metric.len() as f64
}
