//! Weighted residual vectors and Jacobians for the two fitting objectives:
//! 3D marker matching with per-marker offset regularization, and multiview
//! pixel reprojection. `√w` is folded into each row so that the squared norm
//! of a block equals the weighted objective value.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::cameras::CameraRig;
use crate::error::{Error, Result};
use crate::skeleton::{self, ParamMask, PoseState, Skeleton};

/// One time sample of 3D targets with per-site confidences. Sites missing
/// from the map simply do not contribute (equivalent to zero confidence).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MarkerFrame {
    targets: BTreeMap<String, Vector3<f64>>,
    confidences: BTreeMap<String, f64>,
}

impl MarkerFrame {
    pub fn new(entries: impl IntoIterator<Item = (String, Vector3<f64>, f64)>) -> Result<Self> {
        let mut targets = BTreeMap::new();
        let mut confidences = BTreeMap::new();
        for (name, pos, w) in entries {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidPose(format!(
                    "confidence for '{name}' must be finite and >= 0"
                )));
            }
            targets.insert(name.clone(), pos);
            confidences.insert(name, w);
        }
        Ok(MarkerFrame { targets, confidences })
    }

    pub fn targets(&self) -> &BTreeMap<String, Vector3<f64>> {
        &self.targets
    }

    pub fn confidence(&self, site: &str) -> f64 {
        self.confidences.get(site).copied().unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sites with positive confidence, in name order.
    pub fn active_sites(&self) -> Vec<String> {
        self.targets
            .keys()
            .filter(|s| self.confidence(s) > 0.0)
            .cloned()
            .collect()
    }

    /// Keep only the listed sites.
    pub fn restricted_to(&self, sites: &[String]) -> MarkerFrame {
        let keep: std::collections::HashSet<&String> = sites.iter().collect();
        MarkerFrame {
            targets: self
                .targets
                .iter()
                .filter(|(k, _)| keep.contains(k))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            confidences: self
                .confidences
                .iter()
                .filter(|(k, _)| keep.contains(k))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }

    pub fn scale_confidences(&mut self, site: &str, factor: f64) {
        if let Some(w) = self.confidences.get_mut(site) {
            *w *= factor;
        }
    }
}

/// One 2D detection of a site in one camera.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Detection {
    pub pixel: Vector2<f64>,
    pub confidence: f64,
}

/// Per-camera 2D detections for one time sample.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct MultiviewFrame {
    views: BTreeMap<String, BTreeMap<String, Detection>>,
}

impl MultiviewFrame {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, camera: &str, site: &str, detection: Detection) {
        self.views
            .entry(camera.to_string())
            .or_default()
            .insert(site.to_string(), detection);
    }

    pub fn views(&self) -> &BTreeMap<String, BTreeMap<String, Detection>> {
        &self.views
    }

    pub fn view(&self, camera: &str) -> Option<&BTreeMap<String, Detection>> {
        self.views.get(camera)
    }

    pub fn is_empty(&self) -> bool {
        self.views.values().all(|v| v.is_empty())
    }

    /// Displace every detection in one camera's view by a fixed pixel offset.
    pub fn shift_view(&mut self, camera: &str, shift: Vector2<f64>) {
        if let Some(detections) = self.views.get_mut(camera) {
            for d in detections.values_mut() {
                d.pixel += shift;
            }
        }
    }

    /// Sites with positive confidence in at least one camera, in name order.
    pub fn active_sites(&self) -> Vec<String> {
        let mut out = std::collections::BTreeSet::new();
        for view in self.views.values() {
            for (site, det) in view {
                if det.confidence > 0.0 {
                    out.insert(site.clone());
                }
            }
        }
        out.into_iter().collect()
    }

    /// Keep only the listed sites, in every camera.
    pub fn restricted_to_sites(&self, sites: &[String]) -> MultiviewFrame {
        let keep: std::collections::HashSet<&String> = sites.iter().collect();
        MultiviewFrame {
            views: self
                .views
                .iter()
                .map(|(c, v)| {
                    (
                        c.clone(),
                        v.iter()
                            .filter(|(s, _)| keep.contains(s))
                            .map(|(s, d)| (s.clone(), *d))
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn without_camera(&self, camera: &str) -> MultiviewFrame {
        MultiviewFrame {
            views: self
                .views
                .iter()
                .filter(|(c, _)| c.as_str() != camera)
                .map(|(c, v)| (c.clone(), v.clone()))
                .collect(),
        }
    }

    /// Zeroes confidences below `cutoff` or outside the owning camera's image
    /// bounds. Returns the number of detections zeroed.
    pub fn preprocess(&mut self, rig: &CameraRig, cutoff: f64) -> Result<usize> {
        let mut zeroed = 0;
        for (camera_id, view) in self.views.iter_mut() {
            let cam = rig.camera(camera_id)?;
            for det in view.values_mut() {
                if det.confidence > 0.0 && (det.confidence < cutoff || !cam.in_bounds(&det.pixel)) {
                    det.confidence = 0.0;
                    zeroed += 1;
                }
            }
        }
        Ok(zeroed)
    }

    /// Multiplies every detection confidence by a per-(camera, site) factor,
    /// e.g. consensus weights from robust triangulation.
    pub fn apply_weights(&mut self, factors: &BTreeMap<(String, String), f64>) {
        for (camera, view) in self.views.iter_mut() {
            for (site, det) in view.iter_mut() {
                if let Some(f) = factors.get(&(camera.clone(), site.clone())) {
                    det.confidence *= f;
                }
            }
        }
    }
}

/// Which parameters a residual block differentiates against. Column order:
/// active q coordinates, active scale groups, then (x, y, z) offset
/// components per active offset site.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    pub mask: ParamMask,
    /// Site ids whose marker offsets are free, ascending.
    pub offset_sites: Vec<usize>,
}

impl ActiveSet {
    pub fn new(mask: ParamMask, mut offset_sites: Vec<usize>) -> Self {
        offset_sites.sort_unstable();
        offset_sites.dedup();
        ActiveSet { mask, offset_sites }
    }

    pub fn n_params(&self) -> usize {
        self.mask.active_count() + 3 * self.offset_sites.len()
    }

    /// Index of the first offset column.
    pub fn offset_col_base(&self) -> usize {
        self.mask.active_count()
    }

    /// Adds a packed step to the pose. Does not clamp.
    pub fn apply_step(&self, pose: &PoseState, delta: &DVector<f64>) -> PoseState {
        let mut out = pose.clone();
        let mut col = 0;
        for (i, &active) in self.mask.q.iter().enumerate() {
            if active {
                out.q[i] += delta[col];
                col += 1;
            }
        }
        for (g, &active) in self.mask.scales.iter().enumerate() {
            if active {
                // Scales stay strictly positive.
                out.scales[g] = (out.scales[g] + delta[col]).max(1e-3);
                col += 1;
            }
        }
        for &site in &self.offset_sites {
            for axis in 0..3 {
                out.offsets[site][axis] += delta[col];
                col += 1;
            }
        }
        out
    }
}

/// Stacked weighted residuals with their Jacobian over the active parameters.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    /// √w-scaled residual values; `values.norm_squared()` is the objective.
    pub values: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    /// The weight w applied to each row.
    pub weights: DVector<f64>,
    /// (camera, site) pairs zero-weighted because the point was behind the camera.
    pub behind_camera: Vec<(String, String)>,
}

impl ResidualBlock {
    pub fn loss(&self) -> f64 {
        self.values.norm_squared()
    }

    pub fn stack(blocks: Vec<ResidualBlock>) -> ResidualBlock {
        let rows: usize = blocks.iter().map(|b| b.values.len()).sum();
        let cols = blocks.first().map_or(0, |b| b.jacobian.ncols());
        let mut values = DVector::zeros(rows);
        let mut jacobian = DMatrix::zeros(rows, cols);
        let mut weights = DVector::zeros(rows);
        let mut behind = Vec::new();
        let mut at = 0;
        for b in blocks {
            let n = b.values.len();
            values.rows_mut(at, n).copy_from(&b.values);
            jacobian.rows_mut(at, n).copy_from(&b.jacobian);
            weights.rows_mut(at, n).copy_from(&b.weights);
            behind.extend(b.behind_camera);
            at += n;
        }
        ResidualBlock { values, jacobian, weights, behind_camera: behind }
    }
}

fn offset_reg_rows(
    pose: &PoseState,
    active: &ActiveSet,
    reg_weight: f64,
    rows: &mut Vec<(f64, f64, Vec<(usize, f64)>)>,
) {
    let sqrt_reg = reg_weight.sqrt();
    let base = active.offset_col_base();
    for (slot, &site) in active.offset_sites.iter().enumerate() {
        for axis in 0..3 {
            let col = base + 3 * slot + axis;
            rows.push((
                sqrt_reg * pose.offsets[site][axis],
                reg_weight,
                vec![(col, sqrt_reg)],
            ));
        }
    }
}

/// Residuals for the 3D marker objective: `√w·(p_model − p_target)` rows per
/// site axis plus `√λ_reg·δ` rows per active offset component.
pub fn marker_residuals(
    skel: &Skeleton,
    pose: &PoseState,
    frame: &MarkerFrame,
    active: &ActiveSet,
    reg_weight: f64,
) -> Result<ResidualBlock> {
    if reg_weight < 0.0 {
        return Err(Error::InvalidConfig("negative offset regularization weight".into()));
    }
    let fk = skeleton::fk(skel, pose)?;
    let sites: Vec<String> = frame.targets.keys().cloned().collect();
    let site_ids: Vec<usize> = sites.iter().map(|s| skel.site_id(s)).collect::<Result<_>>()?;

    let n_mask = active.mask.active_count();
    let pose_jac = if n_mask > 0 {
        skeleton::pose_jacobian(skel, pose, &sites, &active.mask)?
    } else {
        DMatrix::zeros(3 * sites.len(), 0)
    };
    let n_params = active.n_params();
    let n_marker_rows = 3 * sites.len();
    let n_reg_rows = 3 * active.offset_sites.len();

    let mut values = DVector::zeros(n_marker_rows + n_reg_rows);
    let mut jacobian = DMatrix::zeros(n_marker_rows + n_reg_rows, n_params);
    let mut weights = DVector::zeros(n_marker_rows + n_reg_rows);

    let offset_slot: std::collections::HashMap<usize, usize> = active
        .offset_sites
        .iter()
        .enumerate()
        .map(|(slot, &s)| (s, slot))
        .collect();

    for (r, (name, &sid)) in sites.iter().zip(site_ids.iter()).enumerate() {
        let w = frame.confidence(name);
        let sw = w.sqrt();
        let model = fk.site_positions[sid];
        let target = frame.targets[name];
        let body = skel.sites()[sid].body;
        let rot = &fk.body_rotations[body];
        for axis in 0..3 {
            let row = 3 * r + axis;
            values[row] = sw * (model[axis] - target[axis]);
            weights[row] = w;
            for c in 0..n_mask {
                jacobian[(row, c)] = sw * pose_jac[(row, c)];
            }
            // ∂p/∂δ is the body world rotation; only this site's own columns.
            if let Some(&slot) = offset_slot.get(&sid) {
                for comp in 0..3 {
                    jacobian[(row, n_mask + 3 * slot + comp)] = sw * rot[(axis, comp)];
                }
            }
        }
    }

    let mut reg = Vec::new();
    offset_reg_rows(pose, active, reg_weight, &mut reg);
    for (i, (val, w, cols)) in reg.into_iter().enumerate() {
        let row = n_marker_rows + i;
        values[row] = val;
        weights[row] = w;
        for (c, j) in cols {
            jacobian[(row, c)] = j;
        }
    }

    Ok(ResidualBlock { values, jacobian, weights, behind_camera: Vec::new() })
}

/// Residuals for the multiview reprojection objective:
/// `√w·(π_c(p) − y)` rows per pixel axis, plus offset regularization when
/// offsets are active. Sites behind a camera contribute zero rows and are
/// flagged.
pub fn reprojection_residuals(
    skel: &Skeleton,
    pose: &PoseState,
    frame: &MultiviewFrame,
    rig: &CameraRig,
    active: &ActiveSet,
    reg_weight: f64,
) -> Result<ResidualBlock> {
    if reg_weight < 0.0 {
        return Err(Error::InvalidConfig("negative offset regularization weight".into()));
    }
    let fk = skeleton::fk(skel, pose)?;
    // One shared site list covering every detected site, for a single Jacobian pass.
    let sites: Vec<String> = {
        let mut set = std::collections::BTreeSet::new();
        for view in frame.views.values() {
            set.extend(view.keys().cloned());
        }
        set.into_iter().collect()
    };
    let site_ids: Vec<usize> = sites.iter().map(|s| skel.site_id(s)).collect::<Result<_>>()?;
    let site_row: std::collections::HashMap<&str, usize> =
        sites.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let n_mask = active.mask.active_count();
    let pose_jac = if n_mask > 0 {
        skeleton::pose_jacobian(skel, pose, &sites, &active.mask)?
    } else {
        DMatrix::zeros(3 * sites.len(), 0)
    };
    let n_params = active.n_params();
    let offset_slot: std::collections::HashMap<usize, usize> = active
        .offset_sites
        .iter()
        .enumerate()
        .map(|(slot, &s)| (s, slot))
        .collect();

    let mut pairs = 0usize;
    for view in frame.views.values() {
        pairs += view.values().filter(|d| d.confidence > 0.0).count();
    }
    let n_reg_rows = 3 * active.offset_sites.len();
    let mut values = DVector::zeros(2 * pairs + n_reg_rows);
    let mut jacobian = DMatrix::zeros(2 * pairs + n_reg_rows, n_params);
    let mut weights = DVector::zeros(2 * pairs + n_reg_rows);
    let mut behind = Vec::new();

    let mut at = 0usize;
    for (camera_id, view) in &frame.views {
        let cam = rig.camera(camera_id)?;
        for (site, det) in view {
            if det.confidence <= 0.0 {
                continue;
            }
            let r = site_row[site.as_str()];
            let sid = site_ids[r];
            let point = fk.site_positions[sid];
            let proj = cam.project(&point);
            if !proj.valid {
                // Transient infeasibility mid-optimization: zero-weight, flag, move on.
                behind.push((camera_id.clone(), site.clone()));
                at += 2;
                continue;
            }
            let w = det.confidence;
            let sw = w.sqrt();
            let px_jac = cam.projection_jacobian(&point);
            let body = skel.sites()[sid].body;
            let rot = &fk.body_rotations[body];
            for axis in 0..2 {
                let row = at + axis;
                values[row] = sw * (proj.pixel[axis] - det.pixel[axis]);
                weights[row] = w;
                for c in 0..n_mask {
                    let mut dot = 0.0;
                    for k in 0..3 {
                        dot += px_jac[(axis, k)] * pose_jac[(3 * r + k, c)];
                    }
                    jacobian[(row, c)] = sw * dot;
                }
                if let Some(&slot) = offset_slot.get(&sid) {
                    for comp in 0..3 {
                        let mut dot = 0.0;
                        for k in 0..3 {
                            dot += px_jac[(axis, k)] * rot[(k, comp)];
                        }
                        jacobian[(row, n_mask + 3 * slot + comp)] = sw * dot;
                    }
                }
            }
            at += 2;
        }
    }

    let mut reg = Vec::new();
    offset_reg_rows(pose, active, reg_weight, &mut reg);
    for (i, (val, w, cols)) in reg.into_iter().enumerate() {
        let row = 2 * pairs + i;
        values[row] = val;
        weights[row] = w;
        for (c, j) in cols {
            jacobian[(row, c)] = j;
        }
    }

    Ok(ResidualBlock { values, jacobian, weights, behind_camera: behind })
}
