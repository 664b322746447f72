//! Damped Levenberg-Marquardt engine with staged parameter activation, warm
//! starting, and hard limit clamping after every step.
//!
//! Each stage activates a subset of parameters (q coordinates, scale groups,
//! marker offsets) and optionally restricts the marker set. Steps solve
//! `(JᵀJ + λ·diag(JᵀJ))·Δ = −Jᵀr`; a step is accepted iff the true loss
//! decreases. Rejected steps double λ, accepted steps decay it by 0.9, so the
//! solver approaches Gauss-Newton rates once steps keep succeeding; a small
//! floor relative to the stage's configured base value keeps the normal
//! equations regularized.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::cameras::{self, CameraRig, Observation};
use crate::error::{Error, Result};
use crate::residuals::{
    self, ActiveSet, MarkerFrame, MultiviewFrame, ResidualBlock,
};
use crate::skeleton::{self, ParamMask, PoseState, Skeleton};

/// Detections below this confidence are zeroed during multiview preprocessing.
pub const CONFIDENCE_CUTOFF: f64 = 0.25;

/// Default stiffness of the soft joint-limit penalty.
pub const DEFAULT_LIMIT_STIFFNESS: f64 = 10.0;

/// Which generalized coordinates a stage optimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QSelection {
    All,
    /// The root 6-DOF joint only.
    RootOnly,
    /// No q coordinates (e.g. an offsets-only refinement stage).
    None,
    /// Explicit per-coordinate flags.
    Custom(Vec<bool>),
}

impl QSelection {
    fn mask(&self, skel: &Skeleton) -> Result<Vec<bool>> {
        Ok(match self {
            QSelection::All => vec![true; skel.nq()],
            QSelection::RootOnly => ParamMask::root_only(skel).q,
            QSelection::None => vec![false; skel.nq()],
            QSelection::Custom(flags) => {
                if flags.len() != skel.nq() {
                    return Err(Error::InvalidConfig(format!(
                        "custom q selection has {} flags, skeleton has nq {}",
                        flags.len(),
                        skel.nq()
                    )));
                }
                flags.clone()
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub iterations: usize,
    pub active_q: QSelection,
    pub active_scales: bool,
    pub active_offsets: bool,
    /// Restrict the residuals to these sites (default: all observed sites).
    pub marker_subset: Option<Vec<String>>,
    /// Base damping λ; the adaptive damping starts here and is floored at a
    /// small fraction of it.
    pub damping: f64,
    /// λ_reg applied to active marker offsets.
    pub offset_reg_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    /// Starting pose; the neutral pose (limit midpoints, zeros elsewhere)
    /// when absent.
    pub pose: Option<PoseState>,
    /// Recenter the root translation on the target centroid before solving.
    pub recenter_root: bool,
}

impl Default for WarmStart {
    fn default() -> Self {
        WarmStart { pose: None, recenter_root: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveConfig {
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub warm_start: WarmStart,
    /// Early-exit threshold on the relative loss decrease.
    pub convergence_tol: f64,
    pub max_step_norm: Option<f64>,
    /// Stiffness of the soft joint-limit penalty.
    pub limit_stiffness: f64,
}

impl SolveConfig {
    pub fn validate(&self, skel: &Skeleton) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidConfig("config has no stages".into()));
        }
        for stage in &self.stages {
            if stage.iterations == 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage '{}' has an empty iteration budget",
                    stage.name
                )));
            }
            if stage.damping < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "stage '{}' has negative damping",
                    stage.name
                )));
            }
            if stage.offset_reg_weight < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "stage '{}' has negative offset regularization",
                    stage.name
                )));
            }
            stage.active_q.mask(skel)?;
            if let Some(subset) = &stage.marker_subset {
                for site in subset {
                    skel.site_id(site)?;
                }
            }
        }
        if let Some(pose) = &self.warm_start.pose {
            pose.check(skel)?;
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    /// Loss after this iteration (unchanged when the step was rejected).
    pub loss: f64,
    pub step_norm: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTrace {
    pub name: String,
    pub iterations: Vec<IterationTrace>,
    pub end_pose: PoseState,
    pub end_loss: f64,
    pub any_accepted: bool,
    /// True when the stage exited before its budget at a stationary point.
    pub stationary: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub final_pose: PoseState,
    pub stages: Vec<StageTrace>,
    pub converged: bool,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

/// One damped LM step on a prepared residual block.
///
/// Parameters whose Jacobian column is identically zero are held fixed
/// instead of making the system singular. Returns the clamped candidate pose,
/// the model-predicted loss reduction, and the step norm.
pub fn lm_step(
    skel: &Skeleton,
    block: &ResidualBlock,
    pose: &PoseState,
    active: &ActiveSet,
    damping: f64,
    max_step_norm: Option<f64>,
) -> Result<(PoseState, f64, f64)> {
    let j = &block.jacobian;
    let jtj = j.transpose() * j;
    let jtr = j.transpose() * &block.values;
    let n = jtj.nrows();
    let mut damped = jtj.clone();
    for i in 0..n {
        if jtj[(i, i)] == 0.0 {
            damped[(i, i)] = 1.0;
        } else {
            damped[(i, i)] += damping * jtj[(i, i)];
        }
    }
    let chol = damped.cholesky().ok_or(Error::SingularStep)?;
    let mut delta: DVector<f64> = chol.solve(&(-&jtr));
    let mut norm = delta.norm();
    if let Some(cap) = max_step_norm {
        if norm > cap {
            delta *= cap / norm;
            norm = cap;
        }
    }
    let predicted = -2.0 * jtr.dot(&delta) - (jtj * &delta).dot(&delta);
    let candidate = skeleton::clamp_to_limits(skel, &active.apply_step(pose, &delta))?;
    Ok((candidate, predicted, norm))
}

/// Appends one-sided quadratic limit-penalty rows for violated, q-active
/// coordinates: value `√(k/2)·v`, so the squared norm adds `½·k·v²`.
fn limit_penalty_rows(
    skel: &Skeleton,
    pose: &PoseState,
    active: &ActiveSet,
    stiffness: f64,
    block: ResidualBlock,
) -> ResidualBlock {
    if stiffness == 0.0 {
        return block;
    }
    let half_k = (stiffness / 2.0).sqrt();
    let mut rows: Vec<(usize, f64)> = Vec::new(); // (active col, violation)
    let mut col = 0;
    for (i, dof) in skel.dofs().iter().enumerate() {
        if !active.mask.q[i] {
            continue;
        }
        if let Some((lo, hi)) = dof.limit {
            let v = if pose.q[i] > hi {
                pose.q[i] - hi
            } else if pose.q[i] < lo {
                pose.q[i] - lo
            } else {
                0.0
            };
            if v != 0.0 {
                rows.push((col, v));
            }
        }
        col += 1;
    }
    if rows.is_empty() {
        return block;
    }
    let n_params = block.jacobian.ncols();
    let mut extra_values = DVector::zeros(rows.len());
    let mut extra_jac = DMatrix::zeros(rows.len(), n_params);
    let mut extra_w = DVector::zeros(rows.len());
    for (r, (c, v)) in rows.into_iter().enumerate() {
        extra_values[r] = half_k * v;
        extra_jac[(r, c)] = half_k;
        extra_w[r] = stiffness;
    }
    ResidualBlock::stack(vec![
        block,
        ResidualBlock {
            values: extra_values,
            jacobian: extra_jac,
            weights: extra_w,
            behind_camera: Vec::new(),
        },
    ])
}

/// A residual assembly the staged solver can drive.
pub trait Objective {
    fn skeleton(&self) -> &Skeleton;

    /// Residual block for the stage's marker subset and active parameters.
    fn block(&self, pose: &PoseState, stage: &StageSpec, active: &ActiveSet)
        -> Result<ResidualBlock>;

    /// Site ids observed under the stage's subset, for offset activation.
    fn observed_sites(&self, stage: &StageSpec) -> Result<Vec<usize>>;

    /// World-frame target centroid for root recentering, if available.
    fn target_centroid(&self) -> Option<(Vec<String>, Vector3<f64>)>;
}

/// Eq-style 3D marker objective with soft limit penalty.
pub struct MarkerObjective<'a> {
    pub skel: &'a Skeleton,
    pub frame: &'a MarkerFrame,
    pub limit_stiffness: f64,
}

impl<'a> MarkerObjective<'a> {
    pub fn new(skel: &'a Skeleton, frame: &'a MarkerFrame) -> Self {
        MarkerObjective { skel, frame, limit_stiffness: DEFAULT_LIMIT_STIFFNESS }
    }

    fn stage_frame(&self, stage: &StageSpec) -> MarkerFrame {
        match &stage.marker_subset {
            Some(subset) => self.frame.restricted_to(subset),
            None => self.frame.clone(),
        }
    }
}

impl Objective for MarkerObjective<'_> {
    fn skeleton(&self) -> &Skeleton {
        self.skel
    }

    fn block(
        &self,
        pose: &PoseState,
        stage: &StageSpec,
        active: &ActiveSet,
    ) -> Result<ResidualBlock> {
        let frame = self.stage_frame(stage);
        let block = residuals::marker_residuals(
            self.skel,
            pose,
            &frame,
            active,
            stage.offset_reg_weight,
        )?;
        Ok(limit_penalty_rows(self.skel, pose, active, self.limit_stiffness, block))
    }

    fn observed_sites(&self, stage: &StageSpec) -> Result<Vec<usize>> {
        self.stage_frame(stage)
            .active_sites()
            .iter()
            .map(|s| self.skel.site_id(s))
            .collect()
    }

    fn target_centroid(&self) -> Option<(Vec<String>, Vector3<f64>)> {
        let sites = self.frame.active_sites();
        if sites.is_empty() {
            return None;
        }
        let mut sum = Vector3::zeros();
        for s in &sites {
            sum += self.frame.targets()[s];
        }
        Some((sites.clone(), sum / sites.len() as f64))
    }
}

/// Multi-camera reprojection objective with soft limit penalty.
pub struct ReprojectionObjective<'a> {
    pub skel: &'a Skeleton,
    pub frame: &'a MultiviewFrame,
    pub rig: &'a CameraRig,
    pub limit_stiffness: f64,
    /// Kernel width for the triangulation used by root recentering.
    pub triangulation_sigma_px: f64,
}

impl<'a> ReprojectionObjective<'a> {
    pub fn new(skel: &'a Skeleton, frame: &'a MultiviewFrame, rig: &'a CameraRig) -> Self {
        ReprojectionObjective {
            skel,
            frame,
            rig,
            limit_stiffness: DEFAULT_LIMIT_STIFFNESS,
            triangulation_sigma_px: 10.0,
        }
    }

    fn stage_frame(&self, stage: &StageSpec) -> MultiviewFrame {
        match &stage.marker_subset {
            Some(subset) => self.frame.restricted_to_sites(subset),
            None => self.frame.clone(),
        }
    }

    /// Per-site robust triangulations of the current detections.
    pub fn triangulated_sites(&self) -> BTreeMap<String, Vector3<f64>> {
        let mut out = BTreeMap::new();
        for site in self.frame.active_sites() {
            let mut obs = Vec::new();
            for (camera, view) in self.frame.views() {
                if let Some(det) = view.get(&site) {
                    if det.confidence > 0.0 {
                        obs.push(Observation {
                            camera: camera.clone(),
                            pixel: det.pixel,
                            confidence: det.confidence,
                        });
                    }
                }
            }
            if let Ok((point, _)) =
                cameras::robust_triangulate(self.rig, &obs, self.triangulation_sigma_px)
            {
                out.insert(site, point);
            }
        }
        out
    }
}

impl Objective for ReprojectionObjective<'_> {
    fn skeleton(&self) -> &Skeleton {
        self.skel
    }

    fn block(
        &self,
        pose: &PoseState,
        stage: &StageSpec,
        active: &ActiveSet,
    ) -> Result<ResidualBlock> {
        let frame = self.stage_frame(stage);
        let block = residuals::reprojection_residuals(
            self.skel,
            pose,
            &frame,
            self.rig,
            active,
            stage.offset_reg_weight,
        )?;
        Ok(limit_penalty_rows(self.skel, pose, active, self.limit_stiffness, block))
    }

    fn observed_sites(&self, stage: &StageSpec) -> Result<Vec<usize>> {
        self.stage_frame(stage)
            .active_sites()
            .iter()
            .map(|s| self.skel.site_id(s))
            .collect()
    }

    fn target_centroid(&self) -> Option<(Vec<String>, Vector3<f64>)> {
        let points = self.triangulated_sites();
        if points.is_empty() {
            return None;
        }
        let sites: Vec<String> = points.keys().cloned().collect();
        let sum: Vector3<f64> = points.values().sum();
        Some((sites, sum / points.len() as f64))
    }
}

fn recenter_root(obj: &dyn Objective, pose: &PoseState) -> Result<PoseState> {
    let skel = obj.skeleton();
    let Some((sites, target_centroid)) = obj.target_centroid() else {
        return Ok(pose.clone());
    };
    let fk = skeleton::fk(skel, pose)?;
    let mut model_centroid = Vector3::zeros();
    for s in &sites {
        model_centroid += fk.site_positions[skel.site_id(s)?];
    }
    model_centroid /= sites.len() as f64;
    let mut out = pose.clone();
    let r = skel.root_q_offset();
    let shift = target_centroid - model_centroid;
    out.q[r] += shift.x;
    out.q[r + 1] += shift.y;
    out.q[r + 2] += shift.z;
    Ok(out)
}

/// Runs the staged schedule. Stages execute in order, each warm-started from
/// the previous stage's result. Every accepted pose satisfies the joint
/// limits (hard clamp after each step).
pub fn run_staged(obj: &dyn Objective, config: &SolveConfig) -> Result<SolveReport> {
    let started = Instant::now();
    let skel = obj.skeleton();
    config.validate(skel)?;

    let mut pose = config
        .warm_start
        .pose
        .clone()
        .unwrap_or_else(|| PoseState::neutral(skel));
    pose = skeleton::clamp_to_limits(skel, &pose)?;
    if config.warm_start.recenter_root {
        pose = recenter_root(obj, &pose)?;
    }

    let mut stages = Vec::with_capacity(config.stages.len());
    let mut converged = true;

    for stage in &config.stages {
        let mask = ParamMask {
            q: stage.active_q.mask(skel)?,
            scales: vec![stage.active_scales; skel.scale_groups().len()],
        };
        let offset_sites = if stage.active_offsets {
            obj.observed_sites(stage)?
        } else {
            Vec::new()
        };
        let active = ActiveSet::new(mask, offset_sites);
        if active.n_params() == 0 {
            return Err(Error::InvalidConfig(format!(
                "stage '{}' activates no parameters",
                stage.name
            )));
        }

        let mut block = obj.block(&pose, stage, &active)?;
        let mut loss = block.loss();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }

        let mut damping = stage.damping;
        let mut trace = Vec::with_capacity(stage.iterations);
        let mut any_accepted = false;
        let mut stationary = false;
        let mut small_streak = 0u32;

        for iteration in 0..stage.iterations {
            if loss <= 1e-24 {
                stationary = true;
                break;
            }
            let step = lm_step(skel, &block, &pose, &active, damping, config.max_step_norm);
            let (candidate, _predicted, step_norm) = match step {
                Ok(s) => s,
                Err(Error::SingularStep) => {
                    damping *= 2.0;
                    trace.push(IterationTrace {
                        iteration,
                        loss,
                        step_norm: 0.0,
                        damping,
                        accepted: false,
                    });
                    continue;
                }
                Err(e) => return Err(e),
            };
            if step_norm < 1e-14 {
                stationary = true;
                break;
            }
            let cand_block = obj.block(&candidate, stage, &active)?;
            let cand_loss = cand_block.loss();
            let accepted = cand_loss.is_finite() && cand_loss < loss;
            if accepted {
                let rel = (loss - cand_loss) / loss.max(f64::MIN_POSITIVE);
                pose = candidate;
                block = cand_block;
                loss = cand_loss;
                damping = (damping * 0.9).max(stage.damping * 1e-6);
                any_accepted = true;
                if rel < config.convergence_tol {
                    small_streak += 1;
                    if small_streak >= 10 {
                        trace.push(IterationTrace {
                            iteration,
                            loss,
                            step_norm,
                            damping,
                            accepted,
                        });
                        break;
                    }
                } else {
                    small_streak = 0;
                }
            } else {
                damping *= 2.0;
            }
            trace.push(IterationTrace { iteration, loss, step_norm, damping, accepted });
        }

        if !any_accepted && !stationary {
            converged = false;
        }
        stages.push(StageTrace {
            name: stage.name.clone(),
            iterations: trace,
            end_pose: pose.clone(),
            end_loss: loss,
            any_accepted,
            stationary,
        });
    }

    let final_loss = stages.last().map_or(0.0, |s| s.end_loss);
    Ok(SolveReport {
        final_pose: pose,
        stages,
        converged,
        final_loss,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn stage(
    name: &str,
    iterations: usize,
    active_q: QSelection,
    active_scales: bool,
    active_offsets: bool,
    marker_subset: Option<Vec<String>>,
    damping: f64,
    offset_reg_weight: f64,
) -> StageSpec {
    StageSpec {
        name: name.to_string(),
        iterations,
        active_q,
        active_scales,
        active_offsets,
        marker_subset,
        damping,
        offset_reg_weight,
    }
}

/// Monocular 3D-marker schedule: 400 iterations split evenly across root
/// positioning on the core markers, full pose, and joint pose + scale +
/// offset refinement, all at base damping 3.0 with offset regularization 20.
pub fn default_monocular_config(skel: &Skeleton) -> Result<SolveConfig> {
    let core = skel.core_sites();
    if core.is_empty() {
        return Err(Error::InvalidConfig(
            "skeleton designates no core markers for the root stage".into(),
        ));
    }
    Ok(SolveConfig {
        stages: vec![
            stage("root", 133, QSelection::RootOnly, false, false, Some(core), 3.0, 20.0),
            stage("pose", 133, QSelection::All, false, false, None, 3.0, 20.0),
            stage("pose+scale+offsets", 134, QSelection::All, true, true, None, 3.0, 20.0),
        ],
        warm_start: WarmStart::default(),
        convergence_tol: 1e-10,
        max_step_norm: None,
        limit_stiffness: DEFAULT_LIMIT_STIFFNESS,
    })
}

/// Multiview reprojection schedule: 500 iterations split 30% root / 50% full
/// pose / 20% pose + scales at base damping 1.0, followed by a 20-iteration
/// per-frame offsets-only refinement with offset regularization 10⁴.
pub fn default_multiview_config(skel: &Skeleton) -> Result<SolveConfig> {
    let core = skel.core_sites();
    if core.is_empty() {
        return Err(Error::InvalidConfig(
            "skeleton designates no core markers for the root stage".into(),
        ));
    }
    Ok(SolveConfig {
        stages: vec![
            stage("root", 150, QSelection::RootOnly, false, false, Some(core), 1.0, 20.0),
            stage("pose", 250, QSelection::All, false, false, None, 1.0, 20.0),
            stage("pose+scale", 100, QSelection::All, true, false, None, 1.0, 20.0),
            stage("offsets", 20, QSelection::None, false, true, None, 1.0, 1e4),
        ],
        warm_start: WarmStart::default(),
        convergence_tol: 1e-10,
        max_step_norm: None,
        limit_stiffness: DEFAULT_LIMIT_STIFFNESS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{unit_y, unit_z, JointKind, Site};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    /// 1-DOF linear test problem r(q) = q_slide − target on a slide joint.
    fn slide_problem() -> (Skeleton, MarkerFrame) {
        let skel = Skeleton::chain(
            Vector3::new(0.0, 0.0, 0.0),
            vec![JointKind::Slide { axis: crate::skeleton::unit_x(), limits: None }],
        )
        .unwrap();
        let frame = MarkerFrame::new([(
            "tip0".to_string(),
            Vector3::new(5.0, 0.0, 0.0),
            1.0,
        )])
        .unwrap();
        (skel, frame)
    }

    fn slide_active(skel: &Skeleton) -> ActiveSet {
        let mut q = vec![false; skel.nq()];
        q[6] = true;
        ActiveSet::new(ParamMask { q, scales: vec![] }, vec![])
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let (skel, _) = slide_problem();
        let frame = MarkerFrame::new([(
            "tip0".to_string(),
            Vector3::new(0.0, 0.0, 0.0),
            1.0,
        )])
        .unwrap();
        let pose = PoseState::zero(&skel);
        let active = slide_active(&skel);
        let obj = MarkerObjective { skel: &skel, frame: &frame, limit_stiffness: 0.0 };
        let stage = stage("s", 1, QSelection::Custom(active.mask.q.clone()), false, false, None, 0.0, 0.0);
        let block = obj.block(&pose, &stage, &active).unwrap();
        let (candidate, _, step_norm) = lm_step(&skel, &block, &pose, &active, 0.0, None).unwrap();
        assert_eq!(candidate.q, pose.q);
        assert!(step_norm < 1e-12);
    }

    #[test]
    fn undamped_newton_solves_linear_problem_in_one_step() {
        let (skel, frame) = slide_problem();
        let pose = PoseState::zero(&skel);
        let active = slide_active(&skel);
        let obj = MarkerObjective { skel: &skel, frame: &frame, limit_stiffness: 0.0 };
        let stage = stage("s", 1, QSelection::Custom(active.mask.q.clone()), false, false, None, 0.0, 0.0);
        let block = obj.block(&pose, &stage, &active).unwrap();
        let (candidate, _, _) = lm_step(&skel, &block, &pose, &active, 0.0, None).unwrap();
        assert_relative_eq!(candidate.q[6], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn damped_step_matches_closed_form() {
        let (skel, frame) = slide_problem();
        let pose = PoseState::zero(&skel);
        let active = slide_active(&skel);
        let obj = MarkerObjective { skel: &skel, frame: &frame, limit_stiffness: 0.0 };
        let stage = stage("s", 1, QSelection::Custom(active.mask.q.clone()), false, false, None, 3.0, 0.0);
        let block = obj.block(&pose, &stage, &active).unwrap();
        let (candidate, _, _) = lm_step(&skel, &block, &pose, &active, 3.0, None).unwrap();
        // (1 + 3·1)·Δ = 5 for the slide coordinate alone; the marker rows for
        // the y/z axes carry zero residual and do not perturb it.
        assert_relative_eq!(candidate.q[6], 1.25, epsilon = 1e-12);
    }

    fn chain_for_roundtrip() -> Skeleton {
        Skeleton::chain(
            Vector3::new(0.25, 0.0, 0.0),
            vec![
                JointKind::Hinge { axis: unit_z(), limits: Some((-1.3, 1.3)) },
                JointKind::Hinge { axis: unit_y(), limits: Some((-1.3, 1.3)) },
                JointKind::Hinge { axis: unit_z(), limits: Some((-1.3, 1.3)) },
            ],
        )
        .unwrap()
    }

    #[test]
    fn synthetic_roundtrip_recovers_pose() {
        let skel = chain_for_roundtrip();
        let mut truth = PoseState::zero(&skel);
        truth.q[6] = 0.7;
        truth.q[7] = -0.4;
        truth.q[8] = 0.9;
        let fk = skeleton::forward_kinematics(&skel, &truth).unwrap();
        let frame = MarkerFrame::new(fk.into_iter().map(|(n, p)| (n, p, 1.0))).unwrap();
        let obj = MarkerObjective::new(&skel, &frame);
        let config = default_monocular_config(&skel).unwrap();
        let report = run_staged(&obj, &config).unwrap();
        assert!(report.converged);
        for i in 6..skel.nq() {
            assert!(
                (report.final_pose.q[i] - truth.q[i]).abs() < 1e-3,
                "q[{i}] = {} vs {}",
                report.final_pose.q[i],
                truth.q[i]
            );
        }
    }

    #[test]
    fn root_stage_leaves_other_coordinates_bitwise_unchanged() {
        let skel = chain_for_roundtrip();
        let mut truth = PoseState::zero(&skel);
        truth.q[0] = 0.3;
        truth.q[6] = 0.5;
        let fk = skeleton::forward_kinematics(&skel, &truth).unwrap();
        let frame = MarkerFrame::new(fk.into_iter().map(|(n, p)| (n, p, 1.0))).unwrap();
        let mut warm = PoseState::zero(&skel);
        warm.q[6] = 0.123456789;
        let obj = MarkerObjective::new(&skel, &frame);
        let mut config = default_monocular_config(&skel).unwrap();
        config.warm_start.pose = Some(warm.clone());
        config.stages.truncate(1);
        let report = run_staged(&obj, &config).unwrap();
        for i in 6..skel.nq() {
            assert_eq!(report.final_pose.q[i], warm.q[i]);
        }
    }

    #[test]
    fn zero_iteration_budget_is_rejected() {
        let skel = chain_for_roundtrip();
        let mut config = default_monocular_config(&skel).unwrap();
        config.stages[0].iterations = 0;
        assert!(matches!(config.validate(&skel), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn accepted_losses_strictly_decrease_within_each_stage() {
        let skel = chain_for_roundtrip();
        let mut truth = PoseState::zero(&skel);
        truth.q[6] = 1.0;
        truth.q[7] = -0.8;
        let fk = skeleton::forward_kinematics(&skel, &truth).unwrap();
        let frame = MarkerFrame::new(fk.into_iter().map(|(n, p)| (n, p, 1.0))).unwrap();
        let obj = MarkerObjective::new(&skel, &frame);
        let config = default_monocular_config(&skel).unwrap();
        let report = run_staged(&obj, &config).unwrap();
        for stage in &report.stages {
            let mut last = f64::INFINITY;
            for it in stage.iterations.iter().filter(|t| t.accepted) {
                assert!(it.loss < last);
                last = it.loss;
            }
        }
    }

    #[test]
    fn final_pose_respects_limits() {
        let skel = Skeleton::chain(
            Vector3::new(0.25, 0.0, 0.0),
            vec![JointKind::Hinge { axis: unit_z(), limits: Some((-0.2, 0.2)) }],
        )
        .unwrap();
        // Target requires 90 degrees, limit stops at 0.2 rad.
        let mut truth = PoseState::zero(&skel);
        truth.q[6] = std::f64::consts::FRAC_PI_2;
        let fk = skeleton::forward_kinematics(&skel, &truth).unwrap();
        let frame = MarkerFrame::new(fk.into_iter().map(|(n, p)| (n, p, 1.0))).unwrap();
        let obj = MarkerObjective::new(&skel, &frame);
        let mut config = default_monocular_config(&skel).unwrap();
        config.warm_start.recenter_root = false;
        let report = run_staged(&obj, &config).unwrap();
        assert!(skeleton::is_within_limits(&skel, &report.final_pose));
        let clamped = skeleton::clamp_to_limits(&skel, &report.final_pose).unwrap();
        assert_eq!(clamped, report.final_pose);
    }

    #[test]
    fn monocular_defaults_match_reported_constants() {
        let skel = chain_for_roundtrip();
        let config = default_monocular_config(&skel).unwrap();
        assert_eq!(config.total_iterations(), 400);
        assert!(config.stages.iter().all(|s| s.damping == 3.0));
        assert_eq!(config.stages[2].offset_reg_weight, 20.0);
        assert!(!config.stages[1].active_scales);
        assert_eq!(config.stages[0].active_q, QSelection::RootOnly);
    }

    #[test]
    fn multiview_defaults_match_reported_constants() {
        let skel = chain_for_roundtrip();
        let config = default_multiview_config(&skel).unwrap();
        let budgets: Vec<usize> = config.stages.iter().map(|s| s.iterations).collect();
        assert_eq!(budgets, vec![150, 250, 100, 20]);
        assert!(config.stages[..3].iter().all(|s| s.damping == 1.0));
        let last = config.stages.last().unwrap();
        assert_eq!(last.offset_reg_weight, 1e4);
        assert_eq!(last.active_q, QSelection::None);
        assert!(!last.active_scales);
        assert!(last.active_offsets);
    }

    #[test]
    fn missing_core_markers_is_a_config_error() {
        let bodies = vec![crate::skeleton::Body {
            name: "root".into(),
            parent: None,
            local_translation: Vector3::zeros(),
            joint: JointKind::FreeRoot,
        }];
        let sites = vec![Site {
            name: "s".into(),
            body: 0,
            local_offset: Vector3::zeros(),
            core: false,
        }];
        let skel = Skeleton::new(bodies, sites, vec![]).unwrap();
        assert!(matches!(default_monocular_config(&skel), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn determinism_identical_reports() {
        let skel = chain_for_roundtrip();
        let mut truth = PoseState::zero(&skel);
        truth.q[6] = 0.6;
        let fk = skeleton::forward_kinematics(&skel, &truth).unwrap();
        let frame = MarkerFrame::new(fk.into_iter().map(|(n, p)| (n, p, 1.0))).unwrap();
        let obj = MarkerObjective::new(&skel, &frame);
        let config = default_monocular_config(&skel).unwrap();
        let a = run_staged(&obj, &config).unwrap();
        let b = run_staged(&obj, &config).unwrap();
        assert_eq!(a.final_pose, b.final_pose);
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
    }
}
