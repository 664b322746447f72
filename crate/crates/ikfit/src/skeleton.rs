//! Scalable articulated kinematic tree: forward kinematics for named marker
//! sites, the pose Jacobian, joint-limit clamping and the soft limit penalty.
//!
//! A [`Skeleton`] is immutable after construction and shared across solver
//! invocations; [`PoseState`] is a value type and no operation mutates its
//! inputs.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector, Matrix3, Unit, UnitVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Dual, Mat3, Real, Vec3};

/// Joint family attached to a body. Generalized-coordinate layout:
/// `FreeRoot` contributes `(tx, ty, tz, rx, ry, rz)` with the rotation as an
/// exponential-map 3-vector, `Ball` contributes an exponential-map 3-vector,
/// `Hinge` and `Slide` contribute one coordinate each.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum JointKind {
    FreeRoot,
    Ball {
        /// Per-component box limits on the exponential-map coordinates.
        limits: [Option<(f64, f64)>; 3],
    },
    Hinge {
        axis: UnitVector3<f64>,
        limits: Option<(f64, f64)>,
    },
    Slide {
        axis: UnitVector3<f64>,
        limits: Option<(f64, f64)>,
    },
}

impl JointKind {
    pub fn dof_count(&self) -> usize {
        match self {
            JointKind::FreeRoot => 6,
            JointKind::Ball { .. } => 3,
            JointKind::Hinge { .. } | JointKind::Slide { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Body {
    pub name: String,
    /// `None` for the root body only.
    pub parent: Option<usize>,
    /// Parent-to-child translation in the parent frame, meters.
    pub local_translation: Vector3<f64>,
    pub joint: JointKind,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Site {
    pub name: String,
    pub body: usize,
    /// Offset in the owning body's frame, meters.
    pub local_offset: Vector3<f64>,
    /// Member of the core-marker set used by root-positioning stages.
    #[serde(default)]
    pub core: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScaleGroup {
    pub name: String,
    pub bodies: Vec<usize>,
}

/// One generalized coordinate.
#[derive(Debug, Clone)]
pub struct Dof {
    pub body: usize,
    /// Index of this coordinate within its joint.
    pub component: usize,
    pub limit: Option<(f64, f64)>,
    /// True for translational coordinates (meters), false for rotational (radians).
    pub translational: bool,
}

#[derive(Debug, Clone)]
pub struct Skeleton {
    bodies: Vec<Body>,
    sites: Vec<Site>,
    scale_groups: Vec<ScaleGroup>,
    root: usize,
    dofs: Vec<Dof>,
    /// First q index of each body's joint.
    q_offset: Vec<usize>,
    site_index: HashMap<String, usize>,
    /// Scale group owning each body, if any.
    body_group: Vec<Option<usize>>,
}

impl Skeleton {
    pub fn new(bodies: Vec<Body>, sites: Vec<Site>, scale_groups: Vec<ScaleGroup>) -> Result<Self> {
        if bodies.is_empty() {
            return Err(Error::InvalidSkeleton("no bodies".into()));
        }
        let mut root = None;
        for (i, b) in bodies.iter().enumerate() {
            match b.parent {
                None => {
                    if root.is_some() {
                        return Err(Error::InvalidSkeleton("multiple root bodies".into()));
                    }
                    if !matches!(b.joint, JointKind::FreeRoot) {
                        return Err(Error::InvalidSkeleton(format!(
                            "root body '{}' must carry the free joint",
                            b.name
                        )));
                    }
                    root = Some(i);
                }
                Some(p) => {
                    if p >= i {
                        return Err(Error::InvalidSkeleton(format!(
                            "body '{}' is not in topological order (parent {} >= {})",
                            b.name, p, i
                        )));
                    }
                    if matches!(b.joint, JointKind::FreeRoot) {
                        return Err(Error::InvalidSkeleton(format!(
                            "free joint on non-root body '{}'",
                            b.name
                        )));
                    }
                }
            }
            match &b.joint {
                JointKind::Hinge { axis, .. } | JointKind::Slide { axis, .. } => {
                    if (axis.as_ref().norm() - 1.0).abs() > 1e-9 {
                        return Err(Error::InvalidSkeleton(format!(
                            "joint axis of '{}' is not a unit vector",
                            b.name
                        )));
                    }
                }
                _ => {}
            }
        }
        let root = root.ok_or_else(|| Error::InvalidSkeleton("no root body".into()))?;

        let mut site_index = HashMap::new();
        for (i, s) in sites.iter().enumerate() {
            if s.body >= bodies.len() {
                return Err(Error::InvalidSkeleton(format!(
                    "site '{}' references missing body {}",
                    s.name, s.body
                )));
            }
            if site_index.insert(s.name.clone(), i).is_some() {
                return Err(Error::InvalidSkeleton(format!("duplicate site name '{}'", s.name)));
            }
        }

        let mut body_group = vec![None; bodies.len()];
        for (g, group) in scale_groups.iter().enumerate() {
            for &b in &group.bodies {
                if b >= bodies.len() {
                    return Err(Error::InvalidSkeleton(format!(
                        "scale group '{}' references missing body {}",
                        group.name, b
                    )));
                }
                if body_group[b].is_some() {
                    return Err(Error::InvalidSkeleton(format!(
                        "body '{}' appears in two scale groups",
                        bodies[b].name
                    )));
                }
                body_group[b] = Some(g);
            }
        }

        let mut dofs = Vec::new();
        let mut q_offset = Vec::with_capacity(bodies.len());
        for (i, b) in bodies.iter().enumerate() {
            q_offset.push(dofs.len());
            let limits: Vec<(Option<(f64, f64)>, bool)> = match &b.joint {
                JointKind::FreeRoot => vec![(None, true); 3]
                    .into_iter()
                    .chain(vec![(None, false); 3])
                    .collect(),
                JointKind::Ball { limits } => limits.iter().map(|l| (*l, false)).collect(),
                JointKind::Hinge { limits, .. } => vec![(*limits, false)],
                JointKind::Slide { limits, .. } => vec![(*limits, true)],
            };
            for (component, (limit, translational)) in limits.into_iter().enumerate() {
                if let Some((lo, hi)) = limit {
                    if lo > hi {
                        return Err(Error::InvalidSkeleton(format!(
                            "joint limit on '{}' has lower > upper",
                            b.name
                        )));
                    }
                }
                dofs.push(Dof { body: i, component, limit, translational });
            }
        }

        Ok(Skeleton {
            bodies,
            sites,
            scale_groups,
            root,
            dofs,
            q_offset,
            site_index,
            body_group,
        })
    }

    pub fn nq(&self) -> usize {
        self.dofs.len()
    }

    pub fn bodies(&self) -> &[Body] {
        &self.bodies
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn scale_groups(&self) -> &[ScaleGroup] {
        &self.scale_groups
    }

    pub fn root_index(&self) -> usize {
        self.root
    }

    pub fn dofs(&self) -> &[Dof] {
        &self.dofs
    }

    /// First q index of the given body's joint coordinates.
    pub fn q_offset(&self, body: usize) -> usize {
        self.q_offset[body]
    }

    /// Root translation occupies `q[root_q..root_q+3]`, rotation the next 3.
    pub fn root_q_offset(&self) -> usize {
        self.q_offset[self.root]
    }

    pub fn site_id(&self, name: &str) -> Result<usize> {
        self.site_index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownSite(name.to_string()))
    }

    pub fn body_id(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    pub fn scale_group_of(&self, body: usize) -> Option<usize> {
        self.body_group[body]
    }

    pub fn core_sites(&self) -> Vec<String> {
        self.sites.iter().filter(|s| s.core).map(|s| s.name.clone()).collect()
    }

    /// Replace one site's local offset, returning a new skeleton.
    pub fn with_site_offset(&self, site: usize, local_offset: Vector3<f64>) -> Skeleton {
        let mut out = self.clone();
        out.sites[site].local_offset = local_offset;
        out
    }
}

/// Serializes a `DVector` as a plain JSON array instead of nalgebra's
/// `[data, nrows, ncols]` wrapper, keeping pose files easy to read and write.
mod dvec_serde {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// Generalized coordinates plus per-group scales and per-site marker offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    #[serde(with = "dvec_serde")]
    pub q: DVector<f64>,
    #[serde(with = "dvec_serde")]
    pub scales: DVector<f64>,
    /// Per-site offset δ in the owning body's frame, indexed like `Skeleton::sites`.
    pub offsets: Vec<Vector3<f64>>,
}

impl PoseState {
    pub fn zero(skel: &Skeleton) -> Self {
        PoseState {
            q: DVector::zeros(skel.nq()),
            scales: DVector::from_element(skel.scale_groups().len(), 1.0),
            offsets: vec![Vector3::zeros(); skel.sites().len()],
        }
    }

    /// Neutral configuration: limited coordinates at their range midpoint,
    /// unlimited coordinates at zero. Coincides with the zero pose for
    /// symmetric limits and keeps asymmetric joints centered in their
    /// reachable range.
    pub fn neutral(skel: &Skeleton) -> Self {
        let mut pose = Self::zero(skel);
        for (i, dof) in skel.dofs().iter().enumerate() {
            if let Some((lo, hi)) = dof.limit {
                pose.q[i] = 0.5 * (lo + hi);
            }
        }
        pose
    }

    pub fn check(&self, skel: &Skeleton) -> Result<()> {
        if self.q.len() != skel.nq() {
            return Err(Error::InvalidPose(format!(
                "q has length {}, skeleton has nq {}",
                self.q.len(),
                skel.nq()
            )));
        }
        if self.scales.len() != skel.scale_groups().len() {
            return Err(Error::InvalidPose(format!(
                "{} scale factors for {} scale groups",
                self.scales.len(),
                skel.scale_groups().len()
            )));
        }
        if self.offsets.len() != skel.sites().len() {
            return Err(Error::InvalidPose(format!(
                "{} marker offsets for {} sites",
                self.offsets.len(),
                skel.sites().len()
            )));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidPose("non-positive scale factor".into()));
        }
        Ok(())
    }
}

/// Selects active columns for [`pose_jacobian`]: a flag per generalized
/// coordinate and per scale group.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMask {
    pub q: Vec<bool>,
    pub scales: Vec<bool>,
}

impl ParamMask {
    pub fn all(skel: &Skeleton) -> Self {
        ParamMask {
            q: vec![true; skel.nq()],
            scales: vec![true; skel.scale_groups().len()],
        }
    }

    pub fn q_only(skel: &Skeleton) -> Self {
        ParamMask {
            q: vec![true; skel.nq()],
            scales: vec![false; skel.scale_groups().len()],
        }
    }

    pub fn root_only(skel: &Skeleton) -> Self {
        let mut q = vec![false; skel.nq()];
        let off = skel.root_q_offset();
        for flag in q.iter_mut().skip(off).take(6) {
            *flag = true;
        }
        ParamMask {
            q,
            scales: vec![false; skel.scale_groups().len()],
        }
    }

    pub fn active_count(&self) -> usize {
        self.q.iter().chain(self.scales.iter()).filter(|&&b| b).count()
    }
}

/// World-frame body transforms and site positions for one pose.
#[derive(Debug, Clone)]
pub struct FkResult {
    pub body_rotations: Vec<Matrix3<f64>>,
    pub body_translations: Vec<Vector3<f64>>,
    pub site_positions: Vec<Vector3<f64>>,
}

fn fk_generic<S: Real>(
    skel: &Skeleton,
    q: &[S],
    scales: &[S],
    offsets: &[Vec3<S>],
) -> (Vec<Mat3<S>>, Vec<Vec3<S>>, Vec<Vec3<S>>) {
    let one = S::from_f64(1.0);
    let n = skel.bodies.len();
    let mut rot: Vec<Mat3<S>> = Vec::with_capacity(n);
    let mut trans: Vec<Vec3<S>> = Vec::with_capacity(n);

    for (i, body) in skel.bodies.iter().enumerate() {
        let s = skel.body_group[i].map_or(one, |g| scales[g]);
        let local: Vec3<S> = math::vscale(s, math::vec3_from_f64(&body.local_translation));
        let off = skel.q_offset[i];
        let (r_p, t_p) = match body.parent {
            Some(p) => (rot[p], trans[p]),
            None => (math::identity::<S>(), [S::from_f64(0.0); 3]),
        };
        let (r_w, t_w) = match &body.joint {
            JointKind::FreeRoot => {
                let t = math::vadd(local, [q[off], q[off + 1], q[off + 2]]);
                let r = math::rot_exp([q[off + 3], q[off + 4], q[off + 5]]);
                (r, t)
            }
            JointKind::Ball { .. } => {
                let r_j = math::rot_exp([q[off], q[off + 1], q[off + 2]]);
                (math::mat_mul(&r_p, &r_j), math::vadd(t_p, math::mat_vec(&r_p, local)))
            }
            JointKind::Hinge { axis, .. } => {
                let r_j = math::rot_axis_angle(axis, q[off]);
                (math::mat_mul(&r_p, &r_j), math::vadd(t_p, math::mat_vec(&r_p, local)))
            }
            JointKind::Slide { axis, .. } => {
                let slide: Vec3<S> = math::vscale(q[off], math::vec3_from_f64(axis.as_ref()));
                (r_p, math::vadd(t_p, math::mat_vec(&r_p, math::vadd(local, slide))))
            }
        };
        rot.push(r_w);
        trans.push(t_w);
    }

    let mut site_positions = Vec::with_capacity(skel.sites.len());
    for (k, site) in skel.sites.iter().enumerate() {
        let s = skel.body_group[site.body].map_or(one, |g| scales[g]);
        let local = math::vadd(
            math::vscale(s, math::vec3_from_f64(&site.local_offset)),
            offsets[k],
        );
        site_positions.push(math::vadd(
            trans[site.body],
            math::mat_vec(&rot[site.body], local),
        ));
    }
    (rot, trans, site_positions)
}

fn lift_pose<S: Real>(pose: &PoseState) -> (Vec<S>, Vec<S>, Vec<Vec3<S>>) {
    let q: Vec<S> = pose.q.iter().map(|&x| S::from_f64(x)).collect();
    let scales: Vec<S> = pose.scales.iter().map(|&x| S::from_f64(x)).collect();
    let offsets: Vec<Vec3<S>> = pose.offsets.iter().map(math::vec3_from_f64).collect();
    (q, scales, offsets)
}

/// Full FK: world body transforms plus all site positions.
pub fn fk(skel: &Skeleton, pose: &PoseState) -> Result<FkResult> {
    pose.check(skel)?;
    let (q, scales, offsets) = lift_pose::<f64>(pose);
    let (rot, trans, sites) = fk_generic(skel, &q, &scales, &offsets);
    Ok(FkResult {
        body_rotations: rot.iter().map(|m| Matrix3::from_fn(|i, j| m[i][j])).collect(),
        body_translations: trans.iter().map(|t| Vector3::new(t[0], t[1], t[2])).collect(),
        site_positions: sites.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
    })
}

/// Site name → world position, for all sites.
pub fn forward_kinematics(skel: &Skeleton, pose: &PoseState) -> Result<BTreeMap<String, Vector3<f64>>> {
    let out = fk(skel, pose)?;
    Ok(skel
        .sites
        .iter()
        .zip(out.site_positions.iter())
        .map(|(s, p)| (s.name.clone(), *p))
        .collect())
}

/// Jacobian of the stacked positions of `site_subset` (3 rows per site, in the
/// given order) with respect to the mask-selected parameters (active q in
/// index order, then active scales). Computed by forward-mode dual-number
/// passes through FK, one per active parameter.
pub fn pose_jacobian(
    skel: &Skeleton,
    pose: &PoseState,
    site_subset: &[String],
    mask: &ParamMask,
) -> Result<DMatrix<f64>> {
    pose.check(skel)?;
    if mask.q.len() != skel.nq() || mask.scales.len() != skel.scale_groups().len() {
        return Err(Error::InvalidPose("parameter mask dimensions do not match skeleton".into()));
    }
    if mask.active_count() == 0 {
        return Err(Error::InvalidPose("parameter mask selects no parameters".into()));
    }
    let site_ids: Vec<usize> = site_subset
        .iter()
        .map(|n| skel.site_id(n))
        .collect::<Result<_>>()?;

    let (mut q, mut scales, offsets) = lift_pose::<Dual>(pose);
    let mut jac = DMatrix::zeros(3 * site_ids.len(), mask.active_count());
    let mut col = 0;

    let run_column = |q: &[Dual], scales: &[Dual], jac: &mut DMatrix<f64>, col: usize| {
        let (_, _, sites) = fk_generic(skel, q, scales, &offsets);
        for (r, &sid) in site_ids.iter().enumerate() {
            for axis in 0..3 {
                jac[(3 * r + axis, col)] = sites[sid][axis].du;
            }
        }
    };

    for (i, &active) in mask.q.iter().enumerate() {
        if active {
            q[i].du = 1.0;
            run_column(&q, &scales, &mut jac, col);
            q[i].du = 0.0;
            col += 1;
        }
    }
    for (g, &active) in mask.scales.iter().enumerate() {
        if active {
            scales[g].du = 1.0;
            run_column(&q, &scales, &mut jac, col);
            scales[g].du = 0.0;
            col += 1;
        }
    }
    Ok(jac)
}

/// Project every limited coordinate into its `[lower, upper]` box. Idempotent;
/// unlimited coordinates pass through untouched.
pub fn clamp_to_limits(skel: &Skeleton, pose: &PoseState) -> Result<PoseState> {
    pose.check(skel)?;
    let mut out = pose.clone();
    for (i, dof) in skel.dofs.iter().enumerate() {
        if let Some((lo, hi)) = dof.limit {
            out.q[i] = out.q[i].clamp(lo, hi);
        }
    }
    Ok(out)
}

/// One-sided quadratic limit penalty `Σ ½·k·violation²` with its gradient
/// over q. Zero strictly inside the limits.
pub fn limit_penalty(skel: &Skeleton, pose: &PoseState, stiffness: f64) -> Result<(f64, DVector<f64>)> {
    pose.check(skel)?;
    if stiffness < 0.0 {
        return Err(Error::InvalidPose("negative penalty stiffness".into()));
    }
    let mut loss = 0.0;
    let mut grad = DVector::zeros(skel.nq());
    for (i, dof) in skel.dofs.iter().enumerate() {
        if let Some((lo, hi)) = dof.limit {
            let v = if pose.q[i] > hi {
                pose.q[i] - hi
            } else if pose.q[i] < lo {
                pose.q[i] - lo
            } else {
                continue;
            };
            loss += 0.5 * stiffness * v * v;
            grad[i] = stiffness * v;
        }
    }
    Ok((loss, grad))
}

/// Convenience constructors used by fixtures and tests.
impl Skeleton {
    /// Serial chain: root body at the origin, then `joints.len()` links each
    /// translated by `link` in the parent frame, with a site named
    /// `tip<i>` at the end of every link.
    pub fn chain(link: Vector3<f64>, joints: Vec<JointKind>) -> Result<Skeleton> {
        let mut bodies = vec![Body {
            name: "root".into(),
            parent: None,
            local_translation: Vector3::zeros(),
            joint: JointKind::FreeRoot,
        }];
        // Root sites with lever arms on the scale of the whole chain pin the
        // root frame; without them the free joint is nearly redundant with
        // the first links' rotations and LM crawls along the flat valley.
        let lever = link.norm().max(0.1) * joints.len().max(1) as f64;
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
        for (i, joint) in joints.into_iter().enumerate() {
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
        }
        Skeleton::new(bodies, sites, vec![])
    }
}

/// Axis constant helpers.
pub fn unit_x() -> UnitVector3<f64> {
    Unit::new_unchecked(Vector3::x())
}
pub fn unit_y() -> UnitVector3<f64> {
    Unit::new_unchecked(Vector3::y())
}
pub fn unit_z() -> UnitVector3<f64> {
    Unit::new_unchecked(Vector3::z())
}

/// Used by validators that must not reject limit-free coordinates.
pub fn is_within_limits(skel: &Skeleton, pose: &PoseState) -> bool {
    skel.dofs.iter().enumerate().all(|(i, dof)| match dof.limit {
        Some((lo, hi)) => pose.q[i] >= lo && pose.q[i] <= hi,
        None => true,
    })
}
