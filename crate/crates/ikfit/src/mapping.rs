//! Correspondence handling between an external keypoint/vertex vocabulary
//! and skeleton sites: nearest-match discovery across paired frames,
//! EM-style refinement of site positions, and residual-derived confidence
//! weights.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, MarkerObjective, QSelection, SolveConfig, StageSpec, WarmStart};
use crate::residuals::MarkerFrame;
use crate::skeleton::{fk, PoseState, Skeleton};

/// Default bandwidth of the residual-to-confidence kernel, meters (20 mm).
pub const DEFAULT_KERNEL_TAU: f64 = 0.02;

/// Origin of an external key within its source model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Vertex,
    RegressedKeypoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceEntry {
    pub external_id: String,
    pub kind: SourceKind,
    pub site: String,
    pub weight: f64,
}

/// Bijective map from external keys to skeleton sites with confidence
/// weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceTable {
    entries: Vec<CorrespondenceEntry>,
}

impl CorrespondenceTable {
    pub fn new(entries: Vec<CorrespondenceEntry>) -> Result<Self> {
        let mut externals = BTreeSet::new();
        let mut sites = BTreeSet::new();
        for e in &entries {
            if !e.weight.is_finite() || e.weight < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "correspondence '{}' has invalid weight {}",
                    e.external_id, e.weight
                )));
            }
            if !externals.insert(&e.external_id) {
                return Err(Error::InvalidConfig(format!(
                    "external key '{}' mapped more than once",
                    e.external_id
                )));
            }
            if !sites.insert(&e.site) {
                return Err(Error::InvalidConfig(format!(
                    "site '{}' mapped more than once",
                    e.site
                )));
            }
        }
        Ok(CorrespondenceTable { entries })
    }

    pub fn entries(&self) -> &[CorrespondenceEntry] {
        &self.entries
    }

    pub fn by_external(&self, external_id: &str) -> Option<&CorrespondenceEntry> {
        self.entries.iter().find(|e| e.external_id == external_id)
    }

    pub fn by_site(&self, site: &str) -> Option<&CorrespondenceEntry> {
        self.entries.iter().find(|e| e.site == site)
    }

    /// Rekey an external-id cloud into a site-keyed marker frame, scaling
    /// each point's confidence by the table weight.
    pub fn frame_to_sites(&self, frame: &MarkerFrame) -> Result<MarkerFrame> {
        let mut entries = Vec::new();
        for e in &self.entries {
            if let Some(p) = frame.targets().get(&e.external_id) {
                entries.push((e.site.clone(), *p, e.weight * frame.confidence(&e.external_id)));
            }
        }
        MarkerFrame::new(entries)
    }
}

/// Confidence from a mean residual: `exp(−r̄² / (2τ²))`.
pub fn residual_weight(mean_residual: f64, tau: f64) -> f64 {
    (-mean_residual * mean_residual / (2.0 * tau * tau)).exp()
}

/// Match external keys to skeleton sites from frames observed by both
/// systems. For each reference key, the external key with the smallest mean
/// distance across overlapping frames wins; assignment is greedy in
/// ascending mean distance so the result is bijective, with ties broken by
/// lowest external key id. `pairing` names the site each reference key
/// stands for; `kinds` may override the default `Vertex` origin per key.
pub fn discover_correspondences(
    external_clouds: &[BTreeMap<String, Vector3<f64>>],
    reference_clouds: &[BTreeMap<String, Vector3<f64>>],
    pairing: &BTreeMap<String, String>,
    kinds: &BTreeMap<String, SourceKind>,
    tau: f64,
) -> Result<CorrespondenceTable> {
    if external_clouds.len() != reference_clouds.len() {
        return Err(Error::NoData(format!(
            "{} external frames vs {} reference frames",
            external_clouds.len(),
            reference_clouds.len()
        )));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidConfig("kernel tau must be > 0".into()));
    }

    // Mean distance per (reference key, external key) over frames where both
    // are present.
    let mut costs: BTreeMap<(&String, &String), (f64, usize)> = BTreeMap::new();
    for (ext, refc) in external_clouds.iter().zip(reference_clouds) {
        for (ref_key, ref_pos) in refc {
            if !pairing.contains_key(ref_key) {
                continue;
            }
            for (ext_key, ext_pos) in ext {
                let entry = costs.entry((ref_key, ext_key)).or_insert((0.0, 0));
                entry.0 += (ref_pos - ext_pos).norm();
                entry.1 += 1;
            }
        }
    }
    if costs.is_empty() {
        return Err(Error::NoData(
            "no frame contains both an external and a paired reference point".into(),
        ));
    }

    let mut candidates: Vec<(f64, &String, &String)> = costs
        .iter()
        .map(|((ref_key, ext_key), (sum, n))| (sum / *n as f64, *ref_key, *ext_key))
        .collect();
    // Ascending mean distance; ties by reference key then external key id.
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then_with(|| a.1.cmp(b.1))
            .then_with(|| a.2.cmp(b.2))
    });

    let mut used_refs = BTreeSet::new();
    let mut used_exts = BTreeSet::new();
    let mut entries = Vec::new();
    for (mean, ref_key, ext_key) in candidates {
        if used_refs.contains(ref_key) || used_exts.contains(ext_key) {
            continue;
        }
        used_refs.insert(ref_key);
        used_exts.insert(ext_key);
        entries.push(CorrespondenceEntry {
            external_id: ext_key.clone(),
            kind: kinds.get(ext_key).copied().unwrap_or(SourceKind::Vertex),
            site: pairing[ref_key].clone(),
            weight: residual_weight(mean, tau),
        });
    }
    entries.sort_by(|a, b| a.external_id.cmp(&b.external_id));
    CorrespondenceTable::new(entries)
}

/// Per-round summary of the EM refinement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementRound {
    /// Total weighted squared residual after the round, evaluated with the
    /// weights the round started with.
    pub weighted_residual: f64,
}

#[derive(Debug, Clone)]
pub struct RefinementResult {
    pub skeleton: Skeleton,
    pub table: CorrespondenceTable,
    pub rounds: Vec<RefinementRound>,
    /// Table sites never observed in any frame; left unchanged.
    pub unobserved_sites: Vec<String>,
    pub poses: Vec<PoseState>,
}

fn em_solve_config(warm: Option<PoseState>) -> SolveConfig {
    SolveConfig {
        stages: vec![
            StageSpec {
                name: "root".into(),
                iterations: 60,
                active_q: QSelection::RootOnly,
                active_scales: false,
                active_offsets: false,
                marker_subset: None,
                damping: 3.0,
                offset_reg_weight: 20.0,
            },
            // The site update needs poses solved far past the usual
            // tracking accuracy, so this stage runs with a low damping
            // floor and a generous budget; the stationary early exit
            // keeps warm-started rounds cheap.
            StageSpec {
                name: "pose".into(),
                iterations: 300,
                active_q: QSelection::All,
                active_scales: false,
                active_offsets: false,
                marker_subset: None,
                damping: 1e-3,
                offset_reg_weight: 20.0,
            },
        ],
        warm_start: WarmStart { recenter_root: warm.is_none(), pose: warm },
        convergence_tol: 1e-12,
        max_step_norm: None,
        limit_stiffness: lm::DEFAULT_LIMIT_STIFFNESS,
    }
}

/// Alternating refinement of the table sites' local offsets.
///
/// Each round solves all frame poses with the current site positions
/// (E-step), then replaces each observed table site's local offset with the
/// confidence-weighted mean of its targets expressed in the owning body's
/// frame (M-step), and finally refreshes the table weights from the new mean
/// residuals. Only sites named in the table move; every other site anchors
/// the poses. Scales stay frozen throughout. The weighted objective is
/// non-increasing across rounds when evaluated with the round-start weights.
pub fn refine_sites_em(
    skel: &Skeleton,
    frames: &[MarkerFrame],
    table: &CorrespondenceTable,
    rounds: usize,
    tau: f64,
) -> Result<RefinementResult> {
    if rounds == 0 {
        return Err(Error::InvalidConfig("refinement needs at least one round".into()));
    }
    if frames.is_empty() {
        return Err(Error::NoData("refinement needs at least one frame".into()));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidConfig("kernel tau must be > 0".into()));
    }
    for e in table.entries() {
        skel.site_id(&e.site)?;
    }

    let mut current = skel.clone();
    let mut table = table.clone();
    let mut round_stats = Vec::with_capacity(rounds);
    let mut poses: Vec<Option<PoseState>> = vec![None; frames.len()];
    let mut unobserved = BTreeSet::new();

    for _ in 0..rounds {
        // E-step: per-frame pose solves, warm-started from the last round.
        let mut fks = Vec::with_capacity(frames.len());
        for (i, frame) in frames.iter().enumerate() {
            let obj = MarkerObjective::new(&current, frame);
            let report = lm::run_staged(&obj, &em_solve_config(poses[i].clone()))?;
            fks.push(fk(&current, &report.final_pose)?);
            poses[i] = Some(report.final_pose);
        }

        // M-step: weighted mean of each table site's targets in its owning
        // body's frame, divided by the body's scale factor.
        let mut updated = current.clone();
        for entry in table.entries() {
            let site_id = current.site_id(&entry.site).unwrap();
            let body = current.sites()[site_id].body;
            let mut sum = Vector3::zeros();
            let mut total_w = 0.0;
            for (frame, fk_res) in frames.iter().zip(&fks) {
                let w = entry.weight * frame.confidence(&entry.site);
                if w <= 0.0 {
                    continue;
                }
                let target = match frame.targets().get(&entry.site) {
                    Some(t) => t,
                    None => continue,
                };
                let local = fk_res.body_rotations[body].transpose()
                    * (target - fk_res.body_translations[body]);
                sum += w * local;
                total_w += w;
            }
            if total_w > 0.0 {
                let scale = scale_of(&current, body, poses.first().and_then(|p| p.as_ref()));
                updated = updated.with_site_offset(site_id, sum / (total_w * scale));
            } else {
                unobserved.insert(entry.site.clone());
            }
        }
        current = updated;

        // Round objective with the round-start weights, then the weight
        // refresh for the next round.
        let mut weighted_residual = 0.0;
        let mut new_entries = Vec::with_capacity(table.entries().len());
        for entry in table.entries() {
            let site_id = current.site_id(&entry.site).unwrap();
            let body = current.sites()[site_id].body;
            let mut residual_sum = 0.0;
            let mut n = 0usize;
            for (i, frame) in frames.iter().enumerate() {
                let target = match frame.targets().get(&entry.site) {
                    Some(t) => t,
                    None => continue,
                };
                let pose = poses[i].as_ref().unwrap();
                let fk_res = fk(&current, pose)?;
                let scale = scale_of(&current, body, Some(pose));
                let world = fk_res.body_rotations[body]
                    * (scale * current.sites()[site_id].local_offset)
                    + fk_res.body_translations[body];
                let r = (world - target).norm();
                weighted_residual +=
                    entry.weight * frame.confidence(&entry.site) * r * r;
                residual_sum += r;
                n += 1;
            }
            let mut e = entry.clone();
            if n > 0 {
                e.weight = residual_weight(residual_sum / n as f64, tau);
            }
            new_entries.push(e);
        }
        table = CorrespondenceTable::new(new_entries)?;

        if let Some(RefinementRound { weighted_residual: prev }) = round_stats.last() {
            if weighted_residual > prev + 1e-12 {
                return Err(Error::Evaluation(format!(
                    "refinement objective increased: {prev} -> {weighted_residual}"
                )));
            }
        }
        round_stats.push(RefinementRound { weighted_residual });
    }

    Ok(RefinementResult {
        skeleton: current,
        table,
        rounds: round_stats,
        unobserved_sites: unobserved.into_iter().collect(),
        poses: poses.into_iter().map(Option::unwrap).collect(),
    })
}

fn scale_of(skel: &Skeleton, body: usize, pose: Option<&PoseState>) -> f64 {
    match (skel.scale_group_of(body), pose) {
        (Some(g), Some(p)) => p.scales[g],
        _ => 1.0,
    }
}
