//! Implementations of the CLI subcommands: wiring files through the solver,
//! triangulation, evaluation, synthesis, and mapping-refinement pipelines.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ikfit::cameras::{gc_at_threshold, robust_triangulate, Observation};
use ikfit::formats::{self, PoseRecord};
use ikfit::lm::{self, MarkerObjective, ReprojectionObjective, SolveConfig, SolveReport};
use ikfit::mapping;
use ikfit::metrics::{self, AlignmentRegion};
use ikfit::residuals::{MarkerFrame, MultiviewFrame};
use ikfit::skeleton::{fk, PoseState, Skeleton};
use ikfit::synth::{self, RigLayout, SceneSpec};
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::plots::{self, Bar};
use crate::{
    EvaluateArgs, MapRefineArgs, SolveMonoArgs, SolveMultiviewArgs, SynthArgs, TriangulateArgs,
};

/// Serialized next to the poses: everything deterministic about one frame's
/// solve (the wall-clock time stays out so reruns hash identically).
#[derive(Debug, Serialize)]
struct FrameReport {
    frame: u64,
    converged: bool,
    final_loss: f64,
    stages: Vec<StageSummary>,
    final_pose: PoseState,
}

#[derive(Debug, Serialize)]
struct StageSummary {
    name: String,
    iterations_run: usize,
    accepted_steps: usize,
    end_loss: f64,
    stationary: bool,
}

impl FrameReport {
    fn from_report(frame: u64, report: &SolveReport) -> Self {
        FrameReport {
            frame,
            converged: report.converged,
            final_loss: report.final_loss,
            stages: report
                .stages
                .iter()
                .map(|s| StageSummary {
                    name: s.name.clone(),
                    iterations_run: s.iterations.len(),
                    accepted_steps: s.iterations.iter().filter(|i| i.accepted).count(),
                    end_loss: s.end_loss,
                    stationary: s.stationary,
                })
                .collect(),
            final_pose: report.final_pose.clone(),
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("failed to create output directory {}", out.display()))
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()?)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    formats::write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Errors early when any frame targets a site the skeleton does not define,
/// listing every offender.
fn check_sites<'a>(skel: &Skeleton, names: impl Iterator<Item = &'a String>) -> Result<()> {
    let unknown: BTreeSet<&String> =
        names.filter(|s| skel.site_id(s).is_err()).collect();
    if !unknown.is_empty() {
        let list: Vec<&str> = unknown.into_iter().map(String::as_str).collect();
        bail!("input references sites missing from the skeleton: {}", list.join(", "));
    }
    Ok(())
}

fn load_config(
    path: &Option<PathBuf>,
    skel: &Skeleton,
    default: impl FnOnce(&Skeleton) -> ikfit::Result<SolveConfig>,
) -> Result<(SolveConfig, bool)> {
    let (config, from_file) = match path {
        Some(p) => (formats::load_json::<SolveConfig>(p)?, true),
        None => (default(skel)?, false),
    };
    config.validate(skel)?;
    Ok((config, from_file))
}

/// Writes per-frame outputs and the shared pose/summary files, and folds
/// frame failures into a single error honoring `--continue-on-error`.
fn finish_solve(
    out: &Path,
    results: Vec<(u64, ikfit::Result<SolveReport>)>,
    continue_on_error: bool,
    summary_header: &str,
    summary_row: impl Fn(u64, &SolveReport) -> String,
) -> Result<()> {
    let mut poses = Vec::new();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (frame, result) in &results {
        match result {
            Ok(report) => {
                let doc = FrameReport::from_report(*frame, report);
                formats::save_json(&out.join(format!("frame_{frame:06}.json")), &doc)?;
                poses.push(PoseRecord { frame: *frame, pose: report.final_pose.clone() });
                rows.push(summary_row(*frame, report));
            }
            Err(e) => {
                eprintln!("ikfit: frame {frame} failed: {e}");
                failures.push(*frame);
                if !continue_on_error {
                    bail!("frame {frame} failed: {e}");
                }
            }
        }
    }
    formats::save_poses(&out.join("poses.json"), &poses)?;
    write_csv(&out.join("summary.csv"), summary_header, &rows)?;
    if !failures.is_empty() {
        bail!(
            "{} of {} frames failed: {:?}",
            failures.len(),
            results.len(),
            failures
        );
    }
    Ok(())
}

pub fn solve_mono(args: &SolveMonoArgs) -> Result<()> {
    let skel = formats::load_skeleton(&args.skeleton)?;
    let frames = formats::load_marker_frames(&args.markers)?;
    if frames.is_empty() {
        bail!("{}: no marker frames", args.markers.display());
    }
    check_sites(&skel, frames.iter().flat_map(|(_, f)| f.targets().keys()))?;
    let (config, from_file) = load_config(&args.config, &skel, lm::default_monocular_config)?;
    ensure_out_dir(&args.out)?;

    let pool = thread_pool(args.jobs)?;
    let results: Vec<(u64, ikfit::Result<SolveReport>)> = pool.install(|| {
        frames
            .par_iter()
            .map(|(frame, marker_frame)| {
                let obj = MarkerObjective::new(&skel, marker_frame);
                (*frame, lm::run_staged(&obj, &config))
            })
            .collect()
    });

    let mut manifest = RunManifest::new("solve-mono", &args.out);
    manifest.input("skeleton", &args.skeleton);
    manifest.input("markers", &args.markers);
    if let Some(p) = &args.config {
        manifest.input("config", p);
    }
    manifest.config = serde_json::to_value(&config)?;
    manifest.note("config_source", if from_file { "file" } else { "default_monocular" });
    manifest.note("frames", frames.len() as u64);
    manifest.write(&args.out)?;

    finish_solve(
        &args.out,
        results,
        args.continue_on_error,
        "frame,converged,final_loss",
        |frame, report| format!("{frame},{},{}", report.converged, report.final_loss),
    )
}

/// Consensus confidence factors for every (camera, site) pair of one frame.
fn consensus_weights(
    rig: &ikfit::cameras::CameraRig,
    frame: &MultiviewFrame,
    sigma_px: f64,
) -> BTreeMap<(String, String), f64> {
    let mut factors = BTreeMap::new();
    for site in frame.active_sites() {
        let obs = site_observations(frame, &site);
        if let Ok((_, weights)) = robust_triangulate(rig, &obs, sigma_px) {
            for (o, w) in obs.iter().zip(&weights) {
                factors.insert((o.camera.clone(), site.clone()), *w);
            }
        }
    }
    factors
}

fn site_observations(frame: &MultiviewFrame, site: &str) -> Vec<Observation> {
    let mut obs = Vec::new();
    for (camera, view) in frame.views() {
        if let Some(det) = view.get(site) {
            if det.confidence > 0.0 {
                obs.push(Observation {
                    camera: camera.clone(),
                    pixel: det.pixel,
                    confidence: det.confidence,
                });
            }
        }
    }
    obs
}

fn site_position_map(skel: &Skeleton, pose: &PoseState) -> ikfit::Result<BTreeMap<String, Vector3<f64>>> {
    let fk_res = fk(skel, pose)?;
    Ok(skel
        .sites()
        .iter()
        .zip(&fk_res.site_positions)
        .map(|(site, pos)| (site.name.clone(), *pos))
        .collect())
}

pub fn solve_multiview(args: &SolveMultiviewArgs) -> Result<()> {
    let skel = formats::load_skeleton(&args.skeleton)?;
    let rig = formats::load_rig(&args.rig)?;
    if rig.cameras().len() < 2 {
        bail!("{}: multiview solving needs at least 2 cameras", args.rig.display());
    }
    let frames = formats::load_detection_frames(&args.detections)?;
    if frames.is_empty() {
        bail!("{}: no detection frames", args.detections.display());
    }
    check_sites(
        &skel,
        frames.iter().flat_map(|(_, f)| f.views().values().flat_map(|v| v.keys())),
    )?;
    let (config, from_file) = load_config(&args.config, &skel, lm::default_multiview_config)?;
    ensure_out_dir(&args.out)?;

    struct FrameOutcome {
        result: ikfit::Result<SolveReport>,
        zeroed: usize,
        gc: f64,
        camera_weight_rows: Vec<String>,
    }

    let pool = thread_pool(args.jobs)?;
    let outcomes: Vec<(u64, FrameOutcome)> = pool.install(|| {
        frames
            .par_iter()
            .map(|(frame_id, raw)| {
                let mut frame = raw.clone();
                let mut outcome = FrameOutcome {
                    result: Err(ikfit::Error::NoData("not solved".into())),
                    zeroed: 0,
                    gc: f64::NAN,
                    camera_weight_rows: Vec::new(),
                };
                match frame.preprocess(&rig, lm::CONFIDENCE_CUTOFF) {
                    Ok(z) => outcome.zeroed = z,
                    Err(e) => {
                        outcome.result = Err(e);
                        return (*frame_id, outcome);
                    }
                }
                let factors = consensus_weights(&rig, &frame, args.sigma_px);
                let mut per_camera: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
                for ((camera, _), w) in &factors {
                    let slot = per_camera.entry(camera).or_insert((0.0, 0));
                    slot.0 += w;
                    slot.1 += 1;
                }
                for (camera, (sum, n)) in per_camera {
                    outcome
                        .camera_weight_rows
                        .push(format!("{frame_id},{camera},{}", sum / n as f64));
                }
                frame.apply_weights(&factors);

                let obj = ReprojectionObjective::new(&skel, &frame, &rig);
                let report = match lm::run_staged(&obj, &config) {
                    Ok(r) => r,
                    Err(e) => {
                        outcome.result = Err(e);
                        return (*frame_id, outcome);
                    }
                };
                match site_position_map(&skel, &report.final_pose)
                    .and_then(|points| gc_at_threshold(&rig, &points, &frame, 10.0))
                {
                    Ok(gc) => outcome.gc = gc,
                    Err(e) => {
                        outcome.result = Err(e);
                        return (*frame_id, outcome);
                    }
                }
                outcome.result = Ok(report);
                (*frame_id, outcome)
            })
            .collect()
    });

    let total_zeroed: usize = outcomes.iter().map(|(_, o)| o.zeroed).sum();
    let weight_rows: Vec<String> = outcomes
        .iter()
        .flat_map(|(_, o)| o.camera_weight_rows.iter().cloned())
        .collect();
    write_csv(
        &args.out.join("camera_weights.csv"),
        "frame,camera,mean_weight",
        &weight_rows,
    )?;

    let mut manifest = RunManifest::new("solve-multiview", &args.out);
    manifest.input("skeleton", &args.skeleton);
    manifest.input("detections", &args.detections);
    manifest.input("rig", &args.rig);
    if let Some(p) = &args.config {
        manifest.input("config", p);
    }
    manifest.config = serde_json::to_value(&config)?;
    manifest.note("config_source", if from_file { "file" } else { "default_multiview" });
    manifest.note("confidence_cutoff", lm::CONFIDENCE_CUTOFF);
    manifest.note("zeroed_detections", total_zeroed as u64);
    manifest.note("frames", frames.len() as u64);
    manifest.write(&args.out)?;

    let gc_by_frame: BTreeMap<u64, (f64, usize)> =
        outcomes.iter().map(|(f, o)| (*f, (o.gc, o.zeroed))).collect();
    let results: Vec<(u64, ikfit::Result<SolveReport>)> =
        outcomes.into_iter().map(|(f, o)| (f, o.result)).collect();
    finish_solve(
        &args.out,
        results,
        args.continue_on_error,
        "frame,gc_at_10px,converged,final_loss,zeroed_detections",
        |frame, report| {
            let (gc, zeroed) = gc_by_frame[&frame];
            format!("{frame},{gc},{},{},{zeroed}", report.converged, report.final_loss)
        },
    )
}

pub fn triangulate(args: &TriangulateArgs) -> Result<()> {
    let rig = formats::load_rig(&args.rig)?;
    let frames = formats::load_detection_frames(&args.detections)?;
    if frames.is_empty() {
        bail!("{}: no detection frames", args.detections.display());
    }
    ensure_out_dir(&args.out)?;

    let mut point_rows = Vec::new();
    let mut weight_rows = Vec::new();
    let mut skipped = 0usize;
    for (frame_id, frame) in &frames {
        for site in frame.active_sites() {
            let obs = site_observations(frame, &site);
            match robust_triangulate(&rig, &obs, args.sigma_px) {
                Ok((point, weights)) => {
                    point_rows.push(format!(
                        "{frame_id},{site},{},{},{}",
                        point.x, point.y, point.z
                    ));
                    for (o, w) in obs.iter().zip(&weights) {
                        weight_rows.push(format!("{frame_id},{site},{},{w}", o.camera));
                    }
                }
                Err(e) => {
                    eprintln!("ikfit: frame {frame_id} site {site}: {e}");
                    skipped += 1;
                }
            }
        }
    }
    write_csv(&args.out.join("points.csv"), "frame,site,x,y,z", &point_rows)?;
    write_csv(&args.out.join("weights.csv"), "frame,site,camera,weight", &weight_rows)?;

    let mut manifest = RunManifest::new("triangulate", &args.out);
    manifest.input("rig", &args.rig);
    manifest.input("detections", &args.detections);
    manifest.config = serde_json::json!({ "sigma_px": args.sigma_px });
    manifest.note("triangulated_points", point_rows.len() as u64);
    manifest.note("skipped_sites", skipped as u64);
    manifest.write(&args.out)?;
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let skel = formats::load_skeleton(&args.skeleton)?;
    let pred = formats::load_poses(&args.pred)?;
    let reference = formats::load_poses(&args.reference)?;
    let regions: Vec<AlignmentRegion> = formats::load_json(&args.regions)?;
    if regions.is_empty() {
        bail!("{}: no alignment regions", args.regions.display());
    }
    for region in &regions {
        check_sites(&skel, region.site_names.iter().chain(region.report_set()))?;
    }
    ensure_out_dir(&args.out)?;

    let ref_by_frame: BTreeMap<u64, &PoseState> =
        reference.iter().map(|r| (r.frame, &r.pose)).collect();
    let pred_frames: BTreeSet<u64> = pred.iter().map(|r| r.frame).collect();
    let unmatched: Vec<u64> = pred_frames
        .iter()
        .filter(|f| !ref_by_frame.contains_key(f))
        .copied()
        .chain(ref_by_frame.keys().filter(|f| !pred_frames.contains(f)).copied())
        .collect();
    if !unmatched.is_empty() {
        eprintln!("ikfit: warning: skipping frames without a counterpart: {unmatched:?}");
    }

    // One row per matched frame: PA-MPJPE per region plus joint-angle MAE.
    let mut per_frame: Vec<(u64, Vec<f64>)> = Vec::new();
    for record in &pred {
        let Some(ref_pose) = ref_by_frame.get(&record.frame) else {
            continue;
        };
        let pred_sites = site_position_map(&skel, &record.pose)?;
        let ref_sites = site_position_map(&skel, ref_pose)?;
        let mut values = Vec::with_capacity(regions.len() + 1);
        for region in &regions {
            let (mpjpe, _) = metrics::pa_mpjpe(&pred_sites, &ref_sites, region)?;
            values.push(mpjpe);
        }
        let mae = metrics::joint_angle_mae(&skel, &record.pose, ref_pose, None)?;
        values.push(metrics::mean_of(&mae));
        per_frame.push((record.frame, values));
    }
    if per_frame.is_empty() {
        bail!("no frames shared between predictions and reference");
    }

    let n_cols = regions.len() + 1;
    let n = per_frame.len() as f64;
    let mut means = vec![0.0; n_cols];
    for (_, values) in &per_frame {
        for (m, v) in means.iter_mut().zip(values) {
            *m += v / n;
        }
    }
    let mut stds = vec![0.0; n_cols];
    for (_, values) in &per_frame {
        for ((s, v), m) in stds.iter_mut().zip(values).zip(&means) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut stds {
        *s = s.sqrt();
    }

    let mut header = String::from("frame");
    for region in &regions {
        header.push_str(&format!(",pa_mpjpe_mm_{}", region.name));
    }
    header.push_str(",joint_angle_mae_deg");
    let fmt_row = |label: &str, values: &[f64]| {
        let mut row = label.to_string();
        for v in values {
            row.push_str(&format!(",{v}"));
        }
        row
    };
    let mut rows: Vec<String> = per_frame
        .iter()
        .map(|(frame, values)| fmt_row(&frame.to_string(), values))
        .collect();
    rows.push(fmt_row("mean", &means));
    rows.push(fmt_row("std", &stds));
    write_csv(&args.out.join("metrics.csv"), &header, &rows)?;

    let pa_bars: Vec<Bar> = regions
        .iter()
        .enumerate()
        .map(|(i, r)| Bar { label: r.name.clone(), mean: means[i], std: stds[i] })
        .collect();
    formats::write_atomic(
        &args.out.join("pa_mpjpe.svg"),
        plots::bar_chart("PA-MPJPE by region", "mm", &pa_bars).as_bytes(),
    )?;
    let mae_bars = vec![Bar {
        label: "all joints".into(),
        mean: means[n_cols - 1],
        std: stds[n_cols - 1],
    }];
    formats::write_atomic(
        &args.out.join("joint_angle_mae.svg"),
        plots::bar_chart("Joint-angle MAE", "degrees", &mae_bars).as_bytes(),
    )?;

    let mut manifest = RunManifest::new("evaluate", &args.out);
    manifest.input("skeleton", &args.skeleton);
    manifest.input("pred", &args.pred);
    manifest.input("reference", &args.reference);
    manifest.input("regions", &args.regions);
    manifest.config = serde_json::to_value(&regions)?;
    manifest.note("frames_evaluated", per_frame.len() as u64);
    manifest.note("frames_skipped", unmatched.len() as u64);
    manifest.write(&args.out)?;
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let skel = match args.fixture.as_str() {
        "chain" => synth::random_chain(args.chain_dofs, &mut rng)?,
        "hands" => synth::two_hand_fixture()?,
        other => bail!("unknown fixture '{other}' (expected 'chain' or 'hands')"),
    };
    let rig_layout = (args.cameras > 0).then(|| RigLayout {
        cameras: args.cameras,
        ..Default::default()
    });
    let spec = SceneSpec {
        limit_fraction: args.limit_fraction,
        rotation_range: args.rotation_range,
        translation_range: args.translation_range,
        marker_sigma: args.marker_sigma,
        pixel_sigma: args.pixel_sigma,
        dropout: args.dropout,
        rig: rig_layout,
        seed: args.seed,
    };
    let mut scene = synth::generate_scene(&skel, &spec, args.frames)?;
    if let Some(camera) = &args.outlier_camera {
        for frame in &mut scene.multiview_frames {
            synth::inject_camera_outlier(frame, camera, Vector2::new(args.outlier_shift_px, 0.0));
        }
    }
    ensure_out_dir(&args.out)?;

    formats::save_skeleton(&args.out.join("skeleton.json"), &skel)?;
    let truth: Vec<PoseRecord> = scene
        .ground_truth
        .iter()
        .enumerate()
        .map(|(i, pose)| PoseRecord { frame: i as u64, pose: pose.clone() })
        .collect();
    formats::save_poses(&args.out.join("ground_truth.json"), &truth)?;
    let marker_frames: Vec<(u64, MarkerFrame)> = scene
        .marker_frames
        .iter()
        .enumerate()
        .map(|(i, f)| (i as u64, f.clone()))
        .collect();
    formats::save_marker_frames(&args.out.join("markers.csv"), &marker_frames)?;
    if let Some(rig) = &scene.rig {
        formats::save_rig(&args.out.join("rig.json"), rig)?;
        let detection_frames: Vec<(u64, MultiviewFrame)> = scene
            .multiview_frames
            .iter()
            .enumerate()
            .map(|(i, f)| (i as u64, f.clone()))
            .collect();
        formats::save_detection_frames(&args.out.join("detections.csv"), &detection_frames)?;
    }

    let mut manifest = RunManifest::new("synth", &args.out);
    manifest.config = serde_json::json!({
        "fixture": args.fixture,
        "chain_dofs": args.chain_dofs,
        "frames": args.frames,
        "scene": serde_json::to_value(&spec)?,
        "outlier_camera": args.outlier_camera,
        "outlier_shift_px": args.outlier_shift_px,
    });
    manifest.seed = Some(args.seed);
    manifest.write(&args.out)?;
    Ok(())
}

pub fn map_refine(args: &MapRefineArgs) -> Result<()> {
    let skel = formats::load_skeleton(&args.skeleton)?;
    let table = formats::load_correspondences(&args.table)?;
    check_sites(&skel, table.entries().iter().map(|e| &e.site))?;
    let external_frames = formats::load_marker_frames(&args.markers)?;
    if external_frames.is_empty() {
        bail!("{}: no marker frames", args.markers.display());
    }
    let frames: Vec<MarkerFrame> = external_frames
        .iter()
        .map(|(_, f)| table.frame_to_sites(f))
        .collect::<ikfit::Result<_>>()?;

    let result = mapping::refine_sites_em(&skel, &frames, &table, args.rounds, args.tau)?;
    ensure_out_dir(&args.out)?;

    formats::save_skeleton(&args.out.join("skeleton.json"), &result.skeleton)?;
    formats::save_correspondences(&args.out.join("table.csv"), &result.table)?;
    let round_rows: Vec<String> = result
        .rounds
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{i},{}", r.weighted_residual))
        .collect();
    write_csv(&args.out.join("rounds.csv"), "round,weighted_residual", &round_rows)?;
    let poses: Vec<PoseRecord> = external_frames
        .iter()
        .zip(&result.poses)
        .map(|((frame, _), pose)| PoseRecord { frame: *frame, pose: pose.clone() })
        .collect();
    formats::save_poses(&args.out.join("poses.json"), &poses)?;

    let mut manifest = RunManifest::new("map-refine", &args.out);
    manifest.input("skeleton", &args.skeleton);
    manifest.input("markers", &args.markers);
    manifest.input("table", &args.table);
    manifest.config = serde_json::json!({ "rounds": args.rounds, "tau": args.tau });
    manifest.note(
        "unobserved_sites",
        serde_json::to_value(&result.unobserved_sites)?,
    );
    manifest.write(&args.out)?;
    Ok(())
}
