//! Pinhole camera geometry: projection, robust consensus triangulation with
//! Gaussian downweighting of inconsistent views, and the GC@threshold metric.
//!
//! Conventions: world-to-camera extrinsics, right-handed frames, +z forward.
//! Cameras are distortion-free; detections from lensed cameras are expected to
//! be undistorted upstream.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::residuals::MultiviewFrame;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Camera {
    pub id: String,
    /// Focal lengths and principal point, pixels.
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, meters.
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Camera-frame z, meters.
    pub depth: f64,
    /// False when the point is at or behind the camera plane.
    pub valid: bool,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| Error::InvalidCamera {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(fail("focal lengths must be positive"));
        }
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        if err > 1e-9 {
            return Err(fail("rotation is not orthonormal"));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(fail("rotation determinant is not +1"));
        }
        Ok(())
    }

    /// Camera-frame coordinates of a world point.
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn project(&self, point: &Vector3<f64>) -> Projection {
        let pc = self.to_camera(point);
        let valid = pc.z > 0.0;
        let pixel = if valid {
            Vector2::new(
                self.fx * pc.x / pc.z + self.cx,
                self.fy * pc.y / pc.z + self.cy,
            )
        } else {
            Vector2::zeros()
        };
        Projection { pixel, depth: pc.z, valid }
    }

    /// ∂pixel/∂world-point, valid only for points strictly in front.
    pub fn projection_jacobian(&self, point: &Vector3<f64>) -> Matrix2x3<f64> {
        let pc = self.to_camera(point);
        let r = &self.rotation;
        let z2 = pc.z * pc.z;
        let mut jac = Matrix2x3::zeros();
        for c in 0..3 {
            jac[(0, c)] = self.fx * (r[(0, c)] * pc.z - pc.x * r[(2, c)]) / z2;
            jac[(1, c)] = self.fy * (r[(1, c)] * pc.z - pc.y * r[(2, c)]) / z2;
        }
        jac
    }

    pub fn in_bounds(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    /// 3x4 projection matrix K·[R|t].
    pub fn matrix(&self) -> nalgebra::Matrix3x4<f64> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let mut rt = nalgebra::Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        k * rt
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct RigMetadata {
    pub units: String,
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
    pub metadata: RigMetadata,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, metadata: RigMetadata) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidCamera {
                id: "<rig>".into(),
                reason: "rig has no cameras".into(),
            });
        }
        let mut index = HashMap::new();
        for (i, cam) in cameras.iter().enumerate() {
            cam.validate()?;
            if index.insert(cam.id.clone(), i).is_some() {
                return Err(Error::InvalidCamera {
                    id: cam.id.clone(),
                    reason: "duplicate camera id".into(),
                });
            }
        }
        Ok(CameraRig { cameras, metadata, index })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn camera(&self, id: &str) -> Result<&Camera> {
        self.index
            .get(id)
            .map(|&i| &self.cameras[i])
            .ok_or_else(|| Error::UnknownCamera(id.to_string()))
    }

    /// Rebuilds the id index after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        let cams = std::mem::take(&mut self.cameras);
        CameraRig::new(cams, self.metadata)
    }
}

/// One 2D observation of a point in a named camera.
#[derive(Debug, Clone)]
pub struct Observation {
    pub camera: String,
    pub pixel: Vector2<f64>,
    pub confidence: f64,
}

fn weighted_dlt(cams: &[&Camera], obs: &[&Observation], weights: &[f64]) -> Result<Vector3<f64>> {
    let mut a = DMatrix::zeros(2 * obs.len(), 4);
    for (i, (cam, ob)) in cams.iter().zip(obs.iter()).enumerate() {
        let p = cam.matrix();
        let w = weights[i];
        for c in 0..4 {
            a[(2 * i, c)] = w * (ob.pixel.x * p[(2, c)] - p[(0, c)]);
            a[(2 * i + 1, c)] = w * (ob.pixel.y * p[(2, c)] - p[(1, c)]);
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let h = v_t.row(v_t.nrows() - 1);
    if h[3].abs() < 1e-14 {
        return Err(Error::DegenerateConsensus(1e-6));
    }
    Ok(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Iteratively reweighted linear triangulation: confidence-weighted DLT,
/// then camera weights `confidence · exp(−e²/(2σ²))` from the per-camera
/// reprojection error e, re-solved until the point moves < 1e-6 m or 10
/// rounds. Returns the point and the final per-observation weights (zero for
/// observations with zero input confidence).
pub fn robust_triangulate(
    rig: &CameraRig,
    detections: &[Observation],
    kernel_width_px: f64,
) -> Result<(Vector3<f64>, Vec<f64>)> {
    let mut cams = Vec::new();
    let mut obs = Vec::new();
    let mut usable = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        if d.confidence > 0.0 {
            cams.push(rig.camera(&d.camera)?);
            obs.push(d);
            usable.push(i);
        }
    }
    if cams.len() < 2 {
        return Err(Error::InsufficientViews(cams.len()));
    }

    let mut weights: Vec<f64> = obs.iter().map(|o| o.confidence).collect();
    let mut point = weighted_dlt(&cams, &obs, &weights)?;
    for _ in 0..10 {
        for (i, (cam, ob)) in cams.iter().zip(obs.iter()).enumerate() {
            let proj = cam.project(&point);
            let err = if proj.valid {
                (proj.pixel - ob.pixel).norm()
            } else {
                f64::INFINITY
            };
            let kernel = (-err * err / (2.0 * kernel_width_px * kernel_width_px)).exp();
            weights[i] = ob.confidence * kernel;
        }
        if weights.iter().all(|&w| w < 1e-6) {
            return Err(Error::DegenerateConsensus(1e-6));
        }
        let next = weighted_dlt(&cams, &obs, &weights)?;
        let moved = (next - point).norm();
        point = next;
        if moved < 1e-6 {
            break;
        }
    }

    let mut full = vec![0.0; detections.len()];
    for (slot, &i) in usable.iter().enumerate() {
        full[i] = weights[slot];
    }
    Ok((point, full))
}

/// Fraction of confidence-positive (camera, site) pairs whose reprojection
/// error is strictly below `threshold_px`. Invalid (behind-camera)
/// projections count as failures.
pub fn gc_at_threshold(
    rig: &CameraRig,
    world_points: &BTreeMap<String, Vector3<f64>>,
    detections: &MultiviewFrame,
    threshold_px: f64,
) -> Result<f64> {
    if threshold_px <= 0.0 {
        return Err(Error::UndefinedMetric("threshold must be positive".into()));
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for (camera_id, view) in detections.views() {
        let cam = rig.camera(camera_id)?;
        for (site, det) in view {
            if det.confidence <= 0.0 {
                continue;
            }
            let Some(point) = world_points.get(site) else { continue };
            total += 1;
            let proj = cam.project(point);
            if proj.valid && (proj.pixel - det.pixel).norm() < threshold_px {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "no confidence-positive (camera, site) pairs".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

/// Ring of `count` cameras at radius `radius` and height `height`, all
/// looking at `target`, evenly spaced in azimuth.
pub fn ring_rig(
    count: usize,
    radius: f64,
    height: f64,
    target: Vector3<f64>,
    fx: f64,
    image_size: (u32, u32),
) -> Result<CameraRig> {
    let mut cameras = Vec::with_capacity(count);
    for i in 0..count {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / count.max(1) as f64;
        let center = target + Vector3::new(radius * angle.cos(), radius * angle.sin(), height);
        let forward = (target - center).normalize();
        // Build a right-handed camera basis with +z forward.
        let up_hint = Vector3::z();
        let right = forward.cross(&up_hint);
        let right = if right.norm() < 1e-9 {
            Vector3::x()
        } else {
            right.normalize()
        };
        let down = forward.cross(&right).normalize();
        // Rows of the world-to-camera rotation: camera x, y, z axes in world coords.
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * center;
        cameras.push(Camera {
            id: format!("cam{i}"),
            fx,
            fy: fx,
            cx: image_size.0 as f64 / 2.0,
            cy: image_size.1 as f64 / 2.0,
            rotation,
            translation,
            width: image_size.0,
            height: image_size.1,
        });
    }
    CameraRig::new(
        cameras,
        RigMetadata { units: "meters".into(), source: "ring_rig".into() },
    )
}
