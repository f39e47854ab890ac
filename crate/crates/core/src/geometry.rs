//! Rigid transforms and the projection chain between pixel, camera, ego and
//! LiDAR frames.
//!
//! Frames:
//! - camera: x right, y down, z forward (optical axis), meters.
//! - ego: x forward, y left, z up, origin on the ground plane.
//! - LiDAR: sensor frame, related to ego by `[R'' | T'']` (LiDAR to ego).
//!
//! Pixel coordinates address pixel centers at integer values, so the image
//! plane of a `W x H` camera spans `[-0.5, W - 0.5) x [-0.5, H - 0.5)`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-9;

/// A single pinhole camera with its mounting on the ego vehicle.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    /// Camera-to-ego rotation.
    pub rotation: Matrix3<f64>,
    /// Camera-to-ego translation (camera center in ego coordinates).
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

/// Rigid LiDAR-to-ego mounting.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarMount {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl LidarMount {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub lidar: LidarMount,
}

/// Homogeneous `[R | T; 0 1]`.
pub fn rigid_matrix(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

/// Rotation about the ego z axis (counter-clockwise seen from above).
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Camera-to-ego rotation of a level camera whose optical axis points at
/// azimuth `yaw` in the ego frame.
pub fn level_camera_rotation(yaw: f64) -> Matrix3<f64> {
    // Columns are the camera axes expressed in the forward-facing ego frame:
    // x_cam -> -y_ego, y_cam -> -z_ego, z_cam -> +x_ego.
    let forward = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    yaw_rotation(yaw) * forward
}

/// Pinhole intrinsics for an image of `width x height` pixels with the given
/// horizontal field of view, square pixels and a centered principal point.
pub fn intrinsics_from_hfov(width: usize, height: usize, hfov: f64) -> Matrix3<f64> {
    let f = (width as f64 / 2.0) / (hfov / 2.0).tan();
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0)
}

fn check_rotation(r: &Matrix3<f64>, field: &str) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration(format!("{field}: non-finite entry")));
    }
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(Error::Calibration(format!(
            "{field}: rotation not orthonormal (max |R^T R - I| = {err:e})"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::Calibration(format!("{field}: rotation determinant {det} != +1")));
    }
    Ok(())
}

fn check_intrinsics(k: &Matrix3<f64>, field: &str) -> Result<()> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Calibration(format!("{field}: non-finite entry")));
    }
    if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
        return Err(Error::Calibration(format!(
            "{field}: focal entries must be positive (fx={}, fy={})",
            k[(0, 0)],
            k[(1, 1)]
        )));
    }
    if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
        return Err(Error::Calibration(format!("{field}: bottom-left entries must be zero")));
    }
    Ok(())
}

impl Camera {
    pub fn validate(&self, field: &str) -> Result<()> {
        check_intrinsics(&self.intrinsics, &format!("{field}.K"))?;
        check_rotation(&self.rotation, &format!("{field}.R"))?;
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration(format!("{field}.T: non-finite entry")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Calibration(format!("{field}: image size must be positive")));
        }
        Ok(())
    }

    pub fn cam_to_ego(&self) -> Matrix4<f64> {
        rigid_matrix(&self.rotation, &self.translation)
    }

    fn inverse_intrinsics(&self) -> Result<Matrix3<f64>> {
        let inv = self
            .intrinsics
            .try_inverse()
            .ok_or_else(|| Error::Calibration("intrinsic matrix is not invertible".into()))?;
        if inv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("intrinsic matrix is not invertible".into()));
        }
        Ok(inv)
    }

    /// Direction of the ray through pixel `(u, v)` in the ego frame, scaled so
    /// that its camera-frame depth is 1.
    pub fn ray_direction_ego(&self, u: f64, v: f64) -> Result<Vector3<f64>> {
        let kinv = self.inverse_intrinsics()?;
        Ok(self.rotation * (kinv * Vector3::new(u, v, 1.0)))
    }
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, lidar: LidarMount) -> Result<Self> {
        let rig = Self { cameras, lidar };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Calibration("rig must have at least one camera".into()));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate(&format!("cameras[{i}]"))?;
        }
        check_rotation(&self.lidar.rotation, "lidar.R")?;
        if self.lidar.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calibration("lidar.T: non-finite entry".into()));
        }
        Ok(())
    }

    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn camera(&self, index: usize) -> Result<&Camera> {
        self.cameras.get(index).ok_or_else(|| {
            Error::Domain(format!(
                "camera index {index} out of range (rig has {})",
                self.cameras.len()
            ))
        })
    }

    pub fn lidar_to_ego_matrix(&self) -> Matrix4<f64> {
        rigid_matrix(&self.lidar.rotation, &self.lidar.translation)
    }

    /// Surround rig of `count` level cameras at equal yaw spacing, all sharing
    /// one set of intrinsics. Camera `k` looks at azimuth `k * 2pi / count`.
    pub fn surround(
        count: usize,
        width: usize,
        height: usize,
        hfov: f64,
        mount_radius: f64,
        mount_height: f64,
        lidar: LidarMount,
    ) -> Result<Self> {
        let k = intrinsics_from_hfov(width, height, hfov);
        let cameras = (0..count)
            .map(|i| {
                let yaw = i as f64 * 2.0 * PI / count as f64;
                Camera {
                    intrinsics: k,
                    rotation: level_camera_rotation(yaw),
                    translation: Vector3::new(mount_radius * yaw.cos(), mount_radius * yaw.sin(), mount_height),
                    width,
                    height,
                }
            })
            .collect();
        Self::new(cameras, lidar)
    }

    /// The six-camera desk rig: 60 degree spacing, 70 degree horizontal field
    /// of view, cameras 1.6 m above ground, LiDAR 1.8 m above ground yawed by
    /// -90 degrees.
    pub fn desk_default(width: usize, height: usize) -> Self {
        let lidar = LidarMount {
            rotation: yaw_rotation(-PI / 2.0),
            translation: Vector3::new(0.0, 0.0, 1.8),
        };
        Self::surround(6, width, height, 70f64.to_radians(), 0.4, 1.6, lidar).expect("default rig is valid")
    }
}

fn dehomogenize(p: Vector4<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, p.z)
}

/// Unprojects pixel `(u, v)` of camera `camera_index` at camera depth `z_c`
/// into the ego frame.
pub fn pixel_to_ego(rig: &CameraRig, camera_index: usize, u: f64, v: f64, z_c: f64) -> Result<Vector3<f64>> {
    let cam = rig.camera(camera_index)?;
    if !(z_c > 0.0) {
        return Err(Error::Domain(format!("camera depth must be positive, got {z_c}")));
    }
    let kinv = cam.inverse_intrinsics()?;
    let p_cam = kinv * Vector3::new(u, v, 1.0) * z_c;
    Ok(dehomogenize(cam.cam_to_ego() * p_cam.push(1.0)))
}

/// Projects an ego point into camera `camera_index`; returns `(u, v, z_c)`.
/// Points behind the camera yield a non-positive `z_c` and are not rejected.
pub fn ego_to_pixel(rig: &CameraRig, camera_index: usize, p_ego: &Vector3<f64>) -> Result<Vector3<f64>> {
    let cam = rig.camera(camera_index)?;
    let ego_to_cam = cam
        .cam_to_ego()
        .try_inverse()
        .ok_or_else(|| Error::Calibration("camera extrinsic is not invertible".into()))?;
    let p_cam = dehomogenize(ego_to_cam * p_ego.push(1.0));
    let uvw = cam.intrinsics * p_cam;
    Ok(Vector3::new(uvw.x / uvw.z, uvw.y / uvw.z, p_cam.z))
}

pub fn ego_to_lidar(rig: &CameraRig, p_ego: &Vector3<f64>) -> Vector3<f64> {
    let ego_to_lidar = rig
        .lidar_to_ego_matrix()
        .try_inverse()
        .expect("rigid transform with orthonormal rotation is invertible");
    dehomogenize(ego_to_lidar * p_ego.push(1.0))
}

pub fn lidar_to_ego(rig: &CameraRig, p_lidar: &Vector3<f64>) -> Vector3<f64> {
    dehomogenize(rig.lidar_to_ego_matrix() * p_lidar.push(1.0))
}

pub fn pixel_to_lidar(rig: &CameraRig, camera_index: usize, u: f64, v: f64, z_c: f64) -> Result<Vector3<f64>> {
    let p_ego = pixel_to_ego(rig, camera_index, u, v, z_c)?;
    Ok(ego_to_lidar(rig, &p_ego))
}

/// Feature-plane size and depth bin layout of a camera frustum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrustumSpec {
    pub feature_h: usize,
    pub feature_w: usize,
    pub depth_bins: Vec<f64>,
}

impl FrustumSpec {
    pub fn new(feature_h: usize, feature_w: usize, depth_bins: Vec<f64>) -> Result<Self> {
        let spec = Self {
            feature_h,
            feature_w,
            depth_bins,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `bins` centers uniformly spaced over `[d_min, d_max]`, endpoints included.
    pub fn uniform(feature_h: usize, feature_w: usize, bins: usize, d_min: f64, d_max: f64) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Domain(format!("need at least 2 depth bins, got {bins}")));
        }
        let step = (d_max - d_min) / (bins - 1) as f64;
        let centers = (0..bins).map(|i| d_min + step * i as f64).collect();
        Self::new(feature_h, feature_w, centers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_h == 0 || self.feature_w == 0 {
            return Err(Error::Domain("feature plane must be non-empty".into()));
        }
        if self.depth_bins.len() < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 depth bins, got {}",
                self.depth_bins.len()
            )));
        }
        if self.depth_bins.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Domain("depth bin centers must be positive".into()));
        }
        if self.depth_bins.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("depth bin centers must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.depth_bins.len()
    }

    pub fn num_points(&self) -> usize {
        self.feature_h * self.feature_w * self.depth_bins.len()
    }

    /// Full-resolution pixel center of feature cell `(h, w)`.
    pub fn cell_center_pixel(&self, cam: &Camera, h: usize, w: usize) -> (f64, f64) {
        let sx = cam.width as f64 / self.feature_w as f64;
        let sy = cam.height as f64 / self.feature_h as f64;
        ((w as f64 + 0.5) * sx - 0.5, (h as f64 + 0.5) * sy - 0.5)
    }

    /// Feature cell containing full-resolution pixel coordinate `(u, v)`.
    pub fn pixel_to_cell(&self, cam: &Camera, u: f64, v: f64) -> Option<(usize, usize)> {
        let w = ((u + 0.5) * self.feature_w as f64 / cam.width as f64).floor();
        let h = ((v + 0.5) * self.feature_h as f64 / cam.height as f64).floor();
        if w < 0.0 || h < 0.0 || w >= self.feature_w as f64 || h >= self.feature_h as f64 {
            return None;
        }
        Some((h as usize, w as usize))
    }

    /// Index of the bin whose center is nearest to `depth`.
    pub fn nearest_bin(&self, depth: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, c) in self.depth_bins.iter().enumerate() {
            let d = (depth - c).abs();
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        best
    }
}

/// Ego-frame frustum points of one camera, ordered depth-major, then feature
/// row, then feature column: index `(d * H_f + h) * W_f + w`.
pub fn frustum_points(rig: &CameraRig, spec: &FrustumSpec, camera_index: usize) -> Result<Vec<Vector3<f64>>> {
    spec.validate()?;
    let cam = rig.camera(camera_index)?;
    let mut out = Vec::with_capacity(spec.num_points());
    for &depth in &spec.depth_bins {
        for h in 0..spec.feature_h {
            for w in 0..spec.feature_w {
                let (u, v) = spec.cell_center_pixel(cam, h, w);
                out.push(pixel_to_ego(rig, camera_index, u, v, depth)?);
            }
        }
    }
    Ok(out)
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// Azimuth interval `[min, min + width]` in the ego frame. `max` may exceed
/// pi when the interval straddles the negative x axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sector {
    pub min: f64,
    pub max: f64,
}

impl Sector {
    pub fn full() -> Self {
        Self { min: -PI, max: PI }
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, azimuth: f64) -> bool {
        if self.width() >= 2.0 * PI {
            return true;
        }
        let mut offset = (azimuth - self.min) % (2.0 * PI);
        if offset < 0.0 {
            offset += 2.0 * PI;
        }
        offset <= self.width()
    }
}

/// Azimuth sector spanned by the four image-corner rays of a camera.
pub fn camera_fov_sector(rig: &CameraRig, camera_index: usize) -> Result<Sector> {
    let cam = rig.camera(camera_index)?;
    let axis = cam.rotation * Vector3::new(0.0, 0.0, 1.0);
    if axis.x.hypot(axis.y) < 1e-12 {
        return Err(Error::Calibration(format!(
            "camera {camera_index} looks straight up or down; azimuth sector undefined"
        )));
    }
    let center = axis.y.atan2(axis.x);
    let umax = cam.width as f64 - 0.5;
    let vmax = cam.height as f64 - 0.5;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (u, v) in [(-0.5, -0.5), (umax, -0.5), (-0.5, vmax), (umax, vmax)] {
        let d = cam.ray_direction_ego(u, v)?;
        let rel = wrap_angle(d.y.atan2(d.x) - center);
        lo = lo.min(rel);
        hi = hi.max(rel);
    }
    if hi - lo >= PI {
        return Err(Error::Calibration(format!(
            "camera {camera_index} field of view spans >= pi in azimuth"
        )));
    }
    let min = wrap_angle(center + lo);
    Ok(Sector {
        min,
        max: min + (hi - lo),
    })
}

#[derive(Serialize, Deserialize)]
struct CalibCamera {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "T")]
    t: [f64; 3],
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CalibLidar {
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "T")]
    t: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibFile {
    cameras: Vec<CalibCamera>,
    lidar: CalibLidar,
}

fn mat_row_major(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

impl CameraRig {
    pub fn to_calibration_json(&self) -> String {
        let file = CalibFile {
            cameras: self
                .cameras
                .iter()
                .map(|c| CalibCamera {
                    k: mat_row_major(&c.intrinsics),
                    r: mat_row_major(&c.rotation),
                    t: [c.translation.x, c.translation.y, c.translation.z],
                    width: c.width,
                    height: c.height,
                })
                .collect(),
            lidar: CalibLidar {
                r: mat_row_major(&self.lidar.rotation),
                t: [
                    self.lidar.translation.x,
                    self.lidar.translation.y,
                    self.lidar.translation.z,
                ],
            },
        };
        serde_json::to_string_pretty(&file).expect("calibration serializes")
    }

    /// Parses and validates a calibration document. Parse errors carry the
    /// line and column, invariant violations name the offending field.
    pub fn from_calibration_json(text: &str) -> Result<Self> {
        let file: CalibFile = serde_json::from_str(text)
            .map_err(|e| Error::Calibration(format!("line {} column {}: {e}", e.line(), e.column())))?;
        let cameras = file
            .cameras
            .iter()
            .map(|c| Camera {
                intrinsics: Matrix3::from_row_slice(&c.k),
                rotation: Matrix3::from_row_slice(&c.r),
                translation: Vector3::from_row_slice(&c.t),
                width: c.width,
                height: c.height,
            })
            .collect();
        let lidar = LidarMount {
            rotation: Matrix3::from_row_slice(&file.lidar.r),
            translation: Vector3::from_row_slice(&file.lidar.t),
        };
        Self::new(cameras, lidar)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Calibration(format!("missing calibration file {}", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::from_calibration_json(&text).map_err(|e| match e {
            Error::Calibration(m) => Error::Calibration(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
