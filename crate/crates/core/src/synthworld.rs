//! Synthetic multi-view driving scenes: boxes on a ground plane, a spinning
//! LiDAR, flat-shaded camera images and the derived supervision targets.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev_masks::{GridSpec, LidarPoint, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{ego_to_pixel, CameraRig, FrustumSpec};
use crate::metrics::GtBox;
use crate::tensor::Tensor;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const HIT_EPS: f64 = 1e-9;
/// Minimum BEV gap between placed boxes (meters).
const PLACEMENT_GAP: f64 = 0.5;
/// Gaussian sigma of a GT center as a fraction of the box BEV diagonal.
pub const HEATMAP_SIGMA_SCALE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassTemplate {
    pub name: &'static str,
    /// Nominal length, width, height in meters.
    pub size: [f64; 3],
    pub color: [f64; 3],
}

pub const CLASSES: [ClassTemplate; 3] = [
    ClassTemplate {
        name: "car",
        size: [4.2, 1.8, 1.5],
        color: [0.85, 0.2, 0.15],
    },
    ClassTemplate {
        name: "pillar",
        size: [0.8, 0.8, 1.8],
        color: [0.2, 0.35, 0.9],
    },
    ClassTemplate {
        name: "truck",
        size: [6.5, 2.5, 2.8],
        color: [0.95, 0.8, 0.2],
    },
];

/// An oriented box resting on the ground (ego frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub class: usize,
    pub center: [f64; 3],
    /// Length (along heading), width, height.
    pub size: [f64; 3],
    pub yaw: f64,
}

impl SceneBox {
    /// BEV footprint corners, counter-clockwise.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
            .map(|(a, b)| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }

    pub fn bev_diagonal(&self) -> f64 {
        self.size[0].hypot(self.size[1])
    }

    fn local_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - Vector3::from(self.center);
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn dir_to_local(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn dir_to_ego(&self, d: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x - s * d.y, s * d.x + c * d.y, d.z)
    }

    pub fn gt(&self) -> GtBox {
        GtBox {
            class: self.class,
            x: self.center[0],
            y: self.center[1],
        }
    }
}

/// Ray parameter of the entry point and the outward face normal (ego frame).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub normal: Vector3<f64>,
}

/// Slab test of the ray `origin + t * dir`, `t > 0`, against an oriented box.
pub fn ray_box_hit(origin: &Vector3<f64>, dir: &Vector3<f64>, b: &SceneBox) -> Option<RayHit> {
    let o = b.local_point(origin);
    let d = b.dir_to_local(dir);
    let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = -1.0;
    for i in 0..3 {
        if d[i].abs() < 1e-15 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let t1 = (-half[i] - o[i]) / d[i];
        let t2 = (half[i] - o[i]) / d[i];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            axis = i;
            sign = if d[i] > 0.0 { -1.0 } else { 1.0 };
        }
        t_far = t_far.min(hi);
    }
    if t_near > t_far || t_near <= HIT_EPS {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = sign;
    Some(RayHit {
        t: t_near,
        normal: b.dir_to_ego(&n),
    })
}

/// What a ray hit first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Box(usize),
    Ground,
}

/// Nearest hit among the boxes and the ground plane `z = 0`.
pub fn trace(origin: &Vector3<f64>, dir: &Vector3<f64>, boxes: &[SceneBox], max_t: f64) -> Option<(RayHit, Surface)> {
    let mut best: Option<(RayHit, Surface)> = None;
    if dir.z < 0.0 && origin.z > 0.0 {
        let t = -origin.z / dir.z;
        if t <= max_t {
            best = Some((
                RayHit {
                    t,
                    normal: Vector3::z(),
                },
                Surface::Ground,
            ));
        }
    }
    for (i, b) in boxes.iter().enumerate() {
        if let Some(h) = ray_box_hit(origin, dir, b) {
            if h.t <= max_t && best.is_none_or(|(bh, _)| h.t < bh.t) {
                best = Some((h, Surface::Box(i)));
            }
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPattern {
    /// Ring elevation angles in radians, in the LiDAR frame.
    pub ring_elevations: Vec<f64>,
    pub azimuth_step: f64,
    pub max_range: f64,
}

impl LidarPattern {
    /// `rings` elevations evenly spread over `[min_deg, max_deg]`.
    pub fn uniform(rings: usize, min_deg: f64, max_deg: f64, azimuth_step_deg: f64, max_range: f64) -> Self {
        let step = if rings > 1 {
            (max_deg - min_deg) / (rings - 1) as f64
        } else {
            0.0
        };
        Self {
            ring_elevations: (0..rings).map(|i| (min_deg + step * i as f64).to_radians()).collect(),
            azimuth_step: azimuth_step_deg.to_radians(),
            max_range,
        }
    }

    pub fn azimuth_count(&self) -> usize {
        (2.0 * PI / self.azimuth_step).round() as usize
    }
}

impl Default for LidarPattern {
    fn default() -> Self {
        Self::uniform(16, -16.0, 2.0, 0.5, 80.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub boxes: Vec<SceneBox>,
    pub rig: CameraRig,
    pub lidar: LidarPattern,
    pub seed: u64,
}

/// Placement limits for scene generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementSpec {
    pub extent: GridSpec,
    /// Box centers keep at least this distance from the ego origin.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Relative jitter applied to each template dimension.
    pub size_jitter: f64,
}

impl PlacementSpec {
    pub fn new(extent: GridSpec) -> Self {
        Self {
            extent,
            min_radius: 4.0,
            max_radius: 30.0,
            size_jitter: 0.1,
        }
    }
}

/// Separating-axis test on two convex quads, with footprints considered
/// overlapping when their projections are closer than `gap`.
fn footprints_overlap(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4], gap: f64) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let (p, q) = (poly[i], poly[(i + 1) % 4]);
            let axis = [q[1] - p[1], p[0] - q[0]];
            let len = axis[0].hypot(axis[1]);
            let axis = [axis[0] / len, axis[1] / len];
            let proj = |poly: &[[f64; 2]; 4]| {
                poly.iter()
                    .map(|v| v[0] * axis[0] + v[1] * axis[1])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
            };
            let (a0, a1) = proj(a);
            let (b0, b1) = proj(b);
            if a1 + gap <= b0 || b1 + gap <= a0 {
                return false;
            }
        }
    }
    true
}

/// Places `n_boxes` non-overlapping boxes drawn from the first `class_count`
/// templates. Deterministic in `seed`.
pub fn generate_scene(
    seed: u64,
    n_boxes: usize,
    class_count: usize,
    placement: &PlacementSpec,
    rig: &CameraRig,
    lidar: &LidarPattern,
) -> Result<Scene> {
    if class_count == 0 || class_count > CLASSES.len() {
        return Err(Error::Config(format!(
            "class count must be in 1..={}, got {class_count}",
            CLASSES.len()
        )));
    }
    let ext = &placement.extent;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes: Vec<SceneBox> = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let class = rng.gen_range(0..class_count);
            let t = &CLASSES[class];
            let j = placement.size_jitter;
            let size = t.size.map(|s| s * (1.0 + rng.gen_range(-j..=j)));
            let x = rng.gen_range(ext.x_min..ext.x_max);
            let y = rng.gen_range(ext.y_min..ext.y_max);
            let yaw = rng.gen_range(-PI..PI);
            let r = x.hypot(y);
            if r < placement.min_radius || r > placement.max_radius {
                continue;
            }
            let candidate = SceneBox {
                class,
                center: [x, y, size[2] / 2.0],
                size,
                yaw,
            };
            let fp = candidate.footprint();
            let inside = fp
                .iter()
                .all(|c| c[0] > ext.x_min && c[0] < ext.x_max && c[1] > ext.y_min && c[1] < ext.y_max);
            if !inside
                || boxes
                    .iter()
                    .any(|b| footprints_overlap(&fp, &b.footprint(), PLACEMENT_GAP))
            {
                continue;
            }
            boxes.push(candidate);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation {
                placed: boxes.len(),
                requested: n_boxes,
            });
        }
    }
    Ok(Scene {
        boxes,
        rig: rig.clone(),
        lidar: lidar.clone(),
        seed,
    })
}

/// One LiDAR return with the surface that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarReturn {
    /// LiDAR-frame position.
    pub point: Vector3<f64>,
    pub surface: Surface,
}

/// Ray-casts every `(ring, azimuth)` beam of the scene's LiDAR.
pub fn cast_lidar_returns(scene: &Scene) -> Vec<LidarReturn> {
    let mount = &scene.rig.lidar;
    let origin = mount.translation;
    let n_az = scene.lidar.azimuth_count();
    let mut out = Vec::new();
    for &el in &scene.lidar.ring_elevations {
        let (se, ce) = el.sin_cos();
        for a in 0..n_az {
            let az = a as f64 * scene.lidar.azimuth_step;
            let (sa, ca) = az.sin_cos();
            let dir_l = Vector3::new(ce * ca, ce * sa, se);
            let dir = mount.rotation * dir_l;
            if let Some((hit, surface)) = trace(&origin, &dir, &scene.boxes, scene.lidar.max_range) {
                out.push(LidarReturn {
                    point: dir_l * hit.t,
                    surface,
                });
            }
        }
    }
    out
}

pub fn cast_lidar(scene: &Scene) -> PointCloud {
    PointCloud {
        points: cast_lidar_returns(scene)
            .into_iter()
            .map(|r| LidarPoint {
                position: [r.point.x, r.point.y, r.point.z],
                intensity: match r.surface {
                    Surface::Box(_) => 1.0,
                    Surface::Ground => 0.2,
                },
            })
            .collect(),
    }
}

/// RGB image in row-major `(y, x, channel)` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(path, "truncated PPM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(Error::format(
                path,
                "only binary 8-bit PPM (P6, maxval 255) is supported",
            ));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad PPM size '{s}'")))
        };
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() != width * height * 3 {
            return Err(Error::format(path, "PPM payload size does not match header"));
        }
        Ok(Self {
            width,
            height,
            pixels: body.to_vec(),
        })
    }
}

const SUN: [f64; 3] = [0.4, 0.3, 0.866];

fn shade(dir: &Vector3<f64>, origin: &Vector3<f64>, hit: Option<(RayHit, Surface)>, boxes: &[SceneBox]) -> [f64; 3] {
    match hit {
        None => {
            let up = (dir.z / dir.norm()).clamp(0.0, 1.0);
            [0.55 + 0.2 * up, 0.7 + 0.15 * up, 0.9]
        }
        Some((h, Surface::Ground)) => {
            let p = origin + dir * h.t;
            let checker = ((p.x / 2.0).floor() as i64 + (p.y / 2.0).floor() as i64).rem_euclid(2);
            let v = if checker == 0 { 0.42 } else { 0.3 };
            [v, v, v * 0.95]
        }
        Some((h, Surface::Box(i))) => {
            let sun = Vector3::from(SUN).normalize();
            let lambert = h.normal.dot(&sun).max(0.0);
            let k = 0.45 + 0.55 * lambert;
            CLASSES[boxes[i].class].color.map(|c| c * k)
        }
    }
}

/// Renders camera `camera_index` by casting one ray per pixel center.
pub fn render_image(scene: &Scene, camera_index: usize) -> Result<RgbImage> {
    let cam = scene.rig.camera(camera_index)?;
    let origin = cam.translation;
    let mut pixels = Vec::with_capacity(cam.width * cam.height * 3);
    for v in 0..cam.height {
        for u in 0..cam.width {
            let dir = cam.ray_direction_ego(u as f64, v as f64)?;
            let hit = trace(&origin, &dir, &scene.boxes, f64::INFINITY);
            for c in shade(&dir, &origin, hit, &scene.boxes) {
                pixels.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(RgbImage {
        width: cam.width,
        height: cam.height,
        pixels,
    })
}

/// Sparse depth target of one camera on the feature plane: the minimum
/// camera-frame depth of the LiDAR points landing in each cell, 0 where none.
pub fn render_depth_gt(
    cloud: &PointCloud,
    rig: &CameraRig,
    camera_index: usize,
    frustum: &FrustumSpec,
) -> Result<Vec<f64>> {
    let cam = rig.camera(camera_index)?;
    let mut out = vec![0.0; frustum.feature_h * frustum.feature_w];
    let l2e = rig.lidar_to_ego_matrix();
    for p in &cloud.points {
        let e = l2e * nalgebra::Vector4::new(p.position[0], p.position[1], p.position[2], 1.0);
        let px = ego_to_pixel(rig, camera_index, &Vector3::new(e.x, e.y, e.z))?;
        let (u, v, z) = (px.x, px.y, px.z);
        if !(z > 0.0) || u < -0.5 || v < -0.5 || u >= cam.width as f64 - 0.5 || v >= cam.height as f64 - 0.5 {
            continue;
        }
        if let Some((h, w)) = frustum.pixel_to_cell(cam, u, v) {
            let cell = &mut out[h * frustum.feature_w + w];
            if *cell == 0.0 || z < *cell {
                *cell = z;
            }
        }
    }
    Ok(out)
}

/// Per-class center heatmap `(classes, rows, cols)`: a Gaussian of sigma
/// `HEATMAP_SIGMA_SCALE * diagonal` (in cells) at each box center cell,
/// combined by maximum.
pub fn splat_gt_heatmap(boxes: &[SceneBox], grid: &GridSpec, classes: usize) -> Tensor {
    let (rows, cols) = (grid.rows, grid.cols);
    let mut out = Tensor::zeros(&[classes, rows, cols]);
    let cell = grid.dx().min(grid.dy());
    for b in boxes {
        let Some((ci, cj)) = grid.cell_of(b.center[0], b.center[1]) else {
            continue;
        };
        if b.class >= classes {
            continue;
        }
        let sigma = HEATMAP_SIGMA_SCALE * b.bev_diagonal() / cell;
        let radius = (3.0 * sigma).ceil() as i64;
        let plane = &mut out.data_mut()[b.class * rows * cols..(b.class + 1) * rows * cols];
        for di in -radius..=radius {
            for dj in -radius..=radius {
                let (i, j) = (ci as i64 + di, cj as i64 + dj);
                if i < 0 || j < 0 || i >= rows as i64 || j >= cols as i64 {
                    continue;
                }
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = &mut plane[i as usize * cols + j as usize];
                *slot = slot.max(v);
            }
        }
    }
    out
}

/// Derives a per-scene seed from the dataset seed and scene index.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtFile {
    pub split: Split,
    pub seed: u64,
    pub boxes: Vec<SceneBox>,
}

/// Raw files of one generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFiles {
    pub images: Vec<RgbImage>,
    pub cloud: PointCloud,
    pub gt: GtFile,
}

pub fn render_scene(scene: &Scene, split: Split) -> Result<SceneFiles> {
    let images = (0..scene.rig.num_cameras())
        .map(|k| render_image(scene, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneFiles {
        images,
        cloud: cast_lidar(scene),
        gt: GtFile {
            split,
            seed: scene.seed,
            boxes: scene.boxes.clone(),
        },
    })
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join("scenes").join(format!("{index:04}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `images/cam<k>.ppm`, `cloud.pcbv`, `calib.json` and `gt.json`,
/// returning the written paths.
pub fn write_scene(dir: &Path, files: &SceneFiles, rig: &CameraRig) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (k, img) in files.images.iter().enumerate() {
        let p = dir.join("images").join(format!("cam{k}.ppm"));
        write(&p, &img.to_ppm())?;
        paths.push(p);
    }
    let p = dir.join("cloud.pcbv");
    write(&p, &files.cloud.to_pcbv_bytes())?;
    paths.push(p);
    let p = dir.join("calib.json");
    write(&p, rig.to_calibration_json().as_bytes())?;
    paths.push(p);
    let p = dir.join("gt.json");
    let json = serde_json::to_string_pretty(&files.gt).expect("gt serializes");
    write(&p, json.as_bytes())?;
    paths.push(p);
    Ok(paths)
}

/// A scene loaded from disk with its training targets.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub split: Split,
    /// `(K, 3, H, W)` in `[0, 1]`.
    pub images: Tensor,
    pub cloud: PointCloud,
    pub rig: CameraRig,
    /// `K * Hf * Wf` sparse depth, 0 where unsupervised.
    pub depth_gt: Vec<f64>,
    /// `(classes, rows, cols)`.
    pub heatmap: Tensor,
    pub boxes: Vec<SceneBox>,
}

impl Sample {
    pub fn gt_boxes(&self) -> Vec<GtBox> {
        self.boxes.iter().map(SceneBox::gt).collect()
    }
}

pub fn load_sample(dir: &Path, index: usize, frustum: &FrustumSpec, grid: &GridSpec, classes: usize) -> Result<Sample> {
    let rig = CameraRig::load(&dir.join("calib.json"))?;
    let gt_path = dir.join("gt.json");
    let text = std::fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    let gt: GtFile = serde_json::from_str(&text).map_err(|e| Error::format(&gt_path, e.to_string()))?;
    let cloud = PointCloud::read_pcbv(&dir.join("cloud.pcbv"))?;
    let k = rig.num_cameras();
    let (h, w) = (rig.cameras[0].height, rig.cameras[0].width);
    let mut data = Vec::with_capacity(k * 3 * h * w);
    for kk in 0..k {
        let p = dir.join("images").join(format!("cam{kk}.ppm"));
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let img = RgbImage::from_ppm(&bytes, &p)?;
        if img.width != w || img.height != h {
            return Err(Error::format(
                &p,
                format!("expected {w}x{h} image, found {}x{}", img.width, img.height),
            ));
        }
        for c in 0..3 {
            data.extend(img.pixels.iter().skip(c).step_by(3).map(|&b| b as f64 / 255.0));
        }
    }
    let images = Tensor::new(&[k, 3, h, w], data)?;
    let mut depth_gt = Vec::with_capacity(k * frustum.feature_h * frustum.feature_w);
    for kk in 0..k {
        depth_gt.extend(render_depth_gt(&cloud, &rig, kk, frustum)?);
    }
    let heatmap = splat_gt_heatmap(&gt.boxes, grid, classes);
    Ok(Sample {
        index,
        split: gt.split,
        images,
        cloud,
        rig,
        depth_gt,
        heatmap,
        boxes: gt.boxes,
    })
}

/// Scene indices of `split` found under `root/scenes`, ascending.
pub fn list_split(root: &Path, split: Split) -> Result<Vec<usize>> {
    let scenes = root.join("scenes");
    let entries = std::fs::read_dir(&scenes).map_err(|e| Error::io(&scenes, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&scenes, e))?;
        let Some(index) = entry.file_name().to_str().and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        let gt_path = entry.path().join("gt.json");
        let text = std::fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
        let gt: GtFile = serde_json::from_str(&text).map_err(|e| Error::format(&gt_path, e.to_string()))?;
        if gt.split == split {
            out.push(index);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Human-readable one-line description of a scene.
pub fn describe(scene: &Scene) -> String {
    let mut s = format!("seed {} with {} boxes:", scene.seed, scene.boxes.len());
    for b in &scene.boxes {
        let _ = write!(s, " {}@({:.1},{:.1})", CLASSES[b.class].name, b.center[0], b.center[1]);
    }
    s
}
