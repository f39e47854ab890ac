//! Independent reference implementations used by the integration and
//! acceptance tests. Each one is written for clarity rather than speed and
//! shares no code with the library routine it checks.
#![allow(dead_code)]

use std::f64::consts::PI;

use lgkd::bev_masks::{GridSpec, LidarPoint, PointCloud};
use lgkd::geometry::{Camera, CameraRig, LidarMount};
use lgkd::metrics::{Detection, GtBox};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
    Rotation3::from_axis_angle(&Unit::new_normalize(axis), rng.gen_range(-PI..PI)).into_inner()
}

pub fn random_rig(rng: &mut ChaCha8Rng, cameras: usize) -> CameraRig {
    let cams = (0..cameras)
        .map(|_| {
            let (w, h) = (rng.gen_range(16..200), rng.gen_range(16..120));
            let f = rng.gen_range(20.0..400.0);
            Camera {
                intrinsics: Matrix3::new(
                    f,
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.0..w as f64),
                    0.0,
                    f * rng.gen_range(0.8..1.2),
                    rng.gen_range(0.0..h as f64),
                    0.0,
                    0.0,
                    1.0,
                ),
                rotation: random_rotation(rng),
                translation: Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(0.0..3.0),
                ),
                width: w,
                height: h,
            }
        })
        .collect();
    let lidar = LidarMount {
        rotation: random_rotation(rng),
        translation: Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(0.0..3.0),
        ),
    };
    CameraRig::new(cams, lidar).unwrap()
}

/// Row-major 4x4 product.
fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut c = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..4 {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

fn homogeneous(r: &Matrix3<f64>, t: &Vector3<f64>) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[(i, j)];
        }
        m[i][3] = t[i];
    }
    m[3][3] = 1.0;
    m
}

/// Inverse of `[R | T; 0 1]` as `[R^T | -R^T T; 0 1]`.
fn rigid_inverse(r: &Matrix3<f64>, t: &Vector3<f64>) -> [[f64; 4]; 4] {
    let rt = r.transpose();
    homogeneous(&rt, &(-(rt * t)))
}

fn apply(m: &[[f64; 4]; 4], p: [f64; 3]) -> [f64; 3] {
    let h = [p[0], p[1], p[2], 1.0];
    let mut o = [0.0; 3];
    for (i, oi) in o.iter_mut().enumerate() {
        *oi = (0..4).map(|k| m[i][k] * h[k]).sum();
    }
    o
}

/// Unprojects through an upper-triangular `K` by back substitution, then
/// applies the camera-to-ego homogeneous matrix.
pub fn pixel_to_ego_oracle(cam: &Camera, u: f64, v: f64, z: f64) -> [f64; 3] {
    let k = &cam.intrinsics;
    let y = (v - k[(1, 2)]) / k[(1, 1)];
    let x = (u - k[(0, 2)] - k[(0, 1)] * y) / k[(0, 0)];
    apply(&homogeneous(&cam.rotation, &cam.translation), [x * z, y * z, z])
}

pub fn ego_to_lidar_oracle(rig: &CameraRig, p: [f64; 3]) -> [f64; 3] {
    apply(&rigid_inverse(&rig.lidar.rotation, &rig.lidar.translation), p)
}

/// Full pixel to LiDAR chain as one composed homogeneous matrix.
pub fn pixel_to_lidar_oracle(rig: &CameraRig, k: usize, u: f64, v: f64, z: f64) -> [f64; 3] {
    let cam = &rig.cameras[k];
    let kk = &cam.intrinsics;
    let y = (v - kk[(1, 2)]) / kk[(1, 1)];
    let x = (u - kk[(0, 2)] - kk[(0, 1)] * y) / kk[(0, 0)];
    let m = mat4_mul(
        &rigid_inverse(&rig.lidar.rotation, &rig.lidar.translation),
        &homogeneous(&cam.rotation, &cam.translation),
    );
    apply(&m, [x * z, y * z, z])
}

pub fn to_ego(rig: &CameraRig, p: [f64; 3]) -> [f64; 3] {
    apply(&homogeneous(&rig.lidar.rotation, &rig.lidar.translation), p)
}

/// Occupied cells by per-point floor indexing.
pub fn voxel_oracle(cloud: &PointCloud, rig: &CameraRig, g: &GridSpec, z_lo: f64, z_hi: f64) -> Vec<f64> {
    let mut out = vec![0.0; g.rows * g.cols];
    for p in &cloud.points {
        let e = to_ego(rig, p.position);
        if !(e[2] >= z_lo && e[2] < z_hi) {
            continue;
        }
        let col = ((e[0] - g.x_min) / ((g.x_max - g.x_min) / g.cols as f64)).floor();
        let row = ((e[1] - g.y_min) / ((g.y_max - g.y_min) / g.rows as f64)).floor();
        if col >= 0.0 && row >= 0.0 && (col as usize) < g.cols && (row as usize) < g.rows {
            out[row as usize * g.cols + col as usize] = 1.0;
        }
    }
    out
}

/// Dense 2-D truncated Gaussian convolution with zero padding, then peak
/// rescale.
pub fn smooth_oracle(mask: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows as i64 {
        for j in 0..cols as i64 {
            let mut acc = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    let (y, x) = (i + di, j + dj);
                    if y < 0 || x < 0 || y >= rows as i64 || x >= cols as i64 {
                        continue;
                    }
                    let w = (-((di * di) as f64) / (2.0 * sigma * sigma)).exp()
                        * (-((dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                    acc += w * mask[y as usize * cols + x as usize];
                }
            }
            out[i as usize * cols + j as usize] = acc;
        }
    }
    let peak = out.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

/// Azimuth interval membership, handling intervals that wrap across pi.
pub fn in_interval(az: f64, lo: f64, hi: f64) -> bool {
    let width = hi - lo;
    if width >= 2.0 * PI - 1e-12 {
        return true;
    }
    let rel = (az - lo).rem_euclid(2.0 * PI);
    rel <= width + 1e-12
}

/// Horizontal azimuth of the image-corner rays of a level camera.
pub fn corner_azimuths(cam: &Camera) -> Vec<f64> {
    let kinv = cam.intrinsics.try_inverse().unwrap();
    let (w, h) = (cam.width as f64, cam.height as f64);
    [(-0.5, -0.5), (w - 0.5, -0.5), (-0.5, h - 0.5), (w - 0.5, h - 0.5)]
        .iter()
        .map(|&(u, v)| {
            let d = cam.rotation * (kinv * Vector3::new(u, v, 1.0));
            d.y.atan2(d.x)
        })
        .collect()
}

/// Lift-splat by explicit loops over `(k, c, d, h, w)`.
#[allow(clippy::too_many_arguments)]
pub fn lift_splat_oracle(
    feat: &[f64],
    depth: &[f64],
    cells: &[u32],
    k: usize,
    c: usize,
    d: usize,
    hf: usize,
    wf: usize,
    n_cells: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * n_cells];
    for kk in 0..k {
        for dd in 0..d {
            for h in 0..hf {
                for w in 0..wf {
                    let cell = cells[((kk * d + dd) * hf + h) * wf + w];
                    if cell == u32::MAX {
                        continue;
                    }
                    for cc in 0..c {
                        out[cc * n_cells + cell as usize] +=
                            depth[((kk * d + dd) * hf + h) * wf + w] * feat[((kk * c + cc) * hf + h) * wf + w];
                    }
                }
            }
        }
    }
    out
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Temperature cross-entropy, teacher as target, per pixel then averaged.
pub fn coarse_oracle(s: &[f64], t: &[f64], k: usize, d: usize, plane: usize, temp: f64) -> f64 {
    let mut total = 0.0;
    for kk in 0..k {
        for p in 0..plane {
            let col = |x: &[f64]| (0..d).map(|dd| x[(kk * d + dd) * plane + p] / temp).collect::<Vec<_>>();
            let pt = softmax(&col(t));
            let qs = softmax(&col(s));
            total -= pt.iter().zip(&qs).map(|(a, b)| a * b.ln()).sum::<f64>();
        }
    }
    temp * temp * total / (k * plane) as f64
}

pub fn bce_oracle(s: &[f64], t: &[f64]) -> f64 {
    let n = s.len() as f64;
    s.iter()
        .zip(t)
        .map(|(&p, &y)| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

pub fn focal_oracle(p: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    let mut n = 0.0;
    let mut s = 0.0;
    for (&pi, &yi) in p.iter().zip(y) {
        let pi = pi.clamp(1e-7, 1.0 - 1e-7);
        if yi == 1.0 {
            n += 1.0;
            s += (1.0 - pi).powf(a) * pi.ln();
        } else {
            s += (1.0 - yi).powf(b) * pi.powf(a) * (1.0 - pi).ln();
        }
    }
    -s / if n > 0.0 { n } else { 1.0 }
}

pub fn sil_oracle(y: &[f64], gt: &[f64]) -> f64 {
    let d: Vec<f64> = y
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g > 0.0)
        .map(|(p, g)| p.ln() - g.ln())
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (2.0 * n)
}

pub fn bev_oracle(s: &[f64], t: &[f64], masks: &[Vec<f64>], c: usize, plane: usize) -> f64 {
    let mut num = 0.0;
    let mut mass = 0.0;
    for m in masks {
        for cc in 0..c {
            for p in 0..plane {
                let diff = m[p] * t[cc * plane + p] - m[p] * s[cc * plane + p];
                num += diff * diff;
            }
        }
        mass += m.iter().sum::<f64>();
    }
    num / (c as f64 * mass + 1e-8)
}

/// Depth metrics computed field by field in separate passes.
pub fn depth_oracle(pred: &[f64], gt: &[f64], max_range: f64) -> [f64; 7] {
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g > 0.0 && **g <= max_range)
        .map(|(p, g)| (*p, *g))
        .collect();
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
    let acc = |t: f64| pairs.iter().filter(|&&(p, g)| (p / g).max(g / p) < t).count() as f64 / n;
    [
        mean(&|p, g| (p - g).abs() / g),
        mean(&|p, g| (p - g).powi(2) / g),
        mean(&|p, g| (p - g).powi(2)).sqrt(),
        mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        acc(1.25),
        acc(1.25 * 1.25),
        acc(1.25 * 1.25 * 1.25),
    ]
}

/// Greedy matching by repeated selection of the best remaining prediction;
/// returns (AP over classes with GT and radii, ATE at 2 m).
pub fn detection_oracle(frames: &[(Vec<Detection>, Vec<GtBox>)], classes: usize, radii: &[f64]) -> (f64, Option<f64>) {
    let mut aps = Vec::new();
    let mut tp_d = Vec::new();
    for c in 0..classes {
        let n_gt: usize = frames
            .iter()
            .map(|(_, g)| g.iter().filter(|b| b.class == c).count())
            .sum();
        let mut per_radius = Vec::new();
        for &r in radii {
            let mut pending: Vec<(usize, usize)> = Vec::new();
            for (f, (p, _)) in frames.iter().enumerate() {
                for (i, d) in p.iter().enumerate() {
                    if d.class == c {
                        pending.push((f, i));
                    }
                }
            }
            let mut used: Vec<Vec<bool>> = frames.iter().map(|(_, g)| vec![false; g.len()]).collect();
            let mut flags = Vec::new();
            while !pending.is_empty() {
                let mut bi = 0;
                for (idx, &(f, i)) in pending.iter().enumerate() {
                    let (bf, bii) = pending[bi];
                    if frames[f].0[i].score > frames[bf].0[bii].score {
                        bi = idx;
                    }
                }
                let (f, i) = pending.remove(bi);
                let p = frames[f].0[i];
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in frames[f].1.iter().enumerate() {
                    let dist = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
                    if g.class == c && !used[f][j] && dist <= r && best.is_none_or(|b| dist < b.1) {
                        best = Some((j, dist));
                    }
                }
                if let Some((j, dist)) = best {
                    used[f][j] = true;
                    if r == 2.0 {
                        tp_d.push(dist);
                    }
                }
                flags.push(best.is_some());
            }
            if n_gt == 0 {
                continue;
            }
            let mut pts = Vec::new();
            let mut tp = 0.0;
            for (i, &hit) in flags.iter().enumerate() {
                if hit {
                    tp += 1.0;
                }
                pts.push((tp / n_gt as f64, tp / (i + 1) as f64));
            }
            let mut area = 0.0;
            if let Some(&(_, p0)) = pts.first() {
                let mut prev = (0.0, if flags[0] { 1.0 } else { p0 });
                for &(r1, p1) in &pts {
                    area += (r1 - prev.0) * (p1 + prev.1) * 0.5;
                    prev = (r1, p1);
                }
            }
            per_radius.push(area);
        }
        if n_gt > 0 {
            aps.push(per_radius.iter().sum::<f64>() / radii.len() as f64);
        }
    }
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    let ate = if tp_d.is_empty() {
        None
    } else {
        Some(tp_d.iter().sum::<f64>() / tp_d.len() as f64)
    };
    (map, ate)
}

/// Local maxima by scanning the full 3x3 neighbourhood of every cell.
pub fn decode_oracle(h: &[f64], classes: usize, rows: usize, cols: usize, thr: f64) -> Vec<(usize, usize, usize, f64)> {
    let mut out = Vec::new();
    for c in 0..classes {
        for i in 0..rows {
            for j in 0..cols {
                let v = h[(c * rows + i) * cols + j];
                if v <= thr {
                    continue;
                }
                let mut max = f64::NEG_INFINITY;
                for ii in i.saturating_sub(1)..=(i + 1).min(rows - 1) {
                    for jj in j.saturating_sub(1)..=(j + 1).min(cols - 1) {
                        max = max.max(h[(c * rows + ii) * cols + jj]);
                    }
                }
                if v == max {
                    out.push((c, i, j, v));
                }
            }
        }
    }
    out.sort_by(|a, b| b.3.partial_cmp(&a.3).unwrap());
    out
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> PointCloud {
    PointCloud {
        points: (0..n)
            .map(|_| LidarPoint {
                position: [
                    rng.gen_range(-half..half),
                    rng.gen_range(-half..half),
                    rng.gen_range(-4.0..6.0),
                ],
                intensity: rng.gen_range(0.0..1.0),
            })
            .collect(),
    }
}

/// Signed area based convex-polygon intersection area (Sutherland-Hodgman).
pub fn convex_overlap_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.to_vec();
    let n = b.len();
    let orient = signed_area(b).signum();
    for i in 0..n {
        let (p, q) = (b[i], b[(i + 1) % n]);
        let inside = |x: &[f64; 2]| orient * ((q[0] - p[0]) * (x[1] - p[1]) - (q[1] - p[1]) * (x[0] - p[0])) >= 0.0;
        let mut next = Vec::new();
        for j in 0..poly.len() {
            let (s, e) = (poly[j], poly[(j + 1) % poly.len()]);
            let (si, ei) = (inside(&s), inside(&e));
            if ei {
                if !si {
                    next.push(intersect(s, e, p, q));
                }
                next.push(e);
            } else if si {
                next.push(intersect(s, e, p, q));
            }
        }
        poly = next;
        if poly.is_empty() {
            return 0.0;
        }
    }
    signed_area(&poly).abs()
}

fn signed_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    (0..n)
        .map(|i| p[i][0] * p[(i + 1) % n][1] - p[(i + 1) % n][0] * p[i][1])
        .sum::<f64>()
        / 2.0
}

fn intersect(s: [f64; 2], e: [f64; 2], p: [f64; 2], q: [f64; 2]) -> [f64; 2] {
    let (a1, b1) = (e[1] - s[1], s[0] - e[0]);
    let c1 = a1 * s[0] + b1 * s[1];
    let (a2, b2) = (q[1] - p[1], p[0] - q[0]);
    let c2 = a2 * p[0] + b2 * p[1];
    let det = a1 * b2 - a2 * b1;
    [(c1 * b2 - c2 * b1) / det, (a1 * c2 - a2 * c1) / det]
}
