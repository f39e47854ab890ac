//! LiDAR occupancy in the BEV plane, Gaussian smoothing and the split into
//! per-camera view masks.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{camera_fov_sector, lidar_to_ego, CameraRig, Sector};

/// Metric extent and resolution of the BEV plane. Rows run along ego y,
/// columns along ego x; cell `(i, j)` covers
/// `[x_min + j*dx, x_min + (j+1)*dx) x [y_min + i*dy, y_min + (i+1)*dy)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, rows: usize, cols: usize) -> Result<Self> {
        let spec = Self {
            x_min,
            x_max,
            y_min,
            y_max,
            rows,
            cols,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square grid `[-half, half]^2` with `cells x cells` resolution.
    pub fn square(half: f64, cells: usize) -> Result<Self> {
        Self::new(-half, half, -half, half, cells, cells)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(Error::Domain(format!("degenerate BEV extent {self:?}")));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Domain("BEV grid needs at least one cell".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.cols as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.rows as f64
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Cell `(row, col)` containing `(x, y)`, or `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let j = ((x - self.x_min) / self.dx()).floor();
        let i = ((y - self.y_min) / self.dy()).floor();
        if !(j >= 0.0 && i >= 0.0 && j < self.cols as f64 && i < self.rows as f64) {
            return None;
        }
        Some((i as usize, j as usize))
    }

    pub fn flat_index(&self, x: f64, y: f64) -> Option<usize> {
        self.cell_of(x, y).map(|(i, j)| i * self.cols + j)
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.dx(),
            self.y_min + (row as f64 + 0.5) * self.dy(),
        )
    }
}

/// A scalar (or `channels`-channel) field over a [`GridSpec`], stored
/// channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl BevGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            channels: 1,
            values: vec![0.0; spec.num_cells()],
        }
    }

    pub fn filled(spec: GridSpec, value: f64) -> Self {
        Self {
            spec,
            channels: 1,
            values: vec![value; spec.num_cells()],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.spec.cols + col]
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// 8-bit binary PGM (P5), row 0 first, values in `[0, 1]` mapped to
    /// `0..=255`. Only the first channel is written.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let cells = self.spec.num_cells();
        let mut bytes = format!("P5\n{} {}\n255\n", self.spec.cols, self.spec.rows).into_bytes();
        bytes.extend(
            self.values[..cells]
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Raw little-endian float32 dump of all values, no header.
    pub fn write_f32_raw(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: [f64; 3],
    pub intensity: f64,
}

/// LiDAR returns in the LiDAR frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

const PCBV_MAGIC: &[u8; 4] = b"PCBV";

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if p.position.iter().any(|c| !c.is_finite()) {
                return Err(Error::Domain(format!("point {i} has non-finite coordinates")));
            }
        }
        Ok(())
    }

    /// `PCBV` magic, u32 count, then `count` records of four f32
    /// `(x, y, z, intensity)`, all little-endian.
    pub fn to_pcbv_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.points.len() * 16);
        out.extend_from_slice(PCBV_MAGIC);
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for p in &self.points {
            for v in [p.position[0], p.position[1], p.position[2], p.intensity] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_pcbv_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != PCBV_MAGIC {
            return Err(Error::format(path, "missing PCBV header"));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != count * 16 {
            return Err(Error::format(
                path,
                format!(
                    "expected {} payload bytes for {count} points, found {}",
                    count * 16,
                    body.len()
                ),
            ));
        }
        let f = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64;
        let points = (0..count)
            .map(|i| {
                let o = i * 16;
                LidarPoint {
                    position: [f(o), f(o + 4), f(o + 8)],
                    intensity: f(o + 12),
                }
            })
            .collect();
        let cloud = Self { points };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn write_pcbv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_pcbv_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pcbv(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pcbv_bytes(&bytes, path)
    }
}

/// Height filtering applied to ego-frame points before they are binned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightFilter {
    /// Kept points satisfy `z_min <= z < z_max` (ego meters).
    pub z_min: f64,
    pub z_max: f64,
    /// Drop returns below `ground_clearance` when set.
    pub remove_ground: bool,
    pub ground_clearance: f64,
}

impl Default for HeightFilter {
    fn default() -> Self {
        Self {
            z_min: -3.0,
            z_max: 5.0,
            remove_ground: false,
            ground_clearance: 0.2,
        }
    }
}

impl HeightFilter {
    pub fn keeps(&self, z: f64) -> bool {
        let lo = if self.remove_ground {
            self.z_min.max(self.ground_clearance)
        } else {
            self.z_min
        };
        z >= lo && z < self.z_max
    }
}

/// Binary occupancy: a cell is 1 iff at least one point, after the
/// LiDAR-to-ego transform, lands in its footprint and passes `filter`.
pub fn voxelize_occupancy(
    points: &PointCloud,
    rig: &CameraRig,
    spec: &GridSpec,
    filter: &HeightFilter,
) -> Result<BevGrid> {
    spec.validate()?;
    let mut grid = BevGrid::zeros(*spec);
    for p in &points.points {
        let e = lidar_to_ego(rig, &Vector3::from(p.position));
        if !filter.keeps(e.z) {
            continue;
        }
        if let Some(idx) = spec.flat_index(e.x, e.y) {
            grid.values[idx] = 1.0;
        }
    }
    Ok(grid)
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Truncated Gaussian blur (radius `ceil(3 sigma)` cells, zero padding),
/// rescaled so the global maximum is exactly 1. An all-zero input stays zero.
pub fn gaussian_smooth(mask: &BevGrid, sigma: f64) -> Result<BevGrid> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as isize;
    let (rows, cols) = (mask.spec.rows, mask.spec.cols);
    let mut out = mask.clone();
    let plane = rows * cols;

    for ch in 0..mask.channels {
        let src = &mask.values[ch * plane..(ch + 1) * plane];
        // The kernel is separable; each output cell sums its taps in a
        // fixed order, so results do not depend on traversal.
        let mut tmp = vec![0.0; plane];
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    let jj = j as isize + t as isize - radius;
                    if jj >= 0 && (jj as usize) < cols {
                        acc += w * src[i * cols + jj as usize];
                    }
                }
                tmp[i * cols + j] = acc;
            }
        }
        let dst = &mut out.values[ch * plane..(ch + 1) * plane];
        for i in 0..rows {
            for j in 0..cols {
                let mut acc = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    let ii = i as isize + t as isize - radius;
                    if ii >= 0 && (ii as usize) < rows {
                        acc += w * tmp[ii as usize * cols + j];
                    }
                }
                dst[i * cols + j] = acc;
            }
        }
    }

    let peak = out.values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut out.values {
            *v /= peak;
        }
    }
    Ok(out)
}

/// Azimuth of each cell center as seen from the ego origin.
pub fn cell_azimuths(spec: &GridSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.num_cells());
    for i in 0..spec.rows {
        for j in 0..spec.cols {
            let (x, y) = spec.cell_center(i, j);
            out.push(y.atan2(x));
        }
    }
    out
}

/// Restricts `smoothed` to each sector; cells inside two sectors appear in
/// both outputs.
pub fn split_by_sectors(smoothed: &BevGrid, sectors: &[Sector]) -> Vec<BevGrid> {
    let az = cell_azimuths(&smoothed.spec);
    let plane = smoothed.spec.num_cells();
    sectors
        .iter()
        .map(|s| {
            let mut m = smoothed.clone();
            for (idx, v) in m.values.iter_mut().enumerate() {
                if !s.contains(az[idx % plane]) {
                    *v = 0.0;
                }
            }
            m
        })
        .collect()
}

/// Per-camera view masks: the smoothed mask times the indicator of each
/// camera's azimuth sector.
pub fn split_view_masks(smoothed: &BevGrid, rig: &CameraRig) -> Result<Vec<BevGrid>> {
    let sectors = (0..rig.num_cameras())
        .map(|k| camera_fov_sector(rig, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(split_by_sectors(smoothed, &sectors))
}
