//! Bird's-eye rasters, colour images, sliding detection windows and 2D box
//! bookkeeping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{Cuboid, PointCloud};
use crate::error::{Error, Result};

/// Dense 2D grid of cell values, row-major with `y` rows and `x` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    /// World (x, y) of the outer corner of cell (0, 0).
    pub origin: (f64, f64),
    pub values: Vec<f64>,
}

/// Number of whole steps of `step` needed to span `span`, ignoring rounding
/// noise in the quotient.
pub(crate) fn steps_to_cover(span: f64, step: f64) -> usize {
    let r = span / step;
    let near = r.round();
    if (r - near).abs() <= 1e-9 * near.max(1.0) {
        (near as usize).max(1)
    } else {
        (r.ceil() as usize).max(1)
    }
}

impl Raster {
    pub fn zeros(width: usize, height: usize, cell_size: f64, origin: (f64, f64)) -> Self {
        Self {
            width,
            height,
            cell_size,
            origin,
            values: vec![0.0; width * height],
        }
    }

    /// Raster covering the x,y extent of `region`, partial edge cells included.
    pub fn covering(region: &Cuboid, cell_size: f64) -> Self {
        let [ex, ey, _] = region.extent();
        Self::zeros(
            steps_to_cover(ex, cell_size),
            steps_to_cover(ey, cell_size),
            cell_size,
            (region.min[0], region.min[1]),
        )
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: f64) {
        self.values[row * self.width + col] = v;
    }

    /// Cell holding world (x, y); points on the far edge land in the last
    /// cell. `None` outside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x - self.origin.0) / self.cell_size).floor();
        let fy = ((y - self.origin.1) / self.cell_size).floor();
        let edge = |f: f64, n: usize, v: f64, o: f64| -> Option<usize> {
            if f >= 0.0 && (f as usize) < n {
                Some(f as usize)
            } else if f as usize == n && v <= o + n as f64 * self.cell_size + 1e-9 * self.cell_size {
                Some(n - 1)
            } else {
                None
            }
        };
        if !(fx.is_finite() && fy.is_finite()) || fx < 0.0 || fy < 0.0 {
            return None;
        }
        Some((edge(fx, self.width, x, self.origin.0)?, edge(fy, self.height, y, self.origin.1)?))
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell_size,
            self.origin.1 + (row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// Fraction of occupied vertical bins per column, over the cloud's x,y
/// bounds. An empty cloud gives a single zero cell at the origin.
pub fn vertical_density(cloud: &PointCloud, cell_size: f64, z_bin: f64, z_extent: (f64, f64)) -> Result<Raster> {
    let region = match crate::cloud::bounds(cloud) {
        Ok(b) => {
            // Make the far edge fall inside the last cell.
            let w = ((b.max[0] - b.min[0]) / cell_size).floor() + 1.0;
            let h = ((b.max[1] - b.min[1]) / cell_size).floor() + 1.0;
            Cuboid {
                min: b.min,
                max: [b.min[0] + w * cell_size, b.min[1] + h * cell_size, b.max[2]],
            }
        }
        Err(_) => Cuboid {
            min: [0.0; 3],
            max: [cell_size, cell_size, 0.0],
        },
    };
    vertical_density_in(cloud, &region, cell_size, z_bin, z_extent)
}

/// [`vertical_density`] on a fixed x,y region; points outside the region or
/// outside `z_extent` are ignored.
pub fn vertical_density_in(cloud: &PointCloud, region: &Cuboid, cell_size: f64, z_bin: f64, z_extent: (f64, f64)) -> Result<Raster> {
    let (zmin, zmax) = z_extent;
    if !(cell_size > 0.0 && z_bin > 0.0) {
        return Err(Error::InvalidArgument("cell size and z bin must be positive".into()));
    }
    if !(zmax > zmin) {
        return Err(Error::InvalidArgument(format!("empty z extent [{zmin}, {zmax}]")));
    }
    let bins = steps_to_cover(zmax - zmin, z_bin);
    let mut raster = Raster::covering(region, cell_size);
    let mut occupied: Vec<u64> = Vec::new();
    for p in cloud.points() {
        if !(p.z >= zmin && p.z <= zmax) {
            continue;
        }
        let Some((c, r)) = raster.cell_of(p.x, p.y) else {
            continue;
        };
        let bin = (((p.z - zmin) / z_bin).floor() as usize).min(bins - 1);
        let cell = (r * raster.width + c) as u64;
        occupied.push(cell * bins as u64 + bin as u64);
    }
    occupied.sort_unstable();
    occupied.dedup();
    for key in occupied {
        raster.values[(key / bins as u64) as usize] += 1.0;
    }
    let total = bins as f64;
    raster.values.iter_mut().for_each(|v| *v /= total);
    Ok(raster)
}

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Write as PNG with north (largest y) at the top.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut flipped = Vec::with_capacity(self.data.len());
        for row in (0..self.height).rev() {
            flipped.extend_from_slice(&self.data[3 * row * self.width..3 * (row + 1) * self.width]);
        }
        image::save_buffer(path, &flipped, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

const RAMP: [[f64; 3]; 3] = [[0.0, 0.0, 128.0], [0.0, 255.0, 255.0], [255.0, 64.0, 0.0]];

/// Two-segment colour ramp: dark blue at 0, cyan at 0.5, orange-red at 1.
/// Values are clamped to [0, 1]; channels round half up.
pub fn ramp_color(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let (a, b, t) = if v <= 0.5 {
        (RAMP[0], RAMP[1], v / 0.5)
    } else {
        (RAMP[1], RAMP[2], (v - 0.5) / 0.5)
    };
    std::array::from_fn(|c| (a[c] + (b[c] - a[c]) * t + 0.5).floor() as u8)
}

pub fn colorize(raster: &Raster) -> RgbImage {
    RgbImage {
        width: raster.width,
        height: raster.height,
        data: raster.values.iter().flat_map(|&v| ramp_color(v)).collect(),
    }
}

fn window_starts(lo: f64, hi: f64, window: f64, stride: f64) -> Vec<f64> {
    let mut starts = vec![lo];
    let mut s = lo;
    while s + window < hi - 1e-9 * window {
        s += stride;
        if s + window > hi {
            s = hi - window;
        }
        starts.push(s);
    }
    starts
}

/// Overlapping square windows over the x,y extent; the last row and column
/// are pulled back to end at the extent edge, and every window spans the
/// full z range.
pub fn sliding_windows(extent: &Cuboid, window: f64, overlap_fraction: f64) -> Result<Vec<Cuboid>> {
    if !(window > 0.0) {
        return Err(Error::InvalidArgument("window must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::InvalidArgument(format!("overlap {overlap_fraction} outside [0, 1)")));
    }
    let stride = window * (1.0 - overlap_fraction);
    let xs = window_starts(extent.min[0], extent.max[0], window, stride);
    let ys = window_starts(extent.min[1], extent.max[1], window, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(Cuboid {
                min: [x, y, extent.min[2]],
                max: [(x + window).min(extent.max[0]), (y + window).min(extent.max[1]), extent.max[2]],
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectedClass {
    Tree,
    Shrub,
    PartialTree,
}

/// Axis-aligned detection box in world metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub score: f64,
    #[serde(rename = "class")]
    pub detected_class: DetectedClass,
}

impl Box2D {
    pub fn new(min: [f64; 2], max: [f64; 2], score: f64, detected_class: DetectedClass) -> Result<Self> {
        let b = Self { min, max, score, detected_class };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min[0] <= self.max[0] && self.min[1] <= self.max[1]) {
            return Err(Error::InvalidArgument(format!("box min {:?} exceeds max {:?}", self.min, self.max)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!("box score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    pub fn iou(&self, other: &Box2D) -> f64 {
        let w = self.max[0].min(other.max[0]) - self.min[0].max(other.min[0]);
        let h = self.max[1].min(other.max[1]) - self.min[1].max(other.min[1]);
        if w < 0.0 || h < 0.0 {
            return 0.0;
        }
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else if self.min == other.min && self.max == other.max {
            1.0
        } else {
            0.0
        }
    }
}

/// Greedy suppression: walk boxes by descending score (ties by min corner,
/// then max corner), keep a box unless it overlaps an already kept one with
/// IoU at or above the threshold.
pub fn dedup_boxes(boxes: &[Box2D], iou_threshold: f64) -> Result<Vec<Box2D>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<&Box2D> = boxes.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.min[0].total_cmp(&b.min[0]))
            .then(a.min[1].total_cmp(&b.min[1]))
            .then(a.max[0].total_cmp(&b.max[0]))
            .then(a.max[1].total_cmp(&b.max[1]))
    });
    let mut kept: Vec<Box2D> = Vec::new();
    for b in order {
        if kept.iter().all(|k| k.iou(b) < iou_threshold) {
            kept.push(*b);
        }
    }
    Ok(kept)
}

pub fn box_to_cuboid(b: &Box2D, z_extent: (f64, f64)) -> Result<Cuboid> {
    if !(z_extent.1 > z_extent.0) {
        return Err(Error::InvalidArgument(format!("empty z extent {z_extent:?}")));
    }
    Cuboid::new([b.min[0], b.min[1], z_extent.0], [b.max[0], b.max[1], z_extent.1])
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<Box2D>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let boxes: Vec<Box2D> = serde_json::from_str(&text)?;
    for b in &boxes {
        b.validate()?;
    }
    Ok(boxes)
}

pub fn write_boxes(boxes: &[Box2D], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, serde_json::to_string_pretty(boxes)?).map_err(|e| Error::io(path, e))
}

/// Raster geometry for detection windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterParams {
    pub cell_size: f64,
    pub window: f64,
    pub z_bins: usize,
    pub overlap: f64,
    pub dedup_iou: f64,
}

impl Default for RasterParams {
    fn default() -> Self {
        Self {
            cell_size: 0.2,
            window: 120.0,
            z_bins: 1000,
            overlap: 0.5,
            dedup_iou: 0.5,
        }
    }
}

impl RasterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.window > 0.0 && self.z_bins > 0) {
            return Err(Error::Config("raster cell size, window and z bins must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("raster overlap must be in [0, 1)".into()));
        }
        if !(self.dedup_iou > 0.0 && self.dedup_iou <= 1.0) {
            return Err(Error::Config("dedup IoU must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One density raster per sliding window over the cloud, with the z bins
/// spanning the cloud's full altitude range.
pub fn window_rasters(cloud: &PointCloud, params: &RasterParams) -> Result<Vec<(Cuboid, Raster)>> {
    params.validate()?;
    let extent = crate::cloud::bounds(cloud)?;
    let span = (extent.max[2] - extent.min[2]).max(params.cell_size);
    let z = (extent.min[2], extent.min[2] + span);
    let z_bin = span / params.z_bins as f64;
    sliding_windows(&extent, params.window, params.overlap)?
        .into_iter()
        .map(|w| {
            let square = Cuboid {
                min: w.min,
                max: [w.min[0] + params.window, w.min[1] + params.window, w.max[2]],
            };
            let r = vertical_density_in(cloud, &square, params.cell_size, z_bin, z)?;
            Ok((w, r))
        })
        .collect()
}
