//! Occupancy-grid encoding of single trees and the way back to labeled points.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud, SemanticLabel};
use crate::error::{Error, Result};
use crate::kdtree::{Dims, KdIndex};
use crate::nn::{Scalar, Tensor4, NUM_CLASSES};

pub const FOLIAGE: u8 = 0;
pub const LOWER_STEM: u8 = 1;
pub const UPPER_STEM: u8 = 2;
pub const EMPTY: u8 = 3;

/// Default nearest-neighbour cutoff for label transfer, about one voxel diagonal.
pub const DEFAULT_MAX_DIST: f64 = 0.45;

/// Channel index of a semantic label in the target grid.
pub fn channel_of(label: SemanticLabel) -> u8 {
    match label {
        SemanticLabel::Foliage => FOLIAGE,
        SemanticLabel::LowerStem => LOWER_STEM,
        SemanticLabel::UpperStem => UPPER_STEM,
        SemanticLabel::Clutter | SemanticLabel::Unlabeled => EMPTY,
    }
}

pub fn label_of_channel(channel: u8) -> SemanticLabel {
    match channel {
        FOLIAGE => SemanticLabel::Foliage,
        LOWER_STEM => SemanticLabel::LowerStem,
        UPPER_STEM => SemanticLabel::UpperStem,
        _ => SemanticLabel::Unlabeled,
    }
}

/// Occupation priority when several classes land in one voxel.
fn priority(channel: u8) -> u8 {
    match channel {
        LOWER_STEM => 3,
        UPPER_STEM => 2,
        FOLIAGE => 1,
        _ => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    /// World position of the grid's minimum corner.
    pub anchor: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dims: [150, 150, 100],
            voxel_size: [0.1, 0.1, 0.4],
            anchor: [0.0; 3],
        }
    }
}

impl GridSpec {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], anchor: [f64; 3]) -> Result<Self> {
        let s = Self { dims, voxel_size, anchor };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Config(format!("grid dims {:?} must be positive", self.dims)));
        }
        if !self.voxel_size.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Config(format!("voxel size {:?} must be positive", self.voxel_size)));
        }
        if !self.anchor.iter().all(|a| a.is_finite()) {
            return Err(Error::Config("grid anchor must be finite".into()));
        }
        Ok(())
    }

    /// Same geometry, re-anchored so x,y are centred on `(cx, cy)` and the
    /// grid floor sits at `ground_z`.
    pub fn centered(&self, cx: f64, cy: f64, ground_z: f64) -> Self {
        let half = |i: usize| self.dims[i] as f64 * self.voxel_size[i] / 2.0;
        Self {
            anchor: [cx - half(0), cy - half(1), ground_z],
            ..*self
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn extent(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.dims[i] as f64 * self.voxel_size[i])
    }

    /// Voxel containing `p`, or `None` outside the grid.
    pub fn voxel_of(&self, p: &Point) -> Option<[usize; 3]> {
        let c = [p.x, p.y, p.z];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((c[a] - self.anchor[a]) / self.voxel_size[a]).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn linear(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn unlinear(&self, v: usize) -> [usize; 3] {
        let k = v % self.dims[2];
        let j = (v / self.dims[2]) % self.dims[1];
        [v / (self.dims[1] * self.dims[2]), j, k]
    }

    pub fn voxel_center(&self, [i, j, k]: [usize; 3]) -> Point {
        Point::new(
            self.anchor[0] + (i as f64 + 0.5) * self.voxel_size[0],
            self.anchor[1] + (j as f64 + 0.5) * self.voxel_size[1],
            self.anchor[2] + (k as f64 + 0.5) * self.voxel_size[2],
        )
    }
}

/// Binary occupancy, one channel (input) or four one-hot channels
/// (Foliage, LowerStem, UpperStem, Empty), laid out channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    spec: GridSpec,
    channels: usize,
    data: Vec<u8>,
}

impl OccupancyGrid {
    pub fn empty(spec: GridSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            data: vec![0; channels * spec.voxel_count()],
        }
    }

    /// Four-channel grid from per-voxel class indices.
    pub fn from_classes(spec: GridSpec, classes: &[u8]) -> Result<Self> {
        let v = spec.voxel_count();
        if classes.len() != v {
            return Err(Error::InvalidArgument(format!("{} classes for {v} voxels", classes.len())));
        }
        let mut g = Self::empty(spec, NUM_CLASSES);
        for (i, &c) in classes.iter().enumerate() {
            if c as usize >= NUM_CLASSES {
                return Err(Error::InvalidArgument(format!("class {c} out of range")));
            }
            g.data[c as usize * v + i] = 1;
        }
        Ok(g)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, channel: usize, idx: [usize; 3]) -> bool {
        self.data[channel * self.spec.voxel_count() + self.spec.linear(idx)] != 0
    }

    pub fn set(&mut self, channel: usize, idx: [usize; 3], on: bool) {
        let at = channel * self.spec.voxel_count() + self.spec.linear(idx);
        self.data[at] = on as u8;
    }

    pub fn count(&self, channel: usize) -> usize {
        let v = self.spec.voxel_count();
        self.data[channel * v..(channel + 1) * v].iter().filter(|&&b| b != 0).count()
    }

    /// True when every voxel is occupied in exactly one channel.
    pub fn is_one_hot(&self) -> bool {
        let v = self.spec.voxel_count();
        (0..v).all(|i| (0..self.channels).map(|c| self.data[c * v + i] as usize).sum::<usize>() == 1)
    }

    /// Per-voxel channel of a one-hot grid.
    pub fn classes(&self) -> Result<Vec<u8>> {
        if self.channels != NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("expected a {NUM_CLASSES}-channel grid, got {}", self.channels)));
        }
        let v = self.spec.voxel_count();
        (0..v)
            .map(|i| {
                let mut hot = None;
                for c in 0..NUM_CLASSES {
                    if self.data[c * v + i] != 0 {
                        if hot.is_some() {
                            return Err(Error::InvalidArgument(format!("voxel {:?} is not one-hot", self.spec.unlinear(i))));
                        }
                        hot = Some(c as u8);
                    }
                }
                hot.ok_or_else(|| Error::InvalidArgument(format!("voxel {:?} is not one-hot", self.spec.unlinear(i))))
            })
            .collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        let [x, y, z] = self.spec.dims;
        let data = self.data.iter().map(|&b| if b != 0 { T::ONE } else { T::ZERO }).collect();
        Tensor4::from_vec([self.channels, x, y, z], data).expect("dims match by construction")
    }

    /// Flat binary dump: magic, channel count, dims, voxel size, anchor
    /// (all little-endian), then one byte per voxel, channel-major.
    pub fn write_debug(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(64 + self.data.len());
        buf.extend_from_slice(GRID_MAGIC);
        buf.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for d in self.spec.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.spec.voxel_size.iter().chain(&self.spec.anchor) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.data);
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_debug(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            location: "header".into(),
            message: m.into(),
        };
        if buf.len() < 72 || &buf[..8] != GRID_MAGIC {
            return Err(bad("not a grid dump"));
        }
        let u = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as usize;
        let f = |at: usize| f64::from_le_bytes(buf[at..at + 8].try_into().unwrap());
        let channels = u(8);
        let dims = [u(12), u(16), u(20)];
        let voxel_size = [f(24), f(32), f(40)];
        let anchor = [f(48), f(56), f(64)];
        let spec = GridSpec::new(dims, voxel_size, anchor).map_err(|e| bad(&e.to_string()))?;
        let data = buf[72..].to_vec();
        if data.len() != channels * spec.voxel_count() {
            return Err(bad("payload length does not match header"));
        }
        Ok(Self { spec, channels, data })
    }
}

const GRID_MAGIC: &[u8; 8] = b"CNPYGRID";

/// A grid together with the number of points that fell outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub grid: OccupancyGrid,
    pub overflow: usize,
}

/// Single-channel occupancy: a voxel is set when at least one point lands in it.
pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> Voxelized {
    let mut grid = OccupancyGrid::empty(*spec, 1);
    let mut overflow = 0;
    for p in cloud.points() {
        match spec.voxel_of(p) {
            Some(idx) => grid.data[spec.linear(idx)] = 1,
            None => overflow += 1,
        }
    }
    Voxelized { grid, overflow }
}

/// Per-voxel class targets from a fully labeled cloud.
///
/// Lower stem beats upper stem beats foliage; voxels holding only clutter,
/// or nothing, are Empty.
pub fn voxelize_targets(cloud: &PointCloud, spec: &GridSpec) -> Result<Voxelized> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::InvalidArgument("target voxelization needs a labeled cloud".into()))?;
    let mut classes = vec![EMPTY; spec.voxel_count()];
    let mut overflow = 0;
    for (i, (p, &l)) in cloud.points().iter().zip(labels).enumerate() {
        if l == SemanticLabel::Unlabeled {
            return Err(Error::InvalidArgument(format!("point {i} is unlabeled")));
        }
        let Some(idx) = spec.voxel_of(p) else {
            overflow += 1;
            continue;
        };
        let v = spec.linear(idx);
        let c = channel_of(l);
        if priority(c) > priority(classes[v]) {
            classes[v] = c;
        }
    }
    Ok(Voxelized {
        grid: OccupancyGrid::from_classes(*spec, &classes)?,
        overflow,
    })
}

/// One labeled point at the centre of every non-Empty voxel.
pub fn decode(grid: &OccupancyGrid) -> Result<PointCloud> {
    let spec = grid.spec;
    let classes = grid.classes()?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (v, &c) in classes.iter().enumerate() {
        if c != EMPTY {
            points.push(spec.voxel_center(spec.unlinear(v)));
            labels.push(label_of_channel(c));
        }
    }
    PointCloud::with_labels(points, labels)
}

/// Give each `high` point the label of its nearest `low` point, or
/// Unlabeled when that neighbour is farther than `max_dist`.
pub fn upsample_labels(low: &PointCloud, high: &PointCloud, max_dist: f64) -> Result<PointCloud> {
    if low.is_empty() {
        return Err(Error::EmptyCloud("low-resolution labeled cloud"));
    }
    let low_labels = low
        .labels()
        .ok_or_else(|| Error::InvalidArgument("low-resolution cloud must be labeled".into()))?;
    let index = KdIndex::build(low.points(), Dims::Three)?;
    let labels = high
        .points()
        .iter()
        .map(|p| {
            let n = index.nearest(p);
            if n.distance <= max_dist {
                low_labels[n.index]
            } else {
                SemanticLabel::Unlabeled
            }
        })
        .collect();
    PointCloud::with_labels(high.points().to_vec(), labels)
}

/// Rotate about the cloud's x,y centroid, then optionally mirror x about it.
pub fn augment(cloud: &PointCloud, rotation_about_z: f64, flip_x: bool) -> PointCloud {
    if cloud.is_empty() {
        return cloud.clone();
    }
    let (cx, cy) = cloud.centroid_xy();
    let (s, c) = rotation_about_z.sin_cos();
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - cx, p.y - cy);
            let mut rx = c * dx - s * dy;
            let ry = s * dx + c * dy;
            if flip_x {
                rx = -rx;
            }
            Point::new(cx + rx, cy + ry, p.z)
        })
        .collect();
    PointCloud::from_parts(points, cloud.labels().map(|l| l.to_vec())).expect("lengths unchanged")
}
