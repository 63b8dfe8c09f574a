//! Point-cloud data model: points, semantic labels, clouds and axis-aligned cuboids.
//!
//! Coordinates are metres in a local metric frame with z up. Inputs in a
//! geographic CRS must be projected before they enter the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance_squared(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn distance(&self, other: &Point) -> f64 {
        self.distance_squared(other).sqrt()
    }

    pub fn distance_xy(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn coord(&self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

/// Per-point semantic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SemanticLabel {
    Foliage,
    LowerStem,
    UpperStem,
    Clutter,
    Unlabeled,
}

impl SemanticLabel {
    /// Integer code used in files. `Unlabeled` is written as 255.
    pub fn code(self) -> u8 {
        match self {
            SemanticLabel::Foliage => 0,
            SemanticLabel::LowerStem => 1,
            SemanticLabel::UpperStem => 2,
            SemanticLabel::Clutter => 3,
            SemanticLabel::Unlabeled => 255,
        }
    }

    /// Inverse of [`SemanticLabel::code`]; any unknown code reads as `Unlabeled`.
    pub fn from_code(code: i64) -> Self {
        match code {
            0 => SemanticLabel::Foliage,
            1 => SemanticLabel::LowerStem,
            2 => SemanticLabel::UpperStem,
            3 => SemanticLabel::Clutter,
            _ => SemanticLabel::Unlabeled,
        }
    }

    pub fn is_stem(self) -> bool {
        matches!(self, SemanticLabel::LowerStem | SemanticLabel::UpperStem)
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticLabel::Foliage => "foliage",
            SemanticLabel::LowerStem => "lower_stem",
            SemanticLabel::UpperStem => "upper_stem",
            SemanticLabel::Clutter => "clutter",
            SemanticLabel::Unlabeled => "unlabeled",
        }
    }
}

/// A set of 3D points with an optional parallel label column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<SemanticLabel>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self {
            points,
            labels: None,
        }
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<SemanticLabel>) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "label count {} does not match point count {}",
                labels.len(),
                points.len()
            )));
        }
        Ok(Self {
            points,
            labels: Some(labels),
        })
    }

    pub fn from_parts(points: Vec<Point>, labels: Option<Vec<SemanticLabel>>) -> Result<Self> {
        match labels {
            Some(labels) => Self::with_labels(points, labels),
            None => Ok(Self::new(points)),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[SemanticLabel]> {
        self.labels.as_deref()
    }

    /// Label of point `i`, `Unlabeled` when the cloud carries no labels.
    pub fn label(&self, i: usize) -> SemanticLabel {
        self.labels
            .as_ref()
            .map_or(SemanticLabel::Unlabeled, |labels| labels[i])
    }

    pub fn set_labels(&mut self, labels: Vec<SemanticLabel>) -> Result<()> {
        if labels.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "label count {} does not match point count {}",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(())
    }

    pub fn clear_labels(&mut self) {
        self.labels = None;
    }

    pub fn into_parts(self) -> (Vec<Point>, Option<Vec<SemanticLabel>>) {
        (self.points, self.labels)
    }

    /// New cloud holding the points at `indices`, in that order, labels carried.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|labels| indices.iter().map(|&i| labels[i]).collect());
        PointCloud { points, labels }
    }

    /// Indices of points satisfying `keep`, in input order.
    pub fn indices_where(&self, mut keep: impl FnMut(&Point) -> bool) -> Vec<usize> {
        self.points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| keep(p).then_some(i))
            .collect()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        match (&mut self.labels, &other.labels) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (Some(a), None) => a.extend(std::iter::repeat_n(SemanticLabel::Unlabeled, other.len())),
            (None, Some(b)) => {
                let mut labels = vec![SemanticLabel::Unlabeled; self.points.len()];
                labels.extend_from_slice(b);
                self.labels = Some(labels);
            }
            (None, None) => {}
        }
        self.points.extend_from_slice(&other.points);
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.points.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(Error::InvalidArgument(format!(
                "point {i} has a non-finite coordinate"
            ))),
            None => Ok(()),
        }
    }

    pub fn centroid_xy(&self) -> (f64, f64) {
        if self.points.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.points.len() as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        (sx / n, sy / n)
    }
}

/// Axis-aligned box with closed bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Cuboid {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        if (0..3).any(|a| !(min[a] <= max[a])) {
            return Err(Error::InvalidArgument(format!(
                "cuboid min {min:?} exceeds max {max:?}"
            )));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.min[0]
            && p.x <= self.max[0]
            && p.y >= self.min[1]
            && p.y <= self.max[1]
            && p.z >= self.min[2]
            && p.z <= self.max[2]
    }

    pub fn contains_xy(&self, p: &Point) -> bool {
        p.x >= self.min[0] && p.x <= self.max[0] && p.y >= self.min[1] && p.y <= self.max[1]
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }
}

/// Tight bounding cuboid.
pub fn bounds(cloud: &PointCloud) -> Result<Cuboid> {
    let first = cloud
        .points()
        .first()
        .ok_or(Error::EmptyCloud("bounds of an empty cloud"))?;
    let mut min = [first.x, first.y, first.z];
    let mut max = min;
    for p in cloud.points() {
        for a in 0..3 {
            let v = p.coord(a);
            min[a] = min[a].min(v);
            max[a] = max[a].max(v);
        }
    }
    Ok(Cuboid { min, max })
}

/// Points inside `region`, boundary included, labels carried through.
pub fn crop(cloud: &PointCloud, region: &Cuboid) -> PointCloud {
    cloud.select(&crop_indices(cloud, region))
}

pub fn crop_indices(cloud: &PointCloud, region: &Cuboid) -> Vec<usize> {
    cloud.indices_where(|p| region.contains(p))
}
