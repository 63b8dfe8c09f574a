//! Digital elevation model estimation and ground-point removal.
//!
//! Per-bin minimum-height points are gathered on a fine x,y grid, heights on a
//! coarse regular grid are interpolated from their nearest bin minima with
//! inverse-distance weights, and the grid is triangulated for continuous
//! queries. Points within a threshold of the surface are then dropped.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{bounds, Point, PointCloud};
use crate::error::{Error, Result};
use crate::kdtree::{Dims, KdIndex};

/// Weight cap distance for inverse-distance weighting, metres.
pub const IDW_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundParams {
    pub min_bin_size: f64,
    pub dem_resolution: f64,
    pub knn_count: usize,
    pub removal_threshold: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            min_bin_size: 0.25,
            dem_resolution: 4.0,
            knn_count: 4,
            removal_threshold: 0.5,
        }
    }
}

impl GroundParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_bin_size > 0.0) || !(self.dem_resolution > 0.0) || self.knn_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "ground parameters must be strictly positive: {self:?}"
            )));
        }
        if !(self.removal_threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "removal threshold must be positive, got {}",
                self.removal_threshold
            )));
        }
        Ok(())
    }
}

/// The lowest point of every occupied x,y bin, ordered by bin (row-major in x then y).
///
/// Equal heights within a bin resolve to the lexicographically smallest (z, x, y),
/// so the result does not depend on input order.
pub fn bin_minima(cloud: &PointCloud, bin_size: f64) -> Result<PointCloud> {
    if !(bin_size > 0.0) {
        return Err(Error::InvalidArgument(format!("bin size must be positive, got {bin_size}")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("bin minima of an empty cloud"));
    }
    let mut bins: BTreeMap<(i64, i64), Point> = BTreeMap::new();
    for p in cloud.points() {
        let key = ((p.x / bin_size).floor() as i64, (p.y / bin_size).floor() as i64);
        bins.entry(key)
            .and_modify(|best| {
                let lower = p
                    .z
                    .total_cmp(&best.z)
                    .then(p.x.total_cmp(&best.x))
                    .then(p.y.total_cmp(&best.y))
                    .is_lt();
                if lower {
                    *best = *p;
                }
            })
            .or_insert(*p);
    }
    Ok(PointCloud::new(bins.into_values().collect()))
}

/// Ground surface: heights on a regular x,y lattice plus its triangulation.
///
/// Every lattice square is split along its (i,j)→(i+1,j+1) diagonal. The four
/// corners of a square are cocircular, so this is a Delaunay triangulation of
/// the lattice; fixing the diagonal makes it deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Dem {
    origin: (f64, f64),
    resolution: f64,
    nx: usize,
    ny: usize,
    heights: Vec<f64>,
}

impl Dem {
    pub fn from_heights(origin: (f64, f64), resolution: f64, nx: usize, ny: usize, heights: Vec<f64>) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Geometry(format!(
                "a {nx}x{ny} lattice has no triangles"
            )));
        }
        if heights.len() != nx * ny || heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidArgument("DEM heights must be finite, one per node".into()));
        }
        if !(resolution > 0.0) {
            return Err(Error::InvalidArgument("DEM resolution must be positive".into()));
        }
        Ok(Self {
            origin,
            resolution,
            nx,
            ny,
            heights,
        })
    }

    /// Constant-height surface over the given x,y range.
    pub fn flat(height: f64, min: (f64, f64), max: (f64, f64), resolution: f64) -> Result<Self> {
        let nx = (((max.0 - min.0) / resolution).ceil() as usize + 1).max(2);
        let ny = (((max.1 - min.1) / resolution).ceil() as usize + 1).max(2);
        Self::from_heights(min, resolution, nx, ny, vec![height; nx * ny])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn triangle_count(&self) -> usize {
        2 * (self.nx - 1) * (self.ny - 1)
    }

    pub fn node(&self, i: usize, j: usize) -> (f64, f64, f64) {
        (
            self.origin.0 + i as f64 * self.resolution,
            self.origin.1 + j as f64 * self.resolution,
            self.heights[j * self.nx + i],
        )
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// Barycentric interpolation inside the lattice; nearest node outside it.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let u = (x - self.origin.0) / self.resolution;
        let v = (y - self.origin.1) / self.resolution;
        let umax = (self.nx - 1) as f64;
        let vmax = (self.ny - 1) as f64;
        if !(0.0..=umax).contains(&u) || !(0.0..=vmax).contains(&v) {
            let i = u.clamp(0.0, umax).round() as usize;
            let j = v.clamp(0.0, vmax).round() as usize;
            return self.heights[j * self.nx + i];
        }
        let i = (u.floor() as usize).min(self.nx - 2);
        let j = (v.floor() as usize).min(self.ny - 2);
        let fu = u - i as f64;
        let fv = v - j as f64;
        let h = |di: usize, dj: usize| self.heights[(j + dj) * self.nx + i + di];
        if fu >= fv {
            h(0, 0) + fu * (h(1, 0) - h(0, 0)) + fv * (h(1, 1) - h(1, 0))
        } else {
            h(0, 0) + fv * (h(0, 1) - h(0, 0)) + fu * (h(1, 1) - h(0, 1))
        }
    }

    /// Write `x,y,height` rows, one per lattice node.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("x,y,height\n");
        for j in 0..self.ny {
            for i in 0..self.nx {
                let (x, y, h) = self.node(i, j);
                out.push_str(&format!("{x},{y},{h}\n"));
            }
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

pub fn dem_height(dem: &Dem, x: f64, y: f64) -> f64 {
    dem.height(x, y)
}

fn check_not_collinear(points: &[Point]) -> Result<()> {
    let a = points[0];
    let Some(b) = points.iter().find(|p| p.distance_xy(&a) > 1e-9) else {
        return Err(Error::Geometry("all bin minima share one x,y location".into()));
    };
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len = (dx * dx + dy * dy).sqrt();
    let off_line = points
        .iter()
        .any(|p| ((p.x - a.x) * dy - (p.y - a.y) * dx).abs() / len > 1e-9);
    if off_line {
        Ok(())
    } else {
        Err(Error::Geometry("bin minima are collinear in x,y; the DEM needs a 2D footprint".into()))
    }
}

pub fn estimate_dem(cloud: &PointCloud, params: &GroundParams) -> Result<Dem> {
    params.validate()?;
    let minima = bin_minima(cloud, params.min_bin_size)?;
    if minima.len() < params.knn_count {
        return Err(Error::InvalidArgument(format!(
            "{} bin minima is fewer than knn_count = {}",
            minima.len(),
            params.knn_count
        )));
    }
    check_not_collinear(minima.points())?;
    let b = bounds(cloud)?;
    let res = params.dem_resolution;
    let nx = ((b.max[0] - b.min[0]) / res).ceil() as usize + 1;
    let ny = ((b.max[1] - b.min[1]) / res).ceil() as usize + 1;
    let (nx, ny) = (nx.max(2), ny.max(2));
    let index = KdIndex::build(minima.points(), Dims::Two)?;
    let mut heights = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let centre = Point::new(b.min[0] + i as f64 * res, b.min[1] + j as f64 * res, 0.0);
            let neighbours = index.knn(&centre, params.knn_count)?;
            let (mut wsum, mut hsum) = (0.0, 0.0);
            for n in &neighbours {
                let w = 1.0 / n.distance.max(IDW_EPSILON);
                wsum += w;
                hsum += w * minima.points()[n.index].z;
            }
            heights.push(hsum / wsum);
        }
    }
    Dem::from_heights((b.min[0], b.min[1]), res, nx, ny, heights)
}

/// Indices of points more than `threshold` above the surface.
pub fn above_ground_indices(cloud: &PointCloud, dem: &Dem, threshold: f64) -> Vec<usize> {
    cloud.indices_where(|p| p.z - dem.height(p.x, p.y) > threshold)
}

pub fn remove_ground(cloud: &PointCloud, dem: &Dem, threshold: f64) -> PointCloud {
    cloud.select(&above_ground_indices(cloud, dem, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn sampled_surface(f: impl Fn(f64, f64) -> f64, size: f64, density: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (size * size * density) as usize;
        PointCloud::new(
            (0..n)
                .map(|_| {
                    let x = rng.random_range(0.0..size);
                    let y = rng.random_range(0.0..size);
                    Point::new(x, y, f(x, y))
                })
                .collect(),
        )
    }

    #[test]
    fn flat_plane_minima_keep_height() {
        let cloud = sampled_surface(|_, _| 5.0, 10.0, 50.0, 1);
        let minima = bin_minima(&cloud, 1.0).unwrap();
        assert!(minima.points().iter().all(|p| p.z == 5.0));
    }

    #[test]
    fn lowest_point_in_bin_wins() {
        let cloud = PointCloud::new(vec![Point::new(0.2, 0.2, 9.0), Point::new(0.7, 0.1, 1.0)]);
        let minima = bin_minima(&cloud, 1.0).unwrap();
        assert_eq!(minima.points(), &[Point::new(0.7, 0.1, 1.0)]);
    }

    #[test]
    fn bin_minima_rejects_bad_bin() {
        let cloud = PointCloud::new(vec![Point::default()]);
        assert!(bin_minima(&cloud, 0.0).is_err());
        assert!(bin_minima(&cloud, -1.0).is_err());
    }

    #[test]
    fn bin_minima_matches_group_by_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloud = PointCloud::new(
            (0..2000)
                .map(|_| Point::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..30.0)))
                .collect(),
        );
        let minima = bin_minima(&cloud, 2.0).unwrap();
        let mut groups: HashMap<(i64, i64), f64> = HashMap::new();
        for p in cloud.points() {
            let key = ((p.x / 2.0).floor() as i64, (p.y / 2.0).floor() as i64);
            let e = groups.entry(key).or_insert(f64::INFINITY);
            *e = e.min(p.z);
        }
        assert_eq!(minima.len(), groups.len());
        for p in minima.points() {
            let key = ((p.x / 2.0).floor() as i64, (p.y / 2.0).floor() as i64);
            assert_eq!(groups[&key], p.z);
        }
    }

    #[test]
    fn constant_cloud_gives_constant_dem() {
        let cloud = sampled_surface(|_, _| 10.0, 20.0, 20.0, 2);
        let dem = estimate_dem(&cloud, &GroundParams::default()).unwrap();
        assert!(dem.heights().iter().all(|&h| (h - 10.0).abs() < 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let h = dem.height(rng.random_range(-5.0..25.0), rng.random_range(-5.0..25.0));
            assert!((h - 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_minimum_dominates_node() {
        let mut pts = vec![Point::new(0.0, 0.0, 3.0)];
        pts.extend([Point::new(1.5, 0.2, 8.0), Point::new(0.3, 1.5, 8.0), Point::new(1.6, 1.7, 8.0), Point::new(2.5, 2.5, 8.0)]);
        let dem = estimate_dem(&PointCloud::new(pts), &GroundParams::default()).unwrap();
        // node (0,0) coincides with the z=3 minimum
        assert!((dem.node(0, 0).2 - 3.0).abs() < 1e-4);
    }

    #[test]
    fn tilted_plane_within_tolerance() {
        let plane = |x: f64, y: f64| 0.1 * x + 0.2 * y;
        let cloud = sampled_surface(plane, 40.0, 100.0, 4);
        let dem = estimate_dem(&cloud, &GroundParams::default()).unwrap();
        let (nx, ny) = dem.dims();
        for j in 0..ny {
            for i in 0..nx {
                let (x, y, h) = dem.node(i, j);
                assert!((h - plane(x, y)).abs() < 0.15, "node ({i},{j}) off by {}", h - plane(x, y));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            assert!((dem.height(x, y) - plane(x, y)).abs() < 0.15);
        }
    }

    #[test]
    fn too_few_minima_or_collinear_fails() {
        let line = PointCloud::new((0..20).map(|i| Point::new(i as f64, 0.5, 0.0)).collect());
        assert!(matches!(estimate_dem(&line, &GroundParams::default()), Err(Error::Geometry(_))));
        let few = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0), Point::new(5.0, 5.0, 0.0)]);
        assert!(estimate_dem(&few, &GroundParams::default()).is_err());
    }

    #[test]
    fn dem_is_permutation_invariant() {
        let cloud = sampled_surface(|x, y| (x * 0.3).sin() + y * 0.05, 20.0, 30.0, 6);
        let mut shuffled: Vec<Point> = cloud.points().to_vec();
        shuffled.reverse();
        shuffled.swap(3, 900);
        let a = estimate_dem(&cloud, &GroundParams::default()).unwrap();
        let b = estimate_dem(&PointCloud::new(shuffled), &GroundParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn node_query_and_edge_midpoint() {
        let dem = Dem::from_heights((0.0, 0.0), 4.0, 2, 2, vec![2.0, 4.0, 7.0, 1.0]).unwrap();
        assert_eq!(dem.height(0.0, 0.0), 2.0);
        assert_eq!(dem.height(4.0, 4.0), 1.0);
        assert_eq!(dem.height(2.0, 0.0), 3.0);
        assert_eq!(dem.triangle_count(), 2);
        // outside the lattice: nearest node
        assert_eq!(dem.height(-3.0, 3.5), 7.0);
    }

    #[test]
    fn height_is_continuous_across_edges() {
        let dem = Dem::from_heights((0.0, 0.0), 1.0, 3, 3, vec![0.0, 3.0, 1.0, 2.0, 5.0, 0.5, 4.0, 1.0, 2.0]).unwrap();
        let eps = 1e-9;
        for &(x, y) in &[(0.5, 0.5), (1.0, 0.3), (1.3, 1.0), (1.5, 1.5)] {
            let a = dem.height(x - eps, y + eps);
            let b = dem.height(x + eps, y - eps);
            assert!((a - b).abs() < 1e-7, "jump at ({x},{y})");
        }
    }

    #[test]
    fn remove_ground_threshold_and_idempotence() {
        let dem = Dem::flat(0.0, (0.0, 0.0), (10.0, 10.0), 4.0).unwrap();
        let cloud = PointCloud::new(vec![Point::new(1.0, 1.0, 0.4), Point::new(2.0, 2.0, 0.6)]);
        let kept = remove_ground(&cloud, &dem, 0.5);
        assert_eq!(kept.points(), &[Point::new(2.0, 2.0, 0.6)]);
        assert_eq!(remove_ground(&kept, &dem, 0.5), kept);
        assert_eq!(remove_ground(&cloud, &dem, -1e12), cloud);
    }
}
