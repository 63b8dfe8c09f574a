use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{bounds, Point, PointCloud, SemanticLabel};
use crate::detect::TreeInstance;
use crate::error::{Error, Result};
use crate::ground::Dem;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StemRansacParams {
    pub slice_height: f64,
    pub iterations: usize,
    pub inlier_radius: f64,
    pub min_inliers: usize,
    /// Degrees from vertical.
    pub max_axis_tilt: f64,
    /// Sample points must lie within this x,y distance of the tree's centre.
    /// Keeps tangent lines along the crown surface out of the search.
    pub search_radius: f64,
}

impl Default for StemRansacParams {
    fn default() -> Self {
        Self {
            slice_height: 2.0,
            iterations: 500,
            inlier_radius: 0.3,
            min_inliers: 15,
            max_axis_tilt: 25.0,
            search_radius: 1.0,
        }
    }
}

impl StemRansacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.slice_height > 0.0 && self.iterations > 0 && self.inlier_radius > 0.0 && self.min_inliers > 0 && self.search_radius > 0.0) {
            return Err(Error::Config("RANSAC parameters must be positive".into()));
        }
        if !(self.max_axis_tilt > 0.0 && self.max_axis_tilt < 90.0) {
            return Err(Error::Config("RANSAC max axis tilt must be in (0, 90) degrees".into()));
        }
        Ok(())
    }
}

fn distance_to_line(p: &Point, origin: &Point, dir: [f64; 3]) -> f64 {
    let d = [p.x - origin.x, p.y - origin.y, p.z - origin.z];
    let c = [d[1] * dir[2] - d[2] * dir[1], d[2] * dir[0] - d[0] * dir[2], d[0] * dir[1] - d[1] * dir[0]];
    (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()
}

/// Best near-vertical line through one slice's candidate points: indices of
/// its inliers, or empty when no line reaches `min_inliers`.
fn fit_slice(pts: &[Point], candidates: &[usize], params: &StemRansacParams, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if candidates.len() < 2 {
        return Vec::new();
    }
    let cos_max = params.max_axis_tilt.to_radians().cos();
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..params.iterations {
        let a = candidates[rng.random_range(0..candidates.len())];
        let b = candidates[rng.random_range(0..candidates.len())];
        let (pa, pb) = (&pts[a], &pts[b]);
        let v = [pb.x - pa.x, pb.y - pa.y, pb.z - pa.z];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if a == b || len < 1e-9 {
            continue;
        }
        let dir = v.map(|c| c / len);
        if dir[2].abs() < cos_max {
            continue;
        }
        let inliers: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| distance_to_line(&pts[i], pa, dir) <= params.inlier_radius)
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
        }
    }
    if best.len() < params.min_inliers {
        return Vec::new();
    }
    // Refit through the inliers: a line through two surface samples sits off
    // the stem axis, the least-squares line runs along it.
    for _ in 0..5 {
        let Some((origin, dir)) = principal_line(pts, &best) else {
            break;
        };
        if dir[2].abs() < cos_max {
            break;
        }
        let refit: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| distance_to_line(&pts[i], &origin, dir) <= params.inlier_radius)
            .collect();
        if refit.len() <= best.len() {
            if refit.len() == best.len() {
                best = refit;
            }
            break;
        }
        best = refit;
    }
    best
}

/// Centroid and principal direction of the given points.
fn principal_line(pts: &[Point], members: &[usize]) -> Option<(Point, [f64; 3])> {
    let n = members.len() as f64;
    let mut mean = Vector3::zeros();
    for &i in members {
        mean += Vector3::new(pts[i].x, pts[i].y, pts[i].z);
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for &i in members {
        let d = Vector3::new(pts[i].x, pts[i].y, pts[i].z) - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let top = (0..3).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))?;
    let v = eig.eigenvectors.column(top);
    let len = v.norm();
    if !(len > 0.0) {
        return None;
    }
    Some((Point::new(mean[0], mean[1], mean[2]), [v[0] / len, v[1] / len, v[2] / len]))
}

/// Slice the tree into horizontal layers above the ground at its centre and
/// fit a near-vertical line in each. Inliers of accepted lines are stem,
/// everything else foliage. Stem points are labeled LowerStem;
/// [`super::split_stem_by_height`] assigns the two stem classes.
pub fn ransac_stem(tree: &TreeInstance, dem: &Dem, params: &StemRansacParams, seed: u64) -> Result<PointCloud> {
    params.validate()?;
    let pts = tree.points.points();
    let b = bounds(&tree.points)?;
    let [cx, cy, _] = b.center();
    let base = dem.height(cx, cy).min(b.min[2]);
    let layers = ((b.max[2] - base) / params.slice_height).floor() as usize + 1;
    let mut slices: Vec<Vec<usize>> = vec![Vec::new(); layers];
    for (i, p) in pts.iter().enumerate() {
        let s = (((p.z - base) / params.slice_height).floor() as usize).min(layers - 1);
        slices[s].push(i);
    }
    let mut labels = vec![SemanticLabel::Foliage; pts.len()];
    let r2 = params.search_radius * params.search_radius;
    for (s, slice) in slices.iter().enumerate() {
        let candidates: Vec<usize> = slice
            .iter()
            .copied()
            .filter(|&i| (pts[i].x - cx).powi(2) + (pts[i].y - cy).powi(2) <= r2)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for i in fit_slice(pts, &candidates, params, &mut rng) {
            labels[i] = SemanticLabel::LowerStem;
        }
    }
    PointCloud::with_labels(pts.to_vec(), labels)
}
