//! Per-tree detection backends: canopy-height watershed, DBSCAN clustering,
//! and externally supplied 2D boxes.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{bounds, crop_indices, Cuboid, Point, PointCloud};
use crate::error::{Error, Result};
use crate::ground::Dem;
use crate::par::map_indexed;
use crate::raster::{box_to_cuboid, Box2D, DetectedClass, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Chm,
    Dbscan,
    Boxes,
    /// Ground-truth instances, e.g. from the synthetic generator.
    Truth,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chm" => Ok(Backend::Chm),
            "dbscan" => Ok(Backend::Dbscan),
            "boxes" => Ok(Backend::Boxes),
            "truth" => Ok(Backend::Truth),
            other => Err(Error::Config(format!("unknown detection backend '{other}'"))),
        }
    }
}

/// One detected tree: its member points and their indices in the source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeInstance {
    pub cuboid: Cuboid,
    pub indices: Vec<usize>,
    pub points: PointCloud,
    pub source: Backend,
}

impl TreeInstance {
    /// Instance over `indices` of `cloud` with a tight cuboid; `None` when empty.
    pub fn from_indices(cloud: &PointCloud, indices: Vec<usize>, source: Backend) -> Option<Self> {
        let points = cloud.select(&indices);
        let cuboid = bounds(&points).ok()?;
        Some(Self { cuboid, indices, points, source })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    cuboid: Cuboid,
    point_indices: Vec<usize>,
    source: Backend,
}

pub fn write_instances(instances: &[TreeInstance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let records: Vec<InstanceRecord> = instances
        .iter()
        .map(|t| InstanceRecord {
            cuboid: t.cuboid,
            point_indices: t.indices.clone(),
            source: t.source,
        })
        .collect();
    std::fs::write(path, serde_json::to_string(&records)?).map_err(|e| Error::io(path, e))
}

/// Read instances written by [`write_instances`], resolving indices in `cloud`.
pub fn read_instances(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<Vec<TreeInstance>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<InstanceRecord> = serde_json::from_str(&text)?;
    records
        .into_iter()
        .map(|r| {
            if let Some(&bad) = r.point_indices.iter().find(|&&i| i >= cloud.len()) {
                return Err(Error::InvalidArgument(format!(
                    "{}: point index {bad} outside a cloud of {} points",
                    path.display(),
                    cloud.len()
                )));
            }
            Ok(TreeInstance {
                cuboid: r.cuboid,
                points: cloud.select(&r.point_indices),
                indices: r.point_indices,
                source: r.source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChmParams {
    pub cell_size: f64,
    /// Gaussian smoothing width in cells; zero disables smoothing.
    pub smoothing_sigma: f64,
    pub min_tree_height: f64,
    /// Marker search radius in cells.
    pub peak_radius: usize,
}

impl Default for ChmParams {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            smoothing_sigma: 1.0,
            min_tree_height: 2.0,
            peak_radius: 3,
        }
    }
}

impl ChmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.smoothing_sigma >= 0.0 && self.min_tree_height > 0.0 && self.peak_radius >= 1) {
            return Err(Error::Config("CHM parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
    pub min_cluster_size: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self {
            eps: 0.8,
            min_pts: 10,
            min_cluster_size: 500,
        }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.min_pts >= 1 && self.min_cluster_size >= 1) {
            return Err(Error::Config("DBSCAN eps must be positive and counts at least 1".into()));
        }
        Ok(())
    }
}

/// Per-cell maximum height above the DEM over the cloud's x,y bounds,
/// zero where a cell has no points or only points below the DEM.
pub fn compute_chm(cloud: &PointCloud, dem: &Dem, cell_size: f64) -> Result<Raster> {
    if !(cell_size > 0.0) {
        return Err(Error::InvalidArgument("CHM cell size must be positive".into()));
    }
    let b = bounds(cloud)?;
    let w = ((b.max[0] - b.min[0]) / cell_size).floor() as usize + 1;
    let h = ((b.max[1] - b.min[1]) / cell_size).floor() as usize + 1;
    let mut chm = Raster::zeros(w, h, cell_size, (b.min[0], b.min[1]));
    for p in cloud.points() {
        let c = (((p.x - b.min[0]) / cell_size).floor() as usize).min(w - 1);
        let r = (((p.y - b.min[1]) / cell_size).floor() as usize).min(h - 1);
        let v = &mut chm.values[r * w + c];
        *v = v.max(p.z - dem.height(p.x, p.y));
    }
    Ok(chm)
}

/// Separable Gaussian blur; weights are renormalized at the borders so a
/// constant raster stays constant.
pub fn smooth_gaussian(raster: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return raster.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let (w, h) = (raster.width as isize, raster.height as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &kw) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (cc, rr) = if horizontal { (c + d, r) } else { (c, r + d) };
                    if cc >= 0 && cc < w && rr >= 0 && rr < h {
                        acc += kw * src[(rr * w + cc) as usize];
                        norm += kw;
                    }
                }
                out[(r * w + c) as usize] = acc / norm;
            }
        }
        out
    };
    let values = pass(&pass(&raster.values, true), false);
    Raster { values, ..raster.clone() }
}

/// Cells strictly higher than every other cell within `radius` (Euclidean,
/// in cells) and at least `min_height`, in row-major order.
pub fn find_markers(chm: &Raster, radius: usize, min_height: f64) -> Vec<usize> {
    let (w, h) = (chm.width as isize, chm.height as isize);
    let r = radius as isize;
    let mut markers = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let v = chm.values[(row * w + col) as usize];
            if v < min_height {
                continue;
            }
            let mut peak = true;
            'scan: for dr in -r..=r {
                for dc in -r..=r {
                    if (dr == 0 && dc == 0) || dr * dr + dc * dc > r * r {
                        continue;
                    }
                    let (rr, cc) = (row + dr, col + dc);
                    if rr >= 0 && rr < h && cc >= 0 && cc < w && chm.values[(rr * w + cc) as usize] >= v {
                        peak = false;
                        break 'scan;
                    }
                }
            }
            if peak {
                markers.push((row * w + col) as usize);
            }
        }
    }
    markers
}

#[derive(PartialEq)]
struct FloodEntry {
    height: f64,
    marker: usize,
    cell: usize,
}

impl Eq for FloodEntry {}

impl Ord for FloodEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Highest first; ties go to the lower marker index, then lower cell.
        self.height
            .total_cmp(&other.height)
            .then(Reverse(self.marker).cmp(&Reverse(other.marker)))
            .then(Reverse(self.cell).cmp(&Reverse(other.cell)))
    }
}

impl PartialOrd for FloodEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Marker-controlled watershed by priority flood, descending from the
/// markers over 8-connected cells of at least `min_height`. Returns one
/// basin label (marker position) per cell; `None` below the height floor.
/// Eligible cells the flood cannot reach join the nearest marker.
pub fn watershed(chm: &Raster, markers: &[usize], min_height: f64) -> Vec<Option<usize>> {
    let (w, h) = (chm.width, chm.height);
    let eligible = |i: usize| chm.values[i] >= min_height;
    let mut label: Vec<Option<usize>> = vec![None; w * h];
    let mut heap = BinaryHeap::new();
    for (m, &cell) in markers.iter().enumerate() {
        heap.push(FloodEntry { height: chm.values[cell], marker: m, cell });
    }
    while let Some(FloodEntry { marker, cell, .. }) = heap.pop() {
        if label[cell].is_some() {
            continue;
        }
        label[cell] = Some(marker);
        let (c, r) = ((cell % w) as isize, (cell / w) as isize);
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let n = rr as usize * w + cc as usize;
                if label[n].is_none() && eligible(n) {
                    heap.push(FloodEntry { height: chm.values[n], marker, cell: n });
                }
            }
        }
    }
    if !markers.is_empty() {
        for i in 0..w * h {
            if label[i].is_none() && eligible(i) {
                let (c, r) = ((i % w) as f64, (i / w) as f64);
                let nearest = markers
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        let d = |&m: &usize| ((m % w) as f64 - c).powi(2) + ((m / w) as f64 - r).powi(2);
                        d(a.1).total_cmp(&d(b.1)).then(a.0.cmp(&b.0))
                    })
                    .map(|(m, _)| m);
                label[i] = nearest;
            }
        }
    }
    label
}

pub fn detect_chm_watershed(cloud: &PointCloud, dem: &Dem, params: &ChmParams) -> Result<Vec<TreeInstance>> {
    params.validate()?;
    let chm = smooth_gaussian(&compute_chm(cloud, dem, params.cell_size)?, params.smoothing_sigma);
    let markers = find_markers(&chm, params.peak_radius, params.min_tree_height);
    let basins = watershed(&chm, &markers, params.min_tree_height);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); markers.len()];
    for (i, p) in cloud.points().iter().enumerate() {
        if let Some((c, r)) = chm.cell_of(p.x, p.y) {
            if let Some(m) = basins[r * chm.width + c] {
                members[m].push(i);
            }
        }
    }
    Ok(members
        .into_iter()
        .filter_map(|idx| TreeInstance::from_indices(cloud, idx, Backend::Chm))
        .collect())
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (a, b) = (find(parent, a), find(parent, b));
    if a != b {
        parent[a.max(b)] = a.min(b);
    }
}

type CellKey = (i64, i64, i64);

/// Points bucketed into cubes of side `eps / sqrt(3)`: any two points in one
/// cube are within `eps`, and neighbours can only sit in cubes at most two
/// steps away on each axis.
struct CellGrid {
    side: f64,
    cells: HashMap<CellKey, Vec<usize>>,
}

const REACH: i64 = 2;

impl CellGrid {
    fn new(pts: &[Point], eps: f64) -> Self {
        let side = eps / 3f64.sqrt();
        let mut cells: HashMap<CellKey, Vec<usize>> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            cells.entry(Self::key_of(side, p)).or_default().push(i);
        }
        Self { side, cells }
    }

    fn key_of(side: f64, p: &Point) -> CellKey {
        ((p.x / side).floor() as i64, (p.y / side).floor() as i64, (p.z / side).floor() as i64)
    }

    fn key(&self, p: &Point) -> CellKey {
        Self::key_of(self.side, p)
    }

    fn around(&self, k: CellKey) -> impl Iterator<Item = (CellKey, &Vec<usize>)> + '_ {
        (-REACH..=REACH).flat_map(move |dx| {
            (-REACH..=REACH).flat_map(move |dy| {
                (-REACH..=REACH).filter_map(move |dz| {
                    let n = (k.0 + dx, k.1 + dy, k.2 + dz);
                    self.cells.get(&n).map(|v| (n, v))
                })
            })
        })
    }
}

/// DBSCAN cluster id per point (`None` for noise). Core points have at
/// least `min_pts` points, themselves included, within `eps` (3D). Connected
/// core points form clusters; each border point joins the cluster of its
/// lowest-index core neighbour. Clusters are numbered by their lowest point
/// index, so the result does not depend on point order beyond that.
pub fn dbscan_labels(cloud: &PointCloud, eps: f64, min_pts: usize, workers: usize) -> Result<Vec<Option<usize>>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("DBSCAN eps must be positive".into()));
    }
    let pts = cloud.points();
    let n = pts.len();
    let e2 = eps * eps;
    let grid = CellGrid::new(pts, eps);
    let core = map_indexed(n, workers, |i| {
        let p = &pts[i];
        let k = grid.key(p);
        if grid.cells[&k].len() >= min_pts {
            return true;
        }
        let mut count = 0;
        for (_, members) in grid.around(k) {
            count += members.iter().filter(|&&j| pts[j].distance_squared(p) <= e2).count();
            if count >= min_pts {
                return true;
            }
        }
        false
    });
    let mut parent: Vec<usize> = (0..n).collect();
    let mut keys: Vec<&CellKey> = grid.cells.keys().collect();
    keys.sort_unstable();
    let core_of = |k: &CellKey| -> Vec<usize> { grid.cells[k].iter().copied().filter(|&i| core[i]).collect() };
    for &k in &keys {
        let mine = core_of(k);
        let Some(&first) = mine.first() else {
            continue;
        };
        for &i in &mine[1..] {
            union(&mut parent, first, i);
        }
        for (nk, _) in grid.around(*k) {
            if nk <= *k {
                continue;
            }
            let theirs = core_of(&nk);
            let Some(&other) = theirs.first() else {
                continue;
            };
            if find(&mut parent, first) == find(&mut parent, other) {
                continue;
            }
            let linked = mine.iter().any(|&a| theirs.iter().any(|&b| pts[a].distance_squared(&pts[b]) <= e2));
            if linked {
                union(&mut parent, first, other);
            }
        }
    }
    let border_of = map_indexed(n, workers, |i| {
        if core[i] {
            return None;
        }
        let p = &pts[i];
        grid.around(grid.key(p))
            .flat_map(|(_, m)| m.iter().copied())
            .filter(|&j| core[j] && pts[j].distance_squared(p) <= e2)
            .min()
    });
    let mut root_label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut labels = vec![None; n];
    for i in 0..n {
        let anchor = if core[i] { Some(i) } else { border_of[i] };
        if let Some(a) = anchor {
            let root = find(&mut parent, a);
            let l = *root_label[root].get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            labels[i] = Some(l);
        }
    }
    Ok(labels)
}

pub fn detect_dbscan(cloud: &PointCloud, params: &DbscanParams, workers: usize) -> Result<Vec<TreeInstance>> {
    params.validate()?;
    let labels = dbscan_labels(cloud, params.eps, params.min_pts, workers)?;
    let count = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            members[*l].push(i);
        }
    }
    Ok(members
        .into_iter()
        .filter(|m| m.len() >= params.min_cluster_size)
        .filter_map(|idx| TreeInstance::from_indices(cloud, idx, Backend::Dbscan))
        .collect())
}

/// One instance per Tree-class box; the cuboid is the box itself and empty
/// crops are dropped.
pub fn detect_from_boxes(cloud: &PointCloud, boxes: &[Box2D], z_extent: (f64, f64)) -> Result<Vec<TreeInstance>> {
    let mut out = Vec::new();
    for b in boxes.iter().filter(|b| b.detected_class == DetectedClass::Tree) {
        let cuboid = box_to_cuboid(b, z_extent)?;
        let indices = crop_indices(cloud, &cuboid);
        if !indices.is_empty() {
            out.push(TreeInstance {
                cuboid,
                points: cloud.select(&indices),
                indices,
                source: Backend::Boxes,
            });
        }
    }
    Ok(out)
}
