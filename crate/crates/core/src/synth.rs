//! Deterministic synthetic plantation plots with per-point ground truth.
//!
//! Surfaces (terrain, stem cylinders, crown shells) are sampled at a fixed
//! density per square metre of surface. Stem samples inside a crown survive
//! only with `stem_keep_in_crown`, mimicking occlusion by foliage.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{bounds, Cuboid, Point, PointCloud, SemanticLabel};
use crate::detect::{Backend, TreeInstance};
use crate::error::{Error, Result};
use crate::ground::Dem;
use crate::raster::{Box2D, DetectedClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub height: f64,
    pub stem_radius: f64,
    /// Lateral offset of the stem top as a fraction of height; the axis
    /// bends quadratically.
    pub bend: f64,
    pub crown_base_fraction: f64,
    pub crown_radius: f64,
    pub lower_stem_fraction: f64,
    /// Chance that a stem sample inside the crown is kept.
    pub stem_keep_in_crown: f64,
    /// Radial thickness of the foliage shell, metres inward from the surface.
    pub crown_shell: f64,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            height: 15.0,
            stem_radius: 0.15,
            bend: 0.0,
            crown_base_fraction: 0.4,
            crown_radius: 2.0,
            lower_stem_fraction: 0.4,
            stem_keep_in_crown: 0.4,
            crown_shell: 0.2,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.height > 0.0 && self.stem_radius > 0.0 && self.crown_radius > 0.0 && self.crown_shell >= 0.0) {
            return Err(Error::Config("tree sizes must be positive".into()));
        }
        if !(frac(self.crown_base_fraction) && frac(self.lower_stem_fraction) && frac(self.stem_keep_in_crown) && self.bend >= 0.0) {
            return Err(Error::Config("tree fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn crown_half_height(&self) -> f64 {
        0.5 * self.height * (1.0 - self.crown_base_fraction)
    }

    fn crown_center_z(&self) -> f64 {
        self.height - self.crown_half_height()
    }

    /// Surface area of the crown spheroid; zero without a crown.
    pub fn crown_area(&self) -> f64 {
        spheroid_area(self.crown_radius, self.crown_half_height())
    }

    /// Arc length of the stem axis.
    pub fn stem_length(&self) -> f64 {
        // Axis offset b*h*(z/h)^2: slope 2bz/h. Simpson on 64 panels.
        let h = self.height;
        let f = |z: f64| (1.0 + (2.0 * self.bend * z / h).powi(2)).sqrt();
        let n = 64;
        let dz = h / n as f64;
        let mut s = f(0.0) + f(h);
        for i in 1..n {
            s += f(i as f64 * dz) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * dz / 3.0
    }
}

/// Surface area of a spheroid with equatorial radius `a`, polar `c`.
pub fn spheroid_area(a: f64, c: f64) -> f64 {
    if c <= 0.0 || a <= 0.0 {
        return 0.0;
    }
    if (a - c).abs() < 1e-12 * a {
        return 4.0 * PI * a * a;
    }
    if c > a {
        let e = (1.0 - a * a / (c * c)).sqrt();
        2.0 * PI * a * a * (1.0 + c / (a * e) * e.asin())
    } else {
        let e = (1.0 - c * c / (a * a)).sqrt();
        2.0 * PI * a * a * (1.0 + (1.0 - e * e) / e * e.atanh())
    }
}

/// A generated tree in local coordinates: base of the stem at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTree {
    pub cloud: PointCloud,
    /// Stem axis from base to top.
    pub axis: Vec<Point>,
}

fn axis_at(p: &TreeParams, heading: (f64, f64), z: f64) -> Point {
    let off = p.bend * p.height * (z / p.height).powi(2);
    Point::new(off * heading.0, off * heading.1, z)
}

fn in_crown(p: &TreeParams, heading: (f64, f64), q: &Point) -> bool {
    let c = p.crown_half_height();
    if c <= 0.0 {
        return false;
    }
    let centre = axis_at(p, heading, p.crown_center_z());
    let (dx, dy, dz) = (q.x - centre.x, q.y - centre.y, q.z - centre.z);
    (dx * dx + dy * dy) / (p.crown_radius * p.crown_radius) + dz * dz / (c * c) < 1.0
}

/// Sample one tree. `density` is points per square metre of surface.
pub fn generate_tree(params: &TreeParams, density: f64, seed: u64) -> Result<GeneratedTree> {
    params.validate()?;
    if !(density > 0.0) {
        return Err(Error::Config("density must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(0.0..TAU);
    let heading = (angle.cos(), angle.sin());
    let h = params.height;
    let mut points = Vec::new();
    let mut labels = Vec::new();

    // Stem: rejection on arc length so samples are uniform over the surface.
    let stem_n = (density * TAU * params.stem_radius * params.stem_length()).round() as usize;
    let max_stretch = (1.0 + (2.0 * params.bend).powi(2)).sqrt();
    let mut made = 0;
    while made < stem_n {
        let z = rng.random_range(0.0..h);
        let slope = 2.0 * params.bend * z / h;
        let stretch = (1.0 + slope * slope).sqrt();
        if rng.random_range(0.0..max_stretch) > stretch {
            continue;
        }
        let phi = rng.random_range(0.0..TAU);
        let keep: f64 = rng.random();
        made += 1;
        // Frame: tangent t, horizontal normal n1 perpendicular to heading,
        // n2 = t x n1.
        let t = [slope * heading.0 / stretch, slope * heading.1 / stretch, 1.0 / stretch];
        let n1 = [-heading.1, heading.0, 0.0];
        let n2 = [t[1] * n1[2] - t[2] * n1[1], t[2] * n1[0] - t[0] * n1[2], t[0] * n1[1] - t[1] * n1[0]];
        let a = axis_at(params, heading, z);
        let (c, s) = (phi.cos() * params.stem_radius, phi.sin() * params.stem_radius);
        let q = Point::new(a.x + c * n1[0] + s * n2[0], a.y + c * n1[1] + s * n2[1], a.z + c * n1[2] + s * n2[2]);
        if in_crown(params, heading, &q) && keep >= params.stem_keep_in_crown {
            continue;
        }
        labels.push(if q.z < params.lower_stem_fraction * h {
            SemanticLabel::LowerStem
        } else {
            SemanticLabel::UpperStem
        });
        points.push(q);
    }

    // Crown: uniform on the spheroid surface by area-weighted rejection,
    // then pushed inward by up to the shell thickness.
    let (ra, rc) = (params.crown_radius, params.crown_half_height());
    let foliage_n = (density * params.crown_area()).round() as usize;
    let centre = axis_at(params, heading, params.crown_center_z());
    let gmax = ra * ra.max(rc);
    let mut made = 0;
    while made < foliage_n {
        let u: f64 = rng.random_range(-1.0..1.0);
        let phi = rng.random_range(0.0..TAU);
        let s = (1.0 - u * u).sqrt();
        let (ux, uy) = (s * phi.cos(), s * phi.sin());
        let g = ((ra * rc * ux).powi(2) + (ra * rc * uy).powi(2) + (ra * ra * u).powi(2)).sqrt();
        let accept: f64 = rng.random_range(0.0..gmax);
        let depth: f64 = rng.random_range(0.0..=1.0);
        if accept > g {
            continue;
        }
        made += 1;
        let shrink = |r: f64| (r - depth * params.crown_shell).max(0.0);
        points.push(Point::new(centre.x + shrink(ra) * ux, centre.y + shrink(ra) * uy, centre.z + shrink(rc) * u));
        labels.push(SemanticLabel::Foliage);
    }

    let axis = (0..=20).map(|i| axis_at(params, heading, h * i as f64 / 20.0)).collect();
    Ok(GeneratedTree {
        cloud: PointCloud::with_labels(points, labels)?,
        axis,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Terrain {
    Plane {
        base: f64,
        slope_x: f64,
        slope_y: f64,
    },
    Sinusoid {
        base: f64,
        amplitude: f64,
        wavelength: f64,
    },
}

impl Default for Terrain {
    fn default() -> Self {
        Terrain::Sinusoid {
            base: 0.0,
            amplitude: 2.0,
            wavelength: 80.0,
        }
    }
}

impl Terrain {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match *self {
            Terrain::Plane { base, slope_x, slope_y } => base + slope_x * x + slope_y * y,
            Terrain::Sinusoid { base, amplitude, wavelength } => {
                let k = TAU / wavelength;
                base + amplitude * (k * x).sin() * (k * y).cos()
            }
        }
    }

    /// Exact terrain sampled on a lattice covering `extent`.
    pub fn dem(&self, extent: &Cuboid, resolution: f64) -> Result<Dem> {
        let nx = ((extent.max[0] - extent.min[0]) / resolution).ceil() as usize + 1;
        let ny = ((extent.max[1] - extent.min[1]) / resolution).ceil() as usize + 1;
        let mut h = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                h.push(self.height(extent.min[0] + i as f64 * resolution, extent.min[1] + j as f64 * resolution));
            }
        }
        Dem::from_heights((extent.min[0], extent.min[1]), resolution, nx.max(2), ny.max(2), h)
    }
}

/// Per-tree parameter ranges; each tree draws uniformly from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeRanges {
    pub height: [f64; 2],
    pub stem_radius: [f64; 2],
    pub bend: [f64; 2],
    pub crown_base_fraction: [f64; 2],
    pub crown_radius: [f64; 2],
    pub lower_stem_fraction: f64,
    pub stem_keep_in_crown: f64,
    pub crown_shell: f64,
}

impl Default for TreeRanges {
    fn default() -> Self {
        Self {
            height: [12.0, 18.0],
            stem_radius: [0.12, 0.2],
            bend: [0.0, 0.02],
            crown_base_fraction: [0.35, 0.5],
            crown_radius: [1.5, 2.5],
            lower_stem_fraction: 0.4,
            stem_keep_in_crown: 0.4,
            crown_shell: 0.2,
        }
    }
}

impl TreeRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> TreeParams {
        let mut draw = |r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] };
        TreeParams {
            height: draw(self.height),
            stem_radius: draw(self.stem_radius),
            bend: draw(self.bend),
            crown_base_fraction: draw(self.crown_base_fraction),
            crown_radius: draw(self.crown_radius),
            lower_stem_fraction: self.lower_stem_fraction,
            stem_keep_in_crown: self.stem_keep_in_crown,
            crown_shell: self.crown_shell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    /// Plot corner and size in metres.
    pub origin: [f64; 2],
    pub extent: [f64; 2],
    pub tree_count: usize,
    /// Grid spacing between stems; the grid is centred in the plot.
    pub spacing: f64,
    /// Uniform x,y jitter of each stem, metres.
    pub jitter: f64,
    /// Explicit stem positions, overriding the jittered grid.
    pub positions: Option<Vec<[f64; 2]>>,
    pub density: f64,
    pub terrain: Terrain,
    /// Low vegetation points per square metre of plot.
    pub clutter_density: f64,
    pub clutter_height: f64,
    pub trees: TreeRanges,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            origin: [0.0, 0.0],
            extent: [40.0, 40.0],
            tree_count: 10,
            spacing: 9.0,
            jitter: 0.5,
            positions: None,
            density: 500.0,
            terrain: Terrain::default(),
            clutter_density: 5.0,
            clutter_height: 1.0,
            trees: TreeRanges::default(),
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0 && self.density > 0.0) {
            return Err(Error::Config("plot extent and density must be positive".into()));
        }
        if !(self.clutter_density >= 0.0 && self.clutter_height >= 0.0 && self.jitter >= 0.0 && self.spacing > 0.0) {
            return Err(Error::Config("clutter, jitter and spacing must be non-negative".into()));
        }
        Ok(())
    }

    fn stem_positions(&self, rng: &mut impl Rng) -> Vec<[f64; 2]> {
        if let Some(p) = &self.positions {
            return p.clone();
        }
        let n = self.tree_count;
        if n == 0 {
            return Vec::new();
        }
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let x0 = self.origin[0] + 0.5 * (self.extent[0] - (cols - 1) as f64 * self.spacing);
        let y0 = self.origin[1] + 0.5 * (self.extent[1] - (rows - 1) as f64 * self.spacing);
        (0..n)
            .map(|i| {
                let (c, r) = (i % cols, i / cols);
                let jx = if self.jitter > 0.0 { rng.random_range(-self.jitter..self.jitter) } else { 0.0 };
                let jy = if self.jitter > 0.0 { rng.random_range(-self.jitter..self.jitter) } else { 0.0 };
                [x0 + c as f64 * self.spacing + jx, y0 + r as f64 * self.spacing + jy]
            })
            .collect()
    }
}

/// Where a generated point came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tree: Option<usize>,
    pub label: SemanticLabel,
    pub is_ground: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeTruth {
    pub id: usize,
    pub position: [f64; 2],
    pub ground_z: f64,
    pub params: TreeParams,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub cuboid: Cuboid,
    pub point_indices: Vec<usize>,
    pub labels: Vec<SemanticLabel>,
    pub axis: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestTruth {
    pub terrain: Terrain,
    pub plot: Cuboid,
    pub trees: Vec<TreeTruth>,
    #[serde(skip)]
    pub provenance: Vec<Provenance>,
    pub warnings: Vec<String>,
}

impl ForestTruth {
    pub fn instances(&self, cloud: &PointCloud) -> Vec<TreeInstance> {
        self.trees
            .iter()
            .filter_map(|t| TreeInstance::from_indices(cloud, t.point_indices.clone(), Backend::Truth))
            .collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    /// Read truth written by [`ForestTruth::write_json`]; provenance is not
    /// stored and comes back empty.
    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub cloud: PointCloud,
    pub truth: ForestTruth,
}

/// Expected point count of a plot: surface areas times density plus clutter.
pub fn expected_point_count(params: &ForestParams, trees: &[TreeParams]) -> f64 {
    let area = params.extent[0] * params.extent[1];
    let mut n = area * (params.density + params.clutter_density);
    for t in trees {
        n += params.density * t.crown_area();
        n += params.density * TAU * t.stem_radius * t.stem_length();
    }
    n
}

/// Terrain, low clutter and trees. Points are ordered tree by tree, then
/// clutter, then terrain.
pub fn generate_forest(params: &ForestParams) -> Result<Forest> {
    params.validate()?;
    params.trees.sample(&mut ChaCha8Rng::seed_from_u64(0)).validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let positions = params.stem_positions(&mut rng);
    let tree_params: Vec<TreeParams> = positions.iter().map(|_| params.trees.sample(&mut rng)).collect();
    let mut warnings = Vec::new();
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            let d = (positions[i][0] - positions[j][0]).hypot(positions[i][1] - positions[j][1]);
            if d < tree_params[i].crown_radius + tree_params[j].crown_radius {
                warnings.push(format!("crowns of trees {i} and {j} overlap ({d:.2} m apart)"));
            }
        }
    }

    let mut points = Vec::new();
    let mut prov = Vec::new();
    let mut trees = Vec::new();
    for (id, (pos, tp)) in positions.iter().zip(&tree_params).enumerate() {
        let g = generate_tree(tp, params.density, rng.random())?;
        let gz = params.terrain.height(pos[0], pos[1]);
        let start = points.len();
        let labels = g.cloud.labels().expect("generated trees are labeled").to_vec();
        for (p, &l) in g.cloud.points().iter().zip(&labels) {
            points.push(Point::new(p.x + pos[0], p.y + pos[1], p.z + gz));
            prov.push(Provenance { tree: Some(id), label: l, is_ground: false });
        }
        let own = PointCloud::new(points[start..].to_vec());
        let cuboid = bounds(&own)?;
        trees.push(TreeTruth {
            id,
            position: *pos,
            ground_z: gz,
            params: tp.clone(),
            bbox: Box2D::new([cuboid.min[0], cuboid.min[1]], [cuboid.max[0], cuboid.max[1]], 1.0, DetectedClass::Tree)?,
            cuboid,
            point_indices: (start..points.len()).collect(),
            labels,
            axis: g.axis.iter().map(|a| Point::new(a.x + pos[0], a.y + pos[1], a.z + gz)).collect(),
        });
    }
    let area = params.extent[0] * params.extent[1];
    let xy = |rng: &mut ChaCha8Rng| {
        (
            params.origin[0] + rng.random_range(0.0..params.extent[0]),
            params.origin[1] + rng.random_range(0.0..params.extent[1]),
        )
    };
    for _ in 0..(params.clutter_density * area).round() as usize {
        let (x, y) = xy(&mut rng);
        let dz = rng.random_range(0.0..=params.clutter_height);
        points.push(Point::new(x, y, params.terrain.height(x, y) + dz));
        prov.push(Provenance { tree: None, label: SemanticLabel::Clutter, is_ground: false });
    }
    for _ in 0..(params.density * area).round() as usize {
        let (x, y) = xy(&mut rng);
        points.push(Point::new(x, y, params.terrain.height(x, y)));
        prov.push(Provenance { tree: None, label: SemanticLabel::Clutter, is_ground: true });
    }
    let labels = prov.iter().map(|p| p.label).collect();
    let cloud = PointCloud::with_labels(points, labels)?;
    let zmax = cloud.points().iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
    let zmin = cloud.points().iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let plot = Cuboid {
        min: [params.origin[0], params.origin[1], zmin.min(zmax)],
        max: [params.origin[0] + params.extent[0], params.origin[1] + params.extent[1], zmax.max(zmin)],
    };
    Ok(Forest {
        cloud,
        truth: ForestTruth {
            terrain: params.terrain,
            plot,
            trees,
            provenance: prov,
            warnings,
        },
    })
}

/// A single tree's crop from its plot: every point of the plot inside the
/// tree's truth cuboid (extended down to the ground), labeled with the
/// tree's own labels and Clutter for everything else.
pub fn training_crop(forest: &Forest, tree: usize, above_ground: f64) -> Result<PointCloud> {
    let t = &forest.truth.trees[tree];
    let region = Cuboid {
        min: [t.cuboid.min[0], t.cuboid.min[1], t.ground_z - 1.0],
        max: t.cuboid.max,
    };
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, p) in forest.cloud.points().iter().enumerate() {
        let pv = forest.truth.provenance[i];
        if !region.contains(p) || pv.is_ground || p.z - forest.truth.terrain.height(p.x, p.y) < above_ground {
            continue;
        }
        points.push(*p);
        labels.push(if pv.tree == Some(tree) { pv.label } else { SemanticLabel::Clutter });
    }
    PointCloud::with_labels(points, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_stem_stays_on_cylinder() {
        let p = TreeParams { bend: 0.0, ..TreeParams::default() };
        let t = generate_tree(&p, 300.0, 1).unwrap();
        for (q, l) in t.cloud.points().iter().zip(t.cloud.labels().unwrap()) {
            if l.is_stem() {
                assert!((q.x.hypot(q.y) - p.stem_radius).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn no_crown_means_no_foliage() {
        let p = TreeParams { crown_base_fraction: 1.0, ..TreeParams::default() };
        let t = generate_tree(&p, 200.0, 2).unwrap();
        assert!(t.cloud.labels().unwrap().iter().all(|l| l.is_stem()));
    }

    #[test]
    fn label_shares_follow_surface_areas() {
        let p = TreeParams { stem_keep_in_crown: 1.0, bend: 0.05, ..TreeParams::default() };
        let t = generate_tree(&p, 500.0, 3).unwrap();
        let l = t.cloud.labels().unwrap();
        let foliage = l.iter().filter(|&&l| l == SemanticLabel::Foliage).count() as f64;
        let lower = l.iter().filter(|&&l| l == SemanticLabel::LowerStem).count() as f64;
        let stem_area = TAU * p.stem_radius * p.stem_length();
        let want_share = stem_area / (stem_area + p.crown_area());
        let share = (l.len() as f64 - foliage) / l.len() as f64;
        assert!((share / want_share - 1.0).abs() < 0.05, "{share} vs {want_share}");
        // Lower stem: bottom 40% of a nearly straight axis.
        let lower_share = lower / (l.len() as f64 - foliage);
        assert!((lower_share / 0.4 - 1.0).abs() < 0.05, "{lower_share}");
    }

    #[test]
    fn spheroid_area_limits() {
        assert!((spheroid_area(1.0, 1.0) - 4.0 * PI).abs() < 1e-12);
        assert!((spheroid_area(1.0, 1.0 + 1e-7) - 4.0 * PI).abs() < 1e-5);
        assert!((spheroid_area(1.0, 1.0 - 1e-7) - 4.0 * PI).abs() < 1e-5);
        assert_eq!(spheroid_area(1.0, 0.0), 0.0);
    }

    #[test]
    fn empty_plot_and_determinism() {
        let params = ForestParams { tree_count: 0, extent: [10.0, 10.0], ..Default::default() };
        let f = generate_forest(&params).unwrap();
        assert!(f.truth.trees.is_empty());
        assert_eq!(f.cloud.len(), 10 * 10 * 505);
        let small = ForestParams { tree_count: 2, extent: [15.0, 10.0], density: 100.0, ..Default::default() };
        assert_eq!(generate_forest(&small).unwrap(), generate_forest(&small).unwrap());
    }

    #[test]
    fn plot_count_matches_expectation_and_truth_partitions_trees() {
        let params = ForestParams { density: 500.0, ..Default::default() };
        let f = generate_forest(&params).unwrap();
        let tps: Vec<TreeParams> = f.truth.trees.iter().map(|t| t.params.clone()).collect();
        let want = expected_point_count(&params, &tps);
        // In-crown stem thinning removes a known fraction only in
        // expectation; compare with keep = 1 as an upper bound.
        assert!(f.cloud.len() as f64 <= want * 1.001);
        let no_occlusion = ForestParams {
            trees: TreeRanges { stem_keep_in_crown: 1.0, ..Default::default() },
            ..params
        };
        let f2 = generate_forest(&no_occlusion).unwrap();
        assert!((f2.cloud.len() as f64 / want - 1.0).abs() < 0.05);

        let mut seen = vec![0; f.cloud.len()];
        for t in &f.truth.trees {
            for &i in &t.point_indices {
                seen[i] += 1;
                assert_eq!(f.truth.provenance[i].tree, Some(t.id));
            }
        }
        for (i, p) in f.truth.provenance.iter().enumerate() {
            assert_eq!(seen[i], p.tree.is_some() as usize);
        }
        assert_eq!(f.truth.provenance.len(), f.cloud.len());
    }

    #[test]
    fn ground_points_sit_on_terrain() {
        let params = ForestParams { tree_count: 1, extent: [12.0, 12.0], density: 50.0, ..Default::default() };
        let f = generate_forest(&params).unwrap();
        for (p, pv) in f.cloud.points().iter().zip(&f.truth.provenance) {
            if pv.is_ground {
                assert_eq!(p.z, f.truth.terrain.height(p.x, p.y));
            }
        }
    }

    #[test]
    fn close_stems_warn() {
        let params = ForestParams {
            positions: Some(vec![[10.0, 10.0], [11.0, 10.0]]),
            extent: [20.0, 20.0],
            density: 20.0,
            ..Default::default()
        };
        let f = generate_forest(&params).unwrap();
        assert_eq!(f.truth.trees.len(), 2);
        assert_eq!(f.truth.warnings.len(), 1);
    }

    #[test]
    fn crop_relabels_neighbours_as_clutter() {
        let params = ForestParams {
            positions: Some(vec![[10.0, 10.0], [12.5, 10.0]]),
            extent: [20.0, 20.0],
            density: 50.0,
            ..Default::default()
        };
        let f = generate_forest(&params).unwrap();
        let crop = training_crop(&f, 0, 0.0).unwrap();
        let own = crop.labels().unwrap().iter().filter(|&&l| l != SemanticLabel::Clutter).count();
        assert_eq!(own, f.truth.trees[0].point_indices.len());
        assert!(crop.len() > own);
    }

    #[test]
    fn truth_json_round_trip() {
        let params = ForestParams { tree_count: 1, extent: [10.0, 10.0], density: 20.0, ..Default::default() };
        let f = generate_forest(&params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("truth.json");
        f.truth.write_json(&p).unwrap();
        let back = ForestTruth::read_json(&p).unwrap();
        assert_eq!(back.trees, f.truth.trees);
        assert_eq!(back.terrain, f.truth.terrain);
    }
}
