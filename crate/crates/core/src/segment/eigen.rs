use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, SemanticLabel};
use crate::error::{Error, Result};
use crate::kdtree::{Dims, KdIndex};
use crate::nn::{inverse_frequency, OptimizerKind, OptimizerState};
use crate::par::map_indexed;

/// Per-point neighbourhood shape descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenFeatures {
    pub linearity: f64,
    pub planarity: f64,
    pub scatter: f64,
    /// |z component| of the principal direction.
    pub verticality: f64,
    pub height_above_ground: f64,
}

/// Covariance eigen-features over the `k` nearest neighbours of each point
/// (the point itself included). Coincident neighbourhoods get scatter 1.
pub fn eigen_features(cloud: &PointCloud, k: usize, ground_z: f64, workers: usize) -> Result<Vec<EigenFeatures>> {
    if k == 0 || cloud.len() < k {
        return Err(Error::InvalidArgument(format!(
            "eigen features need at least k = {k} points, cloud has {}",
            cloud.len()
        )));
    }
    let index = KdIndex::build(cloud.points(), Dims::Three)?;
    let pts = cloud.points();
    let out = map_indexed(pts.len(), workers, |i| -> Result<EigenFeatures> {
        let nbrs = index.knn(&pts[i], k)?;
        let n = nbrs.len() as f64;
        let mut mean = Vector3::zeros();
        for nb in &nbrs {
            let p = &pts[nb.index];
            mean += Vector3::new(p.x, p.y, p.z);
        }
        mean /= n;
        let mut cov = Matrix3::zeros();
        for nb in &nbrs {
            let p = &pts[nb.index];
            let d = Vector3::new(p.x, p.y, p.z) - mean;
            cov += d * d.transpose();
        }
        cov /= n;
        Ok(features_from_covariance(cov, pts[i].z - ground_z))
    });
    out.into_iter().collect()
}

fn features_from_covariance(cov: Matrix3<f64>, height: f64) -> EigenFeatures {
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l = order.map(|i| eig.eigenvalues[i].max(0.0));
    let principal = eig.eigenvectors.column(order[0]);
    if l[0] <= 0.0 {
        return EigenFeatures {
            linearity: 0.0,
            planarity: 0.0,
            scatter: 1.0,
            verticality: 0.0,
            height_above_ground: height,
        };
    }
    EigenFeatures {
        linearity: (l[0] - l[1]) / l[0],
        planarity: (l[1] - l[2]) / l[0],
        scatter: l[2] / l[0],
        verticality: principal[2].abs().min(1.0),
        height_above_ground: height,
    }
}

/// Number of classifier inputs per point.
pub const FEATURE_COUNT: usize = 5;
const CLASSES: [SemanticLabel; 3] = [SemanticLabel::Foliage, SemanticLabel::LowerStem, SemanticLabel::UpperStem];

/// Classifier inputs: the shape trio, verticality, and height as a fraction
/// of the tree's tallest point.
fn inputs(features: &[EigenFeatures]) -> Vec<[f64; FEATURE_COUNT]> {
    let top = features.iter().map(|f| f.height_above_ground).fold(f64::EPSILON, f64::max);
    features
        .iter()
        .map(|f| [f.linearity, f.planarity, f.scatter, f.verticality, f.height_above_ground / top])
        .collect()
}

/// A labeled single-tree cloud and the ground height beneath it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTree {
    pub cloud: PointCloud,
    pub ground_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenTrainConfig {
    pub k: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Weight classes by inverse frequency.
    pub balance_classes: bool,
}

impl Default for EigenTrainConfig {
    fn default() -> Self {
        Self {
            k: 30,
            iterations: 500,
            learning_rate: 0.05,
            balance_classes: true,
        }
    }
}

/// Multinomial logistic regression over standardized eigen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenClassifier {
    pub k: usize,
    pub mean: [f64; FEATURE_COUNT],
    pub scale: [f64; FEATURE_COUNT],
    /// Row per class (foliage, lower stem, upper stem): weights then bias.
    pub weights: Vec<[f32; FEATURE_COUNT + 1]>,
}

impl EigenClassifier {
    fn logits(&self, x: &[f64; FEATURE_COUNT]) -> [f64; 3] {
        std::array::from_fn(|c| {
            let w = &self.weights[c];
            let mut s = w[FEATURE_COUNT] as f64;
            for j in 0..FEATURE_COUNT {
                s += w[j] as f64 * (x[j] - self.mean[j]) / self.scale[j];
            }
            s
        })
    }

    pub fn predict(&self, x: &[f64; FEATURE_COUNT]) -> SemanticLabel {
        let l = self.logits(x);
        let mut best = 0;
        for c in 1..3 {
            if l[c] > l[best] {
                best = c;
            }
        }
        CLASSES[best]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        if c.weights.len() != 3 {
            return Err(Error::InvalidArgument(format!("{}: expected 3 class rows", path.display())));
        }
        Ok(c)
    }
}

fn class_slot(l: SemanticLabel) -> Option<usize> {
    CLASSES.iter().position(|&c| c == l)
}

/// Fit the classifier on labeled trees. Clutter and unlabeled points are
/// skipped; every target class must be present.
pub fn train_eigen_classifier(trees: &[LabeledTree], cfg: &EigenTrainConfig, seed: u64, workers: usize) -> Result<EigenClassifier> {
    let mut samples: Vec<([f64; FEATURE_COUNT], usize)> = Vec::new();
    for tree in trees {
        let labels = tree
            .cloud
            .labels()
            .ok_or_else(|| Error::InvalidArgument("classifier training needs labeled clouds".into()))?;
        let x = inputs(&eigen_features(&tree.cloud, cfg.k, tree.ground_z, workers)?);
        samples.extend(x.into_iter().zip(labels).filter_map(|(x, &l)| class_slot(l).map(|c| (x, c))));
    }
    fit(samples, cfg, seed)
}

/// Fit on precomputed inputs. Samples are put in a canonical order first so
/// the result does not depend on how they were supplied.
fn fit(mut samples: Vec<([f64; FEATURE_COUNT], usize)>, cfg: &EigenTrainConfig, seed: u64) -> Result<EigenClassifier> {
    let mut counts = [0u64; 3];
    for (_, c) in &samples {
        counts[*c] += 1;
    }
    if let Some(missing) = (0..3).find(|&c| counts[c] == 0) {
        return Err(Error::InvalidArgument(format!("no training points of class {}", CLASSES[missing].name())));
    }
    samples.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let n = samples.len() as f64;
    let mut mean = [0.0; FEATURE_COUNT];
    let mut scale = [0.0; FEATURE_COUNT];
    for (x, _) in &samples {
        for j in 0..FEATURE_COUNT {
            mean[j] += x[j] / n;
        }
    }
    for (x, _) in &samples {
        for j in 0..FEATURE_COUNT {
            scale[j] += (x[j] - mean[j]).powi(2) / n;
        }
    }
    let scale = scale.map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
    let class_w: [f64; 3] = if cfg.balance_classes {
        let w4 = inverse_frequency([counts[0], counts[1], counts[2], 1]);
        let w = [w4[0], w4[1], w4[2]];
        let m = w.iter().sum::<f64>() / 3.0;
        w.map(|v| v / m)
    } else {
        [1.0; 3]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<f32> = (0..3 * (FEATURE_COUNT + 1)).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut opt = OptimizerState::new(OptimizerKind::Adam, params.len());
    let z: Vec<[f64; FEATURE_COUNT]> = samples
        .iter()
        .map(|(x, _)| std::array::from_fn(|j| (x[j] - mean[j]) / scale[j]))
        .collect();
    let norm: f64 = samples.iter().map(|(_, c)| class_w[*c]).sum();
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0f64; params.len()];
        for (x, (_, c)) in z.iter().zip(&samples) {
            let logits: [f64; 3] = std::array::from_fn(|k| {
                let row = &params[k * (FEATURE_COUNT + 1)..(k + 1) * (FEATURE_COUNT + 1)];
                row[FEATURE_COUNT] as f64 + (0..FEATURE_COUNT).map(|j| row[j] as f64 * x[j]).sum::<f64>()
            });
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e = logits.map(|l| (l - m).exp());
            let s: f64 = e.iter().sum();
            let w = class_w[*c] / norm;
            for k in 0..3 {
                let d = w * (e[k] / s - if k == *c { 1.0 } else { 0.0 });
                let row = k * (FEATURE_COUNT + 1);
                for j in 0..FEATURE_COUNT {
                    grad[row + j] += d * x[j];
                }
                grad[row + FEATURE_COUNT] += d;
            }
        }
        let g: Vec<f32> = grad.iter().map(|&v| v as f32).collect();
        opt.step(&mut params, &g, cfg.learning_rate as f32);
    }
    Ok(EigenClassifier {
        k: cfg.k,
        mean,
        scale,
        weights: params.chunks(FEATURE_COUNT + 1).map(|r| r.try_into().unwrap()).collect(),
    })
}

/// Label every point with the classifier's most likely class.
pub fn segment_eigen(cloud: &PointCloud, ground_z: f64, classifier: &EigenClassifier, workers: usize) -> Result<PointCloud> {
    let x = inputs(&eigen_features(cloud, classifier.k, ground_z, workers)?);
    let labels = x.iter().map(|x| classifier.predict(x)).collect();
    PointCloud::with_labels(cloud.points().to_vec(), labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use rand_distr::{Distribution, StandardNormal};

    fn line(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| Point::new(0.0, 0.0, 0.05 * i as f64)).collect())
    }

    #[test]
    fn line_is_linear_and_vertical() {
        let f = eigen_features(&line(200), 30, 0.0, 1).unwrap();
        assert!(f.iter().all(|f| f.linearity > 0.95 && f.verticality > 0.99));
    }

    /// Lattice points in `dims` dimensions (unit spacing 0.5, exact in
    /// binary), evaluated away from the border where every neighbourhood of
    /// `k` is a complete, symmetric set of shells.
    fn lattice(n: usize, dims: usize) -> (PointCloud, Vec<usize>) {
        let mut pts = Vec::new();
        let mut inner = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for l in 0..if dims == 3 { n } else { 1 } {
                    let interior = [i, j, l].iter().take(dims).all(|&c| c >= 3 && c + 3 < n);
                    if interior {
                        inner.push(pts.len());
                    }
                    pts.push(Point::new(0.5 * i as f64, 0.5 * j as f64, 0.5 * l as f64 + 2.0));
                }
            }
        }
        (PointCloud::new(pts), inner)
    }

    #[test]
    fn plane_is_planar() {
        // Shells at squared distance 0, 1, 2, 4, 5 hold 21 points.
        let (cloud, inner) = lattice(15, 2);
        let f = eigen_features(&cloud, 21, 0.0, 1).unwrap();
        assert!(inner.iter().all(|&i| f[i].planarity > 0.95));
    }

    #[test]
    fn lattice_blob_is_scattered() {
        // Shells at squared distance 0, 1, 2, 3 hold 27 points.
        let (cloud, inner) = lattice(9, 3);
        let f = eigen_features(&cloud, 27, 0.0, 1).unwrap();
        assert!(inner.iter().all(|&i| f[i].scatter > 0.95));
    }

    #[test]
    fn gaussian_blob_is_scattered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = (0..1000)
            .map(|_| {
                let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
                Point::new(g(), g(), g())
            })
            .collect();
        let f = eigen_features(&PointCloud::new(pts), 1000, 0.0, 1).unwrap();
        assert!(f[0].scatter >= 0.5 && f[0].linearity < 0.3);
    }

    #[test]
    fn features_sum_to_one_and_degenerate_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Point> = (0..300).map(|_| Point::new(rng.random(), rng.random::<f64>() * 0.1, rng.random::<f64>() * 3.0)).collect();
        for f in eigen_features(&PointCloud::new(pts), 12, 0.0, 2).unwrap() {
            assert!((f.linearity + f.planarity + f.scatter - 1.0).abs() < 1e-9);
        }
        let same = PointCloud::new(vec![Point::new(1.0, 1.0, 1.0); 10]);
        let f = eigen_features(&same, 5, 0.0, 1).unwrap();
        assert_eq!((f[0].scatter, f[0].linearity, f[0].planarity), (1.0, 0.0, 0.0));
        assert!(eigen_features(&same, 11, 0.0, 1).is_err());
    }

    fn separable(n_per: [usize; 3], seed: u64) -> Vec<([f64; FEATURE_COUNT], usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (c, &n) in n_per.iter().enumerate() {
            for _ in 0..n {
                let mut x: [f64; FEATURE_COUNT] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                x[0] = c as f64 + rng.random_range(0.1..0.9);
                out.push((x, c));
            }
        }
        out
    }

    fn accuracy(c: &EigenClassifier, s: &[([f64; FEATURE_COUNT], usize)]) -> [f64; 3] {
        let mut hit = [0.0; 3];
        let mut tot = [0.0; 3];
        for (x, k) in s {
            tot[*k] += 1.0;
            if c.predict(x) == CLASSES[*k] {
                hit[*k] += 1.0;
            }
        }
        std::array::from_fn(|k| hit[k] / tot[k])
    }

    #[test]
    fn separable_set_is_learned() {
        let s = separable([100, 100, 100], 3);
        let c = fit(s.clone(), &EigenTrainConfig::default(), 1).unwrap();
        let acc = accuracy(&c, &s);
        assert!(acc.iter().all(|&a| a >= 0.99), "{acc:?}");
    }

    #[test]
    fn sample_order_does_not_matter() {
        let s = separable([50, 30, 20], 4);
        let mut r = s.clone();
        r.reverse();
        let cfg = EigenTrainConfig { iterations: 50, ..Default::default() };
        assert_eq!(fit(s, &cfg, 9).unwrap(), fit(r, &cfg, 9).unwrap());
    }

    #[test]
    fn balancing_evens_out_recall() {
        // Overlapping classes around the corners of a triangle at 10:1:1;
        // unweighted training favours the majority, weighted training brings
        // recalls close together.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centres = [(0.0, 0.0), (1.0, 0.0), (0.5, 0.87)];
        let mut s = Vec::new();
        for (c, n) in [(0usize, 2000usize), (1, 200), (2, 200)] {
            for _ in 0..n {
                let mut x = [0.5; FEATURE_COUNT];
                let (gx, gy): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                x[0] = centres[c].0 + 0.4 * gx;
                x[1] = centres[c].1 + 0.4 * gy;
                s.push((x, c));
            }
        }
        let cfg = EigenTrainConfig { iterations: 300, ..Default::default() };
        let bal = accuracy(&fit(s.clone(), &cfg, 1).unwrap(), &s);
        let spread = |a: [f64; 3]| a.iter().cloned().fold(0.0, f64::max) - a.iter().cloned().fold(1.0, f64::min);
        assert!(spread(bal) <= 0.2, "{bal:?}");
        let raw = accuracy(&fit(s.clone(), &EigenTrainConfig { balance_classes: false, ..cfg }, 1).unwrap(), &s);
        assert!(spread(raw) > spread(bal), "{raw:?} vs {bal:?}");
    }

    #[test]
    fn missing_class_is_rejected() {
        assert!(fit(separable([10, 10, 0], 1), &EigenTrainConfig::default(), 1).is_err());
    }

    #[test]
    fn lower_line_is_lower_stem() {
        // Tree: vertical stem line to 10 m, a foliage sheet near the top.
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let z = 0.05 * i as f64;
            pts.push(Point::new(0.0, 0.0, z));
            labels.push(if z < 4.0 { SemanticLabel::LowerStem } else { SemanticLabel::UpperStem });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..400 {
            pts.push(Point::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(7.0..10.0)));
            labels.push(SemanticLabel::Foliage);
        }
        let tree = LabeledTree {
            cloud: PointCloud::with_labels(pts, labels).unwrap(),
            ground_z: 0.0,
        };
        let cfg = EigenTrainConfig { k: 10, ..Default::default() };
        let c = train_eigen_classifier(std::slice::from_ref(&tree), &cfg, 3, 1).unwrap();
        let out = segment_eigen(&tree.cloud, 0.0, &c, 1).unwrap();
        let lower = out.labels().unwrap()[..80].iter().filter(|&&l| l == SemanticLabel::LowerStem).count();
        assert!(lower > 40);
        assert!(out.labels().unwrap().iter().all(|&l| l != SemanticLabel::Unlabeled));
        assert_eq!(out, segment_eigen(&tree.cloud, 0.0, &c, 2).unwrap());
    }
}
