//! Per-tree semantic segmentation: the voxel network pipeline plus the two
//! classical baselines (eigen features with a linear classifier, and
//! slice-wise RANSAC stem extraction).

mod eigen;
mod ransac;

use serde::{Deserialize, Serialize};

pub use eigen::{
    eigen_features, segment_eigen, train_eigen_classifier, EigenClassifier, EigenFeatures, EigenTrainConfig,
    LabeledTree, FEATURE_COUNT,
};
pub use ransac::{ransac_stem, StemRansacParams};

use crate::cloud::{PointCloud, SemanticLabel};
use crate::detect::TreeInstance;
use crate::error::{Error, Result};
use crate::ground::Dem;
use crate::nn::{infer, Checkpoint, TrainingTree};
use crate::voxel::{decode, upsample_labels, voxelize, GridSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segmenter {
    Fcn,
    Eigen,
    Ransac,
}

impl std::str::FromStr for Segmenter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcn" => Ok(Segmenter::Fcn),
            "eigen" => Ok(Segmenter::Eigen),
            "ransac" => Ok(Segmenter::Ransac),
            other => Err(Error::Config(format!("unknown segmentation backend '{other}'"))),
        }
    }
}

/// Grid for one tree: the template's shape, centred on the x,y bounding box
/// of `cloud` with its floor at `ground_z`. Training uses the same rule.
pub fn tree_grid(cloud: &PointCloud, template: &GridSpec, ground_z: f64) -> Result<GridSpec> {
    TrainingTree::grid_for(cloud, template, ground_z)
}

/// Voxelize, run the network, decode non-empty voxels and carry their labels
/// back to every input point. Points with no decoded voxel within
/// `max_dist` come back Unlabeled.
pub fn segment_fcn(tree: &TreeInstance, ckpt: &Checkpoint, template: &GridSpec, ground_z: f64, max_dist: f64) -> Result<PointCloud> {
    let spec = tree_grid(&tree.points, template, ground_z)?;
    let input = voxelize(&tree.points, &spec).grid;
    let predicted = infer(ckpt, &input)?;
    let low = decode(&predicted)?;
    if low.is_empty() {
        let labels = vec![SemanticLabel::Unlabeled; tree.points.len()];
        return PointCloud::with_labels(tree.points.points().to_vec(), labels);
    }
    upsample_labels(&low, &tree.points, max_dist)
}

/// Relabel stem points by height above the DEM: below `split_fraction` of
/// the tree's height they are lower stem, otherwise upper stem. Tree height
/// is the largest height above the DEM over all points.
pub fn split_stem_by_height(cloud: &PointCloud, dem: &Dem, split_fraction: f64) -> Result<PointCloud> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::InvalidArgument("stem split needs a labeled cloud".into()))?;
    let above = |i: usize| {
        let p = &cloud.points()[i];
        p.z - dem.height(p.x, p.y)
    };
    let top = (0..cloud.len()).map(above).fold(f64::NEG_INFINITY, f64::max);
    let relabeled = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if !l.is_stem() {
                return l;
            }
            let lower = if split_fraction <= 0.0 {
                false
            } else if split_fraction >= 1.0 {
                true
            } else {
                above(i) < split_fraction * top
            };
            if lower {
                SemanticLabel::LowerStem
            } else {
                SemanticLabel::UpperStem
            }
        })
        .collect();
    PointCloud::with_labels(cloud.points().to_vec(), relabeled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use crate::detect::Backend;
    use crate::nn::{SegNet, SegNetArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stem_cloud() -> PointCloud {
        let pts = vec![Point::new(0.0, 0.0, 3.9), Point::new(0.0, 0.0, 4.1), Point::new(0.5, 0.0, 10.0)];
        let labels = vec![SemanticLabel::UpperStem, SemanticLabel::LowerStem, SemanticLabel::Foliage];
        PointCloud::with_labels(pts, labels).unwrap()
    }

    #[test]
    fn split_threshold() {
        let dem = Dem::flat(0.0, (-5.0, -5.0), (5.0, 5.0), 1.0).unwrap();
        let out = split_stem_by_height(&stem_cloud(), &dem, 0.4).unwrap();
        assert_eq!(out.labels().unwrap(), &[SemanticLabel::LowerStem, SemanticLabel::UpperStem, SemanticLabel::Foliage]);
        let none = split_stem_by_height(&stem_cloud(), &dem, 0.0).unwrap();
        assert!(none.labels().unwrap()[..2].iter().all(|&l| l == SemanticLabel::UpperStem));
        let all = split_stem_by_height(&stem_cloud(), &dem, 1.0).unwrap();
        assert!(all.labels().unwrap()[..2].iter().all(|&l| l == SemanticLabel::LowerStem));
    }

    fn tiny_checkpoint(bias: [f32; 4]) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = SegNet::<f32>::new(SegNetArch { filters: 2, ..SegNetArch::default() }, &mut rng).unwrap();
        net.head.weights.iter_mut().for_each(|w| *w = 0.0);
        net.head.bias.copy_from_slice(&bias);
        Checkpoint {
            net,
            grid: GridSpec::new([8, 8, 8], [0.5, 0.5, 0.5], [0.0; 3]).unwrap(),
            iteration: 0,
            seed: 0,
            class_weights: [1.0; 4],
            optimizer: Vec::new(),
        }
    }

    fn instance() -> TreeInstance {
        let pts: Vec<Point> = (0..30).map(|i| Point::new(0.1 * (i % 5) as f64, 0.1 * (i / 5) as f64, 0.1 * i as f64)).collect();
        let cloud = PointCloud::new(pts);
        TreeInstance::from_indices(&cloud, (0..30).collect(), Backend::Truth).unwrap()
    }

    #[test]
    fn all_empty_prediction_leaves_points_unlabeled() {
        let ckpt = tiny_checkpoint([0.0, 0.0, 0.0, 5.0]);
        let out = segment_fcn(&instance(), &ckpt, &ckpt.grid, 0.0, 0.45).unwrap();
        assert_eq!(out.len(), 30);
        assert!(out.labels().unwrap().iter().all(|&l| l == SemanticLabel::Unlabeled));
    }

    #[test]
    fn constant_prediction_labels_every_point() {
        let ckpt = tiny_checkpoint([0.0, 0.0, 5.0, 0.0]);
        let t = instance();
        let out = segment_fcn(&t, &ckpt, &ckpt.grid, 0.0, 0.45).unwrap();
        assert_eq!(out.points(), t.points.points());
        assert!(out.labels().unwrap().iter().all(|&l| l == SemanticLabel::UpperStem));
    }
}
