//! Detection matching and per-class segmentation scores.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, SemanticLabel};
use crate::error::{Error, Result};

/// |a ∩ b| / |a ∪ b| over point indices; 0 when both are empty.
pub fn pointset_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<usize> = a.iter().copied().collect();
    let b: HashSet<usize> = b.iter().copied().collect();
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted: usize,
    pub ground_truth: usize,
    pub pairs: Vec<MatchedPair>,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Greedy one-to-one matching in descending IoU order (ties by prediction,
/// then ground-truth index); only pairs with IoU strictly above `threshold`
/// count. Precision is 0 when there are no predictions, recall 0 when there
/// is no ground truth.
pub fn match_detections(pred: &[Vec<usize>], gt: &[Vec<usize>], threshold: f64) -> DetectionReport {
    let gt_sets: Vec<HashSet<usize>> = gt.iter().map(|g| g.iter().copied().collect()).collect();
    let mut candidates = Vec::new();
    for (p, pi) in pred.iter().enumerate() {
        let ps: HashSet<usize> = pi.iter().copied().collect();
        for (g, gs) in gt_sets.iter().enumerate() {
            let inter = ps.intersection(gs).count();
            if inter == 0 {
                continue;
            }
            let iou = inter as f64 / (ps.len() + gs.len() - inter) as f64;
            if iou > threshold {
                candidates.push(MatchedPair { pred: p, gt: g, iou });
            }
        }
    }
    candidates.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !used_p[c.pred] && !used_g[c.gt] {
            used_p[c.pred] = true;
            used_g[c.gt] = true;
            pairs.push(c);
        }
    }
    let m = pairs.len() as f64;
    let precision = if pred.is_empty() { 0.0 } else { m / pred.len() as f64 };
    let recall = if gt.is_empty() { 0.0 } else { m / gt.len() as f64 };
    DetectionReport {
        precision,
        recall,
        f1: f1_score(precision, recall),
        predicted: pred.len(),
        ground_truth: gt.len(),
        pairs,
    }
}

/// Per-tree IoU for each class and for the merged stem class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub foliage: f64,
    pub lower_stem: f64,
    pub upper_stem: f64,
    pub combined_stem: f64,
}

impl SegmentationScores {
    pub fn as_array(&self) -> [f64; 4] {
        [self.foliage, self.lower_stem, self.upper_stem, self.combined_stem]
    }
}

pub const SCORE_NAMES: [&str; 4] = ["foliage", "lower_stem", "upper_stem", "combined_stem"];

fn class_iou(pred: &[SemanticLabel], gt: &[SemanticLabel], is: impl Fn(SemanticLabel) -> bool) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (a, b) = (is(p), is(g));
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of predicted against true labels, point by point. Unlabeled
/// predictions never match any class.
pub fn segmentation_iou(pred: &PointCloud, gt: &PointCloud) -> Result<SegmentationScores> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} points, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let missing = || Error::InvalidArgument("segmentation scoring needs labeled clouds".into());
    let p = pred.labels().ok_or_else(missing)?;
    let g = gt.labels().ok_or_else(missing)?;
    Ok(SegmentationScores {
        foliage: class_iou(p, g, |l| l == SemanticLabel::Foliage),
        lower_stem: class_iou(p, g, |l| l == SemanticLabel::LowerStem),
        upper_stem: class_iou(p, g, |l| l == SemanticLabel::UpperStem),
        combined_stem: class_iou(p, g, SemanticLabel::is_stem),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len();
    if n == 0 {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub trees: Vec<SegmentationScores>,
    pub foliage: MeanStd,
    pub lower_stem: MeanStd,
    pub upper_stem: MeanStd,
    pub combined_stem: MeanStd,
    /// What the ± column holds.
    pub spread: String,
}

pub fn aggregate(trees: &[SegmentationScores]) -> Result<SegmentationReport> {
    if trees.is_empty() {
        return Err(Error::InvalidArgument("aggregate needs at least one tree".into()));
    }
    let col = |k: usize| mean_std(&trees.iter().map(|t| t.as_array()[k]).collect::<Vec<_>>());
    Ok(SegmentationReport {
        trees: trees.to_vec(),
        foliage: col(0),
        lower_stem: col(1),
        upper_stem: col(2),
        combined_stem: col(3),
        spread: "sample standard deviation".into(),
    })
}

impl SegmentationReport {
    pub fn summary(&self) -> [MeanStd; 4] {
        [self.foliage, self.lower_stem, self.upper_stem, self.combined_stem]
    }

    /// One row per tree plus a mean and a std row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("tree,{}\n", SCORE_NAMES.join(","));
        for (i, t) in self.trees.iter().enumerate() {
            let v = t.as_array().map(|x| format!("{x:.6}"));
            out.push_str(&format!("{i},{}\n", v.join(",")));
        }
        let s = self.summary();
        out.push_str(&format!("mean,{}\n", s.map(|m| format!("{:.6}", m.mean)).join(",")));
        out.push_str(&format!("std,{}\n", s.map(|m| format!("{:.6}", m.std)).join(",")));
        out
    }
}

impl DetectionReport {
    pub fn to_csv(&self) -> String {
        format!(
            "precision,recall,f1,predicted,ground_truth\n{:.6},{:.6},{:.6},{},{}\n",
            self.precision, self.recall, self.f1, self.predicted, self.ground_truth
        )
    }
}

/// Both reports of an evaluation run; either may be absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationReport>,
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// CSV next to the JSON: `<stem>.detection.csv` and `<stem>.segmentation.csv`.
    pub fn write_csv(&self, json_path: impl AsRef<Path>) -> Result<()> {
        let base = json_path.as_ref().with_extension("");
        let write = |suffix: &str, text: String| -> Result<()> {
            let p = base.with_extension(suffix);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        if let Some(d) = &self.detection {
            write("detection.csv", d.to_csv())?;
        }
        if let Some(s) = &self.segmentation {
            write("segmentation.csv", s.to_csv())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use proptest::prelude::*;
    use SemanticLabel::*;

    #[test]
    fn iou_basics() {
        assert_eq!(pointset_iou(&[1, 2], &[2, 1]), 1.0);
        assert_eq!(pointset_iou(&[1], &[2]), 0.0);
        assert_eq!(pointset_iou(&[], &[]), 0.0);
        let a: Vec<usize> = (0..100).collect();
        let b: Vec<usize> = (50..150).collect();
        assert!((pointset_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matching_examples() {
        let gt = vec![(0..10).collect::<Vec<_>>(), (10..20).collect(), (20..30).collect()];
        let same = match_detections(&gt, &gt, 0.5);
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let none = match_detections(&[], &gt, 0.5);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        // IoU 0.9 with tree 0, 0.4 with tree 1.
        let p0: Vec<usize> = (0..9).collect();
        let p1: Vec<usize> = (10..14).collect();
        let r = match_detections(&[p0, p1], &gt, 0.5);
        assert_eq!((r.precision, r.recall), (0.5, 1.0 / 3.0));
        assert!((r.f1 - 0.4).abs() < 1e-12);
        assert_eq!(r.pairs.len(), 1);
    }

    fn labeled(labels: &[SemanticLabel]) -> PointCloud {
        PointCloud::with_labels(vec![Point::new(0.0, 0.0, 0.0); labels.len()], labels.to_vec()).unwrap()
    }

    #[test]
    fn stem_confusion_is_invisible_to_combined_stem() {
        let gt = labeled(&[UpperStem, UpperStem, Foliage]);
        let pred = labeled(&[LowerStem, LowerStem, Foliage]);
        let s = segmentation_iou(&pred, &gt).unwrap();
        assert_eq!((s.lower_stem, s.upper_stem, s.combined_stem, s.foliage), (0.0, 0.0, 1.0, 1.0));
        assert_eq!(segmentation_iou(&gt, &gt).unwrap().as_array()[1..], [0.0, 1.0, 1.0]);
    }

    #[test]
    fn ten_point_toy() {
        // 8 foliage right; one lower stem predicted foliage, one foliage
        // predicted lower stem.
        let mut gt = vec![Foliage; 9];
        gt.push(LowerStem);
        let mut pred = vec![Foliage; 8];
        pred.push(LowerStem);
        pred.push(Foliage);
        let s = segmentation_iou(&labeled(&pred), &labeled(&gt)).unwrap();
        assert!((s.foliage - 8.0 / 10.0).abs() < 1e-15);
        assert_eq!(s.lower_stem, 0.0);
        assert!(segmentation_iou(&labeled(&pred[..3]), &labeled(&gt)).is_err());
    }

    #[test]
    fn unlabeled_counts_as_miss() {
        let s = segmentation_iou(&labeled(&[Unlabeled, Foliage]), &labeled(&[Foliage, Foliage])).unwrap();
        assert_eq!(s.foliage, 0.5);
    }

    #[test]
    fn aggregate_closed_form() {
        let t = |v: f64| SegmentationScores { foliage: v, lower_stem: v, upper_stem: v, combined_stem: v };
        let r = aggregate(&[t(0.4), t(0.6)]).unwrap();
        assert!((r.foliage.mean - 0.5).abs() < 1e-15);
        assert!((r.foliage.std - 0.141_421_356_237_309_5).abs() < 1e-12);
        assert_eq!(aggregate(&[t(0.3), t(0.3)]).unwrap().combined_stem.std, 0.0);
        assert_eq!(aggregate(&[t(0.7)]).unwrap().upper_stem.std, 0.0);
        assert!(aggregate(&[]).is_err());
        assert!(r.to_csv().starts_with("tree,foliage,lower_stem,upper_stem,combined_stem\n"));
    }

    fn label_strategy() -> impl Strategy<Value = SemanticLabel> {
        prop_oneof![Just(Foliage), Just(LowerStem), Just(UpperStem), Just(Clutter), Just(Unlabeled)]
    }

    proptest! {
        #[test]
        fn matching_is_monotone_in_threshold(seed in 0u64..300, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut set = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.random_range(0..60)).collect() };
            let pred: Vec<Vec<usize>> = (0..4).map(|_| set(20)).collect();
            let gt: Vec<Vec<usize>> = (0..4).map(|_| set(20)).collect();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let a = match_detections(&pred, &gt, lo);
            let b = match_detections(&pred, &gt, hi);
            prop_assert!(b.precision <= a.precision && b.recall <= a.recall);
            for p in &a.pairs {
                prop_assert!(a.pairs.iter().filter(|q| q.pred == p.pred || q.gt == p.gt).count() == 1);
            }
        }

        #[test]
        fn combined_stem_not_below_worst_stem_class(pairs in prop::collection::vec((label_strategy(), label_strategy()), 1..60)) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            prop_assume!(g.contains(&LowerStem) && g.contains(&UpperStem));
            let s = segmentation_iou(&labeled(&p), &labeled(&g)).unwrap();
            prop_assert!(s.combined_stem >= s.lower_stem.min(s.upper_stem));
            let all = s.as_array();
            prop_assert!(all.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn aggregate_ignores_order(mut v in prop::collection::vec(0.0f64..1.0, 1..20)) {
            let a = mean_std(&v);
            v.reverse();
            let b = mean_std(&v);
            prop_assert!((a.mean - b.mean).abs() < 1e-12 && (a.std - b.std).abs() < 1e-12);
        }
    }
}
