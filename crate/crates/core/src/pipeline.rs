//! End-to-end orchestration: one TOML config drives ground removal,
//! detection, per-tree segmentation and evaluation, and every run leaves a
//! manifest of stage timings and output digests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cloud::{bounds, PointCloud, SemanticLabel};
use crate::detect::{
    detect_chm_watershed, detect_dbscan, detect_from_boxes, write_instances, Backend, ChmParams, DbscanParams,
    TreeInstance,
};
use crate::error::{Error, Result};
use crate::eval::{aggregate, match_detections, segmentation_iou, EvalReport};
use crate::ground::{above_ground_indices, estimate_dem, Dem, GroundParams};
use crate::io::{load_auto, save_pointcloud, CloudFormat};
use crate::nn::{fine_tune, train, write_loss_csv, Checkpoint, SegNetArch, TrainConfig, TrainingTree};
use crate::par::map_indexed;
use crate::raster::{colorize, read_boxes, window_rasters, RasterParams};
use crate::segment::{
    ransac_stem, segment_eigen, segment_fcn, split_stem_by_height, train_eigen_classifier, EigenClassifier,
    EigenTrainConfig, LabeledTree, Segmenter, StemRansacParams,
};
use crate::synth::ForestTruth;
use crate::voxel::{GridSpec, DEFAULT_MAX_DIST};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input: PathBuf,
    pub output_dir: PathBuf,
    /// Generator truth JSON; needed by evaluation and the `truth` backend.
    pub truth: Option<PathBuf>,
    /// Box JSON for the `boxes` backend.
    pub boxes: Option<PathBuf>,
    /// Network checkpoint for the `fcn` segmenter.
    pub checkpoint: Option<PathBuf>,
    /// Classifier JSON for the `eigen` segmenter.
    pub eigen_model: Option<PathBuf>,
    /// Labeled single-tree clouds for training.
    pub train_data: Vec<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            truth: None,
            boxes: None,
            checkpoint: None,
            eigen_model: None,
            train_data: Vec::new(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.input);
        fix(&mut self.output_dir);
        for p in [&mut self.truth, &mut self.boxes, &mut self.checkpoint, &mut self.eigen_model]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.train_data.iter_mut().for_each(fix);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    /// When off, the input is taken as already ground-free and heights are
    /// measured from its lowest point.
    pub ground: bool,
    pub rasterize: bool,
    pub detect: bool,
    pub segment: bool,
    pub eval: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            ground: true,
            rasterize: false,
            detect: true,
            segment: true,
            eval: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub backend: Backend,
    pub chm: ChmParams,
    pub dbscan: DbscanParams,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Chm,
            chm: ChmParams::default(),
            dbscan: DbscanParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub backend: Segmenter,
    pub ransac: StemRansacParams,
    /// Stem points below this fraction of tree height are lower stem
    /// (RANSAC only; the other segmenters predict both stem classes).
    pub stem_split_fraction: f64,
    /// Label upsampling cutoff for the network segmenter, metres.
    pub max_dist: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            backend: Segmenter::Ransac,
            ransac: StemRansacParams::default(),
            stem_split_fraction: 0.4,
            max_dist: DEFAULT_MAX_DIST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// A detection matches when its point-set IoU is strictly above this.
    pub detection_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { detection_iou: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workers: usize,
    pub paths: Paths,
    pub stages: Stages,
    pub ground: GroundParams,
    pub raster: RasterParams,
    pub detect: DetectConfig,
    /// Template grid for training; inference uses the checkpoint's grid.
    pub grid: GridSpec,
    pub arch: SegNetArch,
    pub train: TrainConfig,
    pub eigen: EigenTrainConfig,
    pub segment: SegmentConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            stages: Stages::default(),
            ground: GroundParams::default(),
            raster: RasterParams::default(),
            detect: DetectConfig::default(),
            grid: GridSpec::default(),
            arch: SegNetArch::default(),
            train: TrainConfig::default(),
            eigen: EigenTrainConfig::default(),
            segment: SegmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn require_file(what: &str, p: &Option<PathBuf>) -> Result<()> {
    match p {
        None => Err(Error::Config(format!("{what} path is required"))),
        Some(p) if !p.is_file() => Err(Error::Config(format!("{what} {} does not exist", p.display()))),
        Some(_) => Ok(()),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parse a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.paths.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parameter checks shared by every command; no file access.
    pub fn validate_params(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.ground.validate()?;
        self.raster.validate()?;
        self.detect.chm.validate()?;
        self.detect.dbscan.validate()?;
        self.grid.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.segment.ransac.validate()?;
        if !(0.0..=1.0).contains(&self.segment.stem_split_fraction) {
            return Err(Error::Config("stem_split_fraction must lie in [0, 1]".into()));
        }
        if !(self.segment.max_dist > 0.0) {
            return Err(Error::Config("max_dist must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.detection_iou) {
            return Err(Error::Config("detection_iou must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Everything `run` needs, checked before anything is written.
    pub fn validate(&self) -> Result<()> {
        self.validate_params()?;
        if !self.paths.input.is_file() {
            return Err(Error::Config(format!("input {} does not exist", self.paths.input.display())));
        }
        let s = &self.stages;
        if s.segment && !s.detect {
            return Err(Error::Config("segment stage needs the detect stage".into()));
        }
        if s.eval && !s.detect {
            return Err(Error::Config("eval stage needs the detect stage".into()));
        }
        if s.eval || (s.detect && self.detect.backend == Backend::Truth) {
            require_file("truth", &self.paths.truth)?;
        }
        if s.detect && self.detect.backend == Backend::Boxes {
            require_file("boxes", &self.paths.boxes)?;
        }
        if s.segment {
            match self.segment.backend {
                Segmenter::Fcn => require_file("checkpoint", &self.paths.checkpoint)?,
                Segmenter::Eigen => require_file("eigen model", &self.paths.eigen_model)?,
                Segmenter::Ransac => {}
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    /// Output file name (relative to the output directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    /// All output digests, keyed by file name.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.stages.iter().flat_map(|s| s.outputs.clone()).collect()
    }

    /// Recompute digests of the outputs in `dir` and compare.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<bool> {
        for (name, digest) in self.digests() {
            if sha256_file(dir.as_ref().join(&name))? != digest {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("canopy".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("manifest".to_string(), MANIFEST_VERSION.to_string()),
    ])
}

/// DEM plus the indices of input points kept above it.
#[derive(Debug, Clone)]
pub struct GroundResult {
    pub dem: Dem,
    pub kept: Vec<usize>,
}

pub fn ground_stage(cloud: &PointCloud, params: &GroundParams) -> Result<GroundResult> {
    let dem = estimate_dem(cloud, params)?;
    let kept = above_ground_indices(cloud, &dem, params.removal_threshold);
    Ok(GroundResult { dem, kept })
}

/// Flat surface at the lowest point, for inputs that are already ground-free.
pub fn flat_ground(cloud: &PointCloud, resolution: f64) -> Result<GroundResult> {
    let b = bounds(cloud)?;
    let dem = Dem::flat(b.min[2], (b.min[0], b.min[1]), (b.max[0], b.max[1]), resolution)?;
    Ok(GroundResult { dem, kept: (0..cloud.len()).collect() })
}

/// Detect trees among the kept points. Instance indices refer to `cloud`.
pub fn detect_stage(cfg: &PipelineConfig, cloud: &PointCloud, ground: &GroundResult) -> Result<Vec<TreeInstance>> {
    let above = cloud.select(&ground.kept);
    let local = match cfg.detect.backend {
        Backend::Chm => detect_chm_watershed(&above, &ground.dem, &cfg.detect.chm)?,
        Backend::Dbscan => detect_dbscan(&above, &cfg.detect.dbscan, cfg.workers)?,
        Backend::Boxes => {
            let path = cfg.paths.boxes.as_ref().ok_or_else(|| Error::Config("boxes path is required".into()))?;
            let b = bounds(&above)?;
            detect_from_boxes(&above, &read_boxes(path)?, (b.min[2], b.max[2]))?
        }
        Backend::Truth => {
            let path = cfg.paths.truth.as_ref().ok_or_else(|| Error::Config("truth path is required".into()))?;
            let truth = ForestTruth::read_json(path)?;
            let mut local_of = vec![usize::MAX; cloud.len()];
            for (k, &i) in ground.kept.iter().enumerate() {
                local_of[i] = k;
            }
            truth
                .trees
                .iter()
                .filter_map(|t| {
                    let idx = t
                        .point_indices
                        .iter()
                        .filter_map(|&i| local_of.get(i).copied().filter(|&k| k != usize::MAX))
                        .collect();
                    TreeInstance::from_indices(&above, idx, Backend::Truth)
                })
                .collect()
        }
    };
    Ok(local
        .into_iter()
        .map(|mut t| {
            t.indices = t.indices.iter().map(|&i| ground.kept[i]).collect();
            t
        })
        .collect())
}

/// A loaded segmentation model.
#[derive(Debug, Clone)]
pub enum SegmentModel {
    Fcn(Box<Checkpoint>),
    Eigen(EigenClassifier),
    Ransac,
}

impl SegmentModel {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let missing = |what: &str| Error::Config(format!("{what} path is required"));
        Ok(match cfg.segment.backend {
            Segmenter::Fcn => {
                let p = cfg.paths.checkpoint.as_ref().ok_or_else(|| missing("checkpoint"))?;
                SegmentModel::Fcn(Box::new(Checkpoint::load(p)?))
            }
            Segmenter::Eigen => {
                let p = cfg.paths.eigen_model.as_ref().ok_or_else(|| missing("eigen model"))?;
                SegmentModel::Eigen(EigenClassifier::load(p)?)
            }
            Segmenter::Ransac => SegmentModel::Ransac,
        })
    }
}

/// Label every instance's points. Trees run in parallel; the output order
/// follows `instances`.
pub fn segment_stage(cfg: &PipelineConfig, model: &SegmentModel, instances: &[TreeInstance], dem: &Dem) -> Result<Vec<PointCloud>> {
    let one = |i: usize| -> Result<PointCloud> {
        let tree = &instances[i];
        let [cx, cy, _] = tree.cuboid.center();
        let ground_z = dem.height(cx, cy);
        match model {
            SegmentModel::Fcn(ckpt) => segment_fcn(tree, ckpt, &ckpt.grid, ground_z, cfg.segment.max_dist),
            SegmentModel::Eigen(clf) => segment_eigen(&tree.points, ground_z, clf, 1),
            SegmentModel::Ransac => {
                let seed = cfg.seed ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
                let stem = ransac_stem(tree, dem, &cfg.segment.ransac, seed)?;
                split_stem_by_height(&stem, dem, cfg.segment.stem_split_fraction)
            }
        }
    };
    map_indexed(instances.len(), cfg.workers, one).into_iter().collect()
}

/// The whole input with segmented labels; points outside every instance
/// stay Unlabeled. Later instances win where instances overlap.
pub fn label_cloud(cloud: &PointCloud, instances: &[TreeInstance], segmented: &[PointCloud]) -> Result<PointCloud> {
    let mut labels = vec![SemanticLabel::Unlabeled; cloud.len()];
    for (t, s) in instances.iter().zip(segmented) {
        let l = s.labels().ok_or_else(|| Error::InvalidArgument("segmented tree carries no labels".into()))?;
        for (&i, &lab) in t.indices.iter().zip(l) {
            labels[i] = lab;
        }
    }
    PointCloud::with_labels(cloud.points().to_vec(), labels)
}

/// Score detections against the generator's truth and, when segmentations
/// are given, score each matched tree over the predicted instance's points.
pub fn evaluate(
    truth: &ForestTruth,
    cloud_len: usize,
    instances: &[TreeInstance],
    segmented: Option<&[PointCloud]>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let pred: Vec<Vec<usize>> = instances.iter().map(|t| t.indices.clone()).collect();
    let gt: Vec<Vec<usize>> = truth.trees.iter().map(|t| t.point_indices.clone()).collect();
    let detection = match_detections(&pred, &gt, cfg.detection_iou);
    let segmentation = match segmented {
        Some(seg) => {
            let mut gt_label = vec![SemanticLabel::Clutter; cloud_len];
            for t in &truth.trees {
                for (&i, &l) in t.point_indices.iter().zip(&t.labels) {
                    *gt_label.get_mut(i).ok_or_else(|| {
                        Error::InvalidArgument(format!("truth index {i} outside a cloud of {cloud_len} points"))
                    })? = l;
                }
            }
            let mut scores = Vec::new();
            for pair in &detection.pairs {
                let inst = &instances[pair.pred];
                let labels = inst.indices.iter().map(|&i| gt_label[i]).collect();
                let gt_cloud = PointCloud::with_labels(inst.points.points().to_vec(), labels)?;
                scores.push(segmentation_iou(&seg[pair.pred], &gt_cloud)?);
            }
            if scores.is_empty() {
                None
            } else {
                Some(aggregate(&scores)?)
            }
        }
        None => None,
    };
    Ok(EvalReport {
        detection: Some(detection),
        segmentation,
    })
}

/// Output directory bookkeeping: files written so far, removed again if
/// the run fails.
struct Run {
    dir: PathBuf,
    written: Vec<PathBuf>,
    stages: Vec<StageRecord>,
    pending: Vec<String>,
}

impl Run {
    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        self.pending.push(name.to_string());
        p
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Run) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let value = f(self).map_err(|e| Error::Stage { stage: name, source: Box::new(e) })?;
        let mut outputs = BTreeMap::new();
        for file in std::mem::take(&mut self.pending) {
            let digest = sha256_file(self.dir.join(&file)).map_err(|e| Error::Stage { stage: name, source: Box::new(e) })?;
            outputs.insert(file, digest);
        }
        self.stages.push(StageRecord {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            outputs,
        });
        Ok(value)
    }

    fn cleanup(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

/// Validate, then run every enabled stage, writing outputs and
/// `manifest.json` into the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut run = Run {
        dir,
        written: Vec::new(),
        stages: Vec::new(),
        pending: Vec::new(),
    };
    match execute(cfg, &mut run) {
        Ok(()) => {
            let manifest = RunManifest {
                config: cfg.clone(),
                versions: versions(),
                stages: run.stages.clone(),
            };
            let path = run.output(MANIFEST_FILE);
            if let Err(e) = manifest.write_json(&path) {
                run.cleanup();
                return Err(e);
            }
            Ok(manifest)
        }
        Err(e) => {
            run.cleanup();
            Err(e)
        }
    }
}

fn execute(cfg: &PipelineConfig, run: &mut Run) -> Result<()> {
    let (cloud, ground) = run.stage("ground", |run| {
        let cloud = load_auto(&cfg.paths.input)?;
        if !cfg.stages.ground {
            let g = flat_ground(&cloud, cfg.ground.dem_resolution)?;
            return Ok((cloud, g));
        }
        let g = ground_stage(&cloud, &cfg.ground)?;
        save_pointcloud(&cloud.select(&g.kept), run.output("above_ground.ply"), CloudFormat::PlyBinary)?;
        g.dem.write_csv(run.output("dem.csv"))?;
        Ok((cloud, g))
    })?;
    if cfg.stages.rasterize {
        run.stage("rasterize", |run| {
            for (i, (_, r)) in window_rasters(&cloud.select(&ground.kept), &cfg.raster)?.iter().enumerate() {
                colorize(r).save_png(run.output(&format!("window_{i:03}.png")))?;
            }
            Ok(())
        })?;
    }
    if !cfg.stages.detect {
        return Ok(());
    }
    let instances = run.stage("detect", |run| {
        let inst = detect_stage(cfg, &cloud, &ground)?;
        write_instances(&inst, run.output("instances.json"))?;
        Ok(inst)
    })?;
    let segmented = if cfg.stages.segment {
        Some(run.stage("segment", |run| {
            let model = SegmentModel::load(cfg)?;
            let seg = segment_stage(cfg, &model, &instances, &ground.dem)?;
            save_pointcloud(&label_cloud(&cloud, &instances, &seg)?, run.output("labeled.ply"), CloudFormat::PlyBinary)?;
            Ok(seg)
        })?)
    } else {
        None
    };
    if cfg.stages.eval {
        run.stage("eval", |run| {
            let path = cfg.paths.truth.as_ref().ok_or_else(|| Error::Config("truth path is required".into()))?;
            let truth = ForestTruth::read_json(path)?;
            let report = evaluate(&truth, cloud.len(), &instances, segmented.as_deref(), &cfg.eval)?;
            let json = run.output("report.json");
            report.write_json(&json)?;
            if report.detection.is_some() {
                run.output("report.detection.csv");
            }
            if report.segmentation.is_some() {
                run.output("report.segmentation.csv");
            }
            report.write_csv(&json)
        })?;
    }
    Ok(())
}

/// Labeled single-tree clouds for training; each tree's ground is its
/// lowest point.
pub fn load_training_trees(paths: &[PathBuf]) -> Result<Vec<TrainingTree>> {
    paths
        .iter()
        .map(|p| {
            let cloud = load_auto(p)?;
            if cloud.labels().is_none() {
                return Err(Error::InvalidArgument(format!("{} carries no labels", p.display())));
            }
            let ground_z = bounds(&cloud)?.min[2];
            Ok(TrainingTree { cloud, ground_z })
        })
        .collect()
}

/// Everything a training run needs, loaded and checked up front.
#[derive(Debug)]
pub struct TrainPlan {
    pub config: PipelineConfig,
    pub trees: Vec<TrainingTree>,
    pub start: Option<Checkpoint>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    /// Checkpoint or classifier file.
    pub model: PathBuf,
    pub loss_csv: Option<PathBuf>,
    pub digest: String,
}

impl TrainPlan {
    /// Fails on bad parameters, missing data, or a starting checkpoint whose
    /// architecture or grid differs from the config.
    pub fn prepare(config: &PipelineConfig, fine_tune_from: Option<&Path>) -> Result<Self> {
        config.validate_params()?;
        if config.paths.train_data.is_empty() {
            return Err(Error::Config("no training data given".into()));
        }
        for p in &config.paths.train_data {
            if !p.is_file() {
                return Err(Error::Config(format!("training file {} does not exist", p.display())));
            }
        }
        let start = match (config.segment.backend, fine_tune_from) {
            (Segmenter::Ransac, _) => return Err(Error::Config("the ransac segmenter has nothing to train".into())),
            (Segmenter::Eigen, Some(_)) => {
                return Err(Error::Config("fine-tuning applies to the fcn segmenter only".into()))
            }
            (Segmenter::Fcn, Some(p)) => {
                let ckpt = Checkpoint::load(p).map_err(|e| Error::Config(e.to_string()))?;
                if ckpt.net.arch != config.arch {
                    return Err(Error::Config(format!(
                        "checkpoint architecture {:?} differs from the configured {:?}",
                        ckpt.net.arch, config.arch
                    )));
                }
                if ckpt.grid.dims != config.grid.dims || ckpt.grid.voxel_size != config.grid.voxel_size {
                    return Err(Error::Config("checkpoint grid differs from the configured grid".into()));
                }
                Some(ckpt)
            }
            _ => None,
        };
        let trees = load_training_trees(&config.paths.train_data).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            config: config.clone(),
            trees,
            start,
            out_dir: config.paths.output_dir.clone(),
        })
    }

    pub fn execute(&self) -> Result<TrainArtifacts> {
        let cfg = &self.config;
        std::fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let mut train_cfg = cfg.train.clone();
        train_cfg.workers = cfg.workers;
        match cfg.segment.backend {
            Segmenter::Eigen => {
                let labeled: Vec<LabeledTree> = self
                    .trees
                    .iter()
                    .map(|t| LabeledTree { cloud: t.cloud.clone(), ground_z: t.ground_z })
                    .collect();
                let clf = train_eigen_classifier(&labeled, &cfg.eigen, cfg.seed, cfg.workers)?;
                let model = self.out_dir.join("eigen_model.json");
                clf.save(&model)?;
                let digest = sha256_file(&model)?;
                Ok(TrainArtifacts { model, loss_csv: None, digest })
            }
            _ => {
                let outcome = match &self.start {
                    Some(ckpt) => fine_tune(ckpt, &self.trees, &train_cfg, cfg.seed)?,
                    None => train(&self.trees, cfg.arch.clone(), &cfg.grid, &train_cfg, cfg.seed)?,
                };
                let model = self.out_dir.join("checkpoint.ckpt");
                let loss = self.out_dir.join("loss.csv");
                outcome.checkpoint.save(&model)?;
                write_loss_csv(&outcome.trace, &loss)?;
                let digest = sha256_file(&model)?;
                Ok(TrainArtifacts { model, loss_csv: Some(loss), digest })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_forest, ForestParams, Terrain, TreeRanges};

    fn plot(dir: &Path) -> PipelineConfig {
        let params = ForestParams {
            extent: [20.0, 20.0],
            tree_count: 4,
            density: 60.0,
            spacing: 9.0,
            terrain: Terrain::Plane { base: 0.0, slope_x: 0.05, slope_y: 0.0 },
            trees: TreeRanges { height: [10.0, 12.0], ..Default::default() },
            seed: 3,
            ..Default::default()
        };
        let forest = generate_forest(&params).unwrap();
        save_pointcloud(&forest.cloud, dir.join("plot.ply"), CloudFormat::PlyBinary).unwrap();
        forest.truth.write_json(dir.join("truth.json")).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.paths.input = dir.join("plot.ply");
        cfg.paths.truth = Some(dir.join("truth.json"));
        cfg.paths.output_dir = dir.join("out");
        cfg.ground.dem_resolution = 2.0;
        cfg.detect.dbscan.min_cluster_size = 100;
        cfg
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_backend_is_a_config_error() {
        let err = PipelineConfig::from_toml("[detect]\nbackend = \"yolo\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = PipelineConfig::from_toml("[segment]\nbackend = \"magic\"\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(PipelineConfig::from_toml("typo = 1\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[paths]\ninput = \"a.ply\"\noutput_dir = \"o\"\n").unwrap();
        let cfg = PipelineConfig::load(&p).unwrap();
        assert_eq!(cfg.paths.input, dir.path().join("a.ply"));
        assert_eq!(cfg.paths.output_dir, dir.path().join("o"));
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = plot(dir.path());
        cfg.segment.backend = Segmenter::Fcn;
        assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
        assert!(!cfg.paths.output_dir.exists());
    }

    #[test]
    fn end_to_end_is_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = plot(dir.path());
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.digests(), b.digests());
        assert!(a.verify(&cfg.paths.output_dir).unwrap());
        let names: Vec<_> = a.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["ground", "detect", "segment", "eval"]);
        let report: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(cfg.paths.output_dir.join("report.json")).unwrap()).unwrap();
        let det = report.detection.unwrap();
        assert_eq!(det.ground_truth, 4);
        assert!(det.recall > 0.0);
        assert!(report.segmentation.is_some());
        let back = RunManifest::read_json(cfg.paths.output_dir.join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.digests(), a.digests());
    }

    #[test]
    fn failed_stage_names_itself_and_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = plot(dir.path());
        // A truth file that parses but indexes past the cloud.
        let mut truth = ForestTruth::read_json(cfg.paths.truth.as_ref().unwrap()).unwrap();
        truth.trees[0].point_indices.push(usize::MAX / 2);
        truth.trees[0].labels.push(SemanticLabel::Foliage);
        let bad = dir.path().join("bad_truth.json");
        truth.write_json(&bad).unwrap();
        cfg.paths.truth = Some(bad);
        match run_pipeline(&cfg) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "eval"),
            other => panic!("{other:?}"),
        }
        let left: Vec<_> = std::fs::read_dir(&cfg.paths.output_dir).unwrap().collect();
        assert!(left.is_empty());
    }

    #[test]
    fn fine_tune_needs_a_matching_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.segment.backend = Segmenter::Fcn;
        cfg.arch.filters = 2;
        cfg.grid = GridSpec::new([8, 8, 8], [0.5; 3], [0.0; 3]).unwrap();
        let tree = dir.path().join("t.csv");
        std::fs::write(&tree, "0,0,0,1\n0,0,1,2\n0.5,0,2,0\n").unwrap();
        cfg.paths.train_data = vec![tree];
        cfg.paths.output_dir = dir.path().join("o");
        cfg.train.iterations = 1;
        cfg.train.batch_trees = 1;
        cfg.train.augmentations_per_tree = 0;
        let art = TrainPlan::prepare(&cfg, None).unwrap().execute().unwrap();
        assert!(TrainPlan::prepare(&cfg, Some(&art.model)).is_ok());
        let mut other = cfg.clone();
        other.arch.filters = 3;
        assert!(matches!(TrainPlan::prepare(&other, Some(&art.model)), Err(Error::Config(_))));
    }
}
