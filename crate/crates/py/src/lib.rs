//! Python bindings: point clouds, ground removal, detection, RANSAC stem
//! segmentation, scoring, synthetic plots and the config-driven pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use canopy::detect::Backend;
use canopy::pipeline::{detect_stage, ground_stage, run_pipeline, PipelineConfig, TrainPlan};
use canopy::segment::{ransac_stem, split_stem_by_height, StemRansacParams};
use canopy::synth::{generate_forest, ForestParams};
use canopy::{Error, Point, SemanticLabel};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::InvalidArgument(_) | Error::Parse { .. } | Error::EmptyCloud(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config(toml_text: Option<&str>) -> PyResult<PipelineConfig> {
    let cfg = match toml_text {
        Some(t) => PipelineConfig::from_toml(t).map_err(py_err)?,
        None => PipelineConfig::default(),
    };
    cfg.validate_params().map_err(py_err)?;
    Ok(cfg)
}

/// Points with optional per-point labels (0 foliage, 1 lower stem,
/// 2 upper stem, 3 clutter, 255 unlabeled).
#[pyclass(name = "PointCloud", module = "canopy_py", from_py_object)]
#[derive(Clone)]
pub struct PyPointCloud {
    inner: canopy::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (xyz, labels=None))]
    fn new(xyz: Vec<(f64, f64, f64)>, labels: Option<Vec<u8>>) -> PyResult<Self> {
        let points = xyz.into_iter().map(|(x, y, z)| Point::new(x, y, z)).collect();
        let labels = labels.map(|l| l.into_iter().map(|c| SemanticLabel::from_code(c as i64)).collect());
        let inner = canopy::PointCloud::from_parts(points, labels).map_err(py_err)?;
        inner.check_finite().map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Read PLY, CSV or XYZ, chosen by extension.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: canopy::io::load_auto(path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let format = canopy::io::CloudFormat::from_path(&path);
        canopy::io::save_pointcloud(&self.inner, path, format).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn xyz(&self) -> Vec<(f64, f64, f64)> {
        self.inner.points().iter().map(|p| (p.x, p.y, p.z)).collect()
    }

    fn labels(&self) -> Option<Vec<u8>> {
        self.inner.labels().map(|l| l.iter().map(|c| c.code()).collect())
    }

    fn select(&self, indices: Vec<usize>) -> PyResult<Self> {
        if indices.iter().any(|&i| i >= self.inner.len()) {
            return Err(PyValueError::new_err("index out of range"));
        }
        Ok(Self { inner: self.inner.select(&indices) })
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points, labeled={})", self.inner.len(), self.inner.labels().is_some())
    }
}

/// Ground surface interpolated over a regular lattice.
#[pyclass(name = "Dem", module = "canopy_py")]
pub struct PyDem {
    inner: canopy::ground::Dem,
}

#[pymethods]
impl PyDem {
    fn height(&self, x: f64, y: f64) -> f64 {
        self.inner.height(x, y)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(path).map_err(py_err)
    }
}

/// Estimate the DEM and return it with the indices of above-ground points.
#[pyfunction]
#[pyo3(signature = (cloud, config=None))]
fn remove_ground(cloud: &PyPointCloud, config: Option<&str>) -> PyResult<(PyDem, Vec<usize>)> {
    let cfg = self::config(config)?;
    let r = ground_stage(&cloud.inner, &cfg.ground).map_err(py_err)?;
    Ok((PyDem { inner: r.dem }, r.kept))
}

/// Detect trees; returns one list of point indices per tree.
#[pyfunction]
#[pyo3(signature = (cloud, backend="chm", config=None))]
fn detect(cloud: &PyPointCloud, backend: &str, config: Option<&str>) -> PyResult<Vec<Vec<usize>>> {
    let mut cfg = self::config(config)?;
    cfg.detect.backend = match backend {
        "chm" => Backend::Chm,
        "dbscan" => Backend::Dbscan,
        other => return Err(PyValueError::new_err(format!("unsupported backend `{other}` (chm, dbscan)"))),
    };
    let ground = ground_stage(&cloud.inner, &cfg.ground).map_err(py_err)?;
    let inst = detect_stage(&cfg, &cloud.inner, &ground).map_err(py_err)?;
    Ok(inst.into_iter().map(|t| t.indices).collect())
}

/// Label one tree's points as foliage, lower or upper stem with per-slice
/// RANSAC line fitting.
#[pyfunction]
#[pyo3(signature = (tree, dem, seed=0, split_fraction=0.4))]
fn segment_ransac(tree: &PyPointCloud, dem: &PyDem, seed: u64, split_fraction: f64) -> PyResult<PyPointCloud> {
    let all = (0..tree.inner.len()).collect();
    let inst = canopy::detect::TreeInstance::from_indices(&tree.inner, all, Backend::Truth)
        .ok_or_else(|| PyValueError::new_err("empty tree"))?;
    let stem = ransac_stem(&inst, &dem.inner, &StemRansacParams::default(), seed).map_err(py_err)?;
    let inner = split_stem_by_height(&stem, &dem.inner, split_fraction).map_err(py_err)?;
    Ok(PyPointCloud { inner })
}

#[pyfunction]
fn pointset_iou(a: Vec<usize>, b: Vec<usize>) -> f64 {
    canopy::eval::pointset_iou(&a, &b)
}

/// Greedy one-to-one matching; returns (precision, recall, f1).
#[pyfunction]
#[pyo3(signature = (predicted, ground_truth, threshold=0.5))]
fn match_detections(predicted: Vec<Vec<usize>>, ground_truth: Vec<Vec<usize>>, threshold: f64) -> (f64, f64, f64) {
    let r = canopy::eval::match_detections(&predicted, &ground_truth, threshold);
    (r.precision, r.recall, r.f1)
}

/// Per-class IoU of a labeled prediction against labeled truth:
/// (foliage, lower stem, upper stem, combined stem).
#[pyfunction]
fn segmentation_iou(predicted: &PyPointCloud, truth: &PyPointCloud) -> PyResult<(f64, f64, f64, f64)> {
    let s = canopy::eval::segmentation_iou(&predicted.inner, &truth.inner).map_err(py_err)?;
    Ok((s.foliage, s.lower_stem, s.upper_stem, s.combined_stem))
}

/// Synthetic plot from forest parameters given as TOML. Returns the cloud
/// and the point indices of each tree.
#[pyfunction]
#[pyo3(signature = (params=None, seed=None))]
fn synth_forest(params: Option<&str>, seed: Option<u64>) -> PyResult<(PyPointCloud, Vec<Vec<usize>>)> {
    let mut p: ForestParams = match params {
        Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ForestParams::default(),
    };
    if let Some(s) = seed {
        p.seed = s;
    }
    p.validate().map_err(py_err)?;
    let forest = generate_forest(&p).map_err(py_err)?;
    let trees = forest.truth.trees.iter().map(|t| t.point_indices.clone()).collect();
    Ok((PyPointCloud { inner: forest.cloud }, trees))
}

/// Run every enabled stage of a TOML config file; returns output digests.
#[pyfunction]
fn run(config_path: PathBuf) -> PyResult<Vec<(String, String)>> {
    let cfg = PipelineConfig::load(config_path).map_err(py_err)?;
    cfg.validate_params().map_err(py_err)?;
    cfg.validate().map_err(py_err)?;
    let m = run_pipeline(&cfg).map_err(py_err)?;
    Ok(m.digests().into_iter().collect())
}

/// Train the segmenter named in a TOML config file; returns the model path
/// and its sha256.
#[pyfunction]
#[pyo3(signature = (config_path, fine_tune_from=None))]
fn train(config_path: PathBuf, fine_tune_from: Option<PathBuf>) -> PyResult<(PathBuf, String)> {
    let cfg = PipelineConfig::load(config_path).map_err(py_err)?;
    cfg.validate_params().map_err(py_err)?;
    let plan = TrainPlan::prepare(&cfg, fine_tune_from.as_deref()).map_err(py_err)?;
    let art = plan.execute().map_err(py_err)?;
    Ok((art.model, art.digest))
}

#[pymodule]
fn canopy_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyDem>()?;
    m.add_function(wrap_pyfunction!(remove_ground, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(segment_ransac, m)?)?;
    m.add_function(wrap_pyfunction!(pointset_iou, m)?)?;
    m.add_function(wrap_pyfunction!(match_detections, m)?)?;
    m.add_function(wrap_pyfunction!(segmentation_iou, m)?)?;
    m.add_function(wrap_pyfunction!(synth_forest, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
