use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use canopy::detect::{read_instances, write_instances, Backend};
use canopy::io::{load_auto, save_pointcloud, CloudFormat};
use canopy::pipeline::{
    detect_stage, evaluate, flat_ground, ground_stage, label_cloud, run_pipeline, segment_stage, PipelineConfig,
    SegmentModel, TrainPlan,
};
use canopy::raster::{colorize, window_rasters};
use canopy::segment::Segmenter;
use canopy::synth::{generate_forest, training_crop, ForestParams, ForestTruth};
use canopy::{Error, PointCloud};

#[derive(Parser)]
#[command(name = "canopy", version, about = "Tree detection and stem/foliage segmentation for airborne LiDAR")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (TOML). Flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the DEM and drop ground points.
    Ground {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the DEM lattice as x,y,height CSV.
        #[arg(long)]
        dem: Option<PathBuf>,
    },
    /// Write vertical-density window rasters as PNG.
    Rasterize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Detect individual trees; instance indices refer to the input cloud.
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        backend: Option<Backend>,
        #[arg(long)]
        boxes: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Segment detected trees into foliage, lower and upper stem.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        backend: Option<Segmenter>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        eigen_model: Option<PathBuf>,
    },
    /// Train the network (or the eigen-feature classifier) on labeled tree clouds.
    Train {
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        backend: Option<Segmenter>,
        #[arg(long)]
        fine_tune_from: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Score instances (and optionally labels) against generator truth.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        /// Labeled full cloud from `segment`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic plot with ground truth.
    Synth {
        /// Forest parameters (TOML); defaults when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out_cloud: PathBuf,
        #[arg(long)]
        out_truth: PathBuf,
        /// Write one labeled crop per tree, ready for `train`.
        #[arg(long)]
        out_crops: Option<PathBuf>,
    },
    /// Run every enabled stage from the config and write a manifest.
    Run,
}

/// Validation failures exit 1, failures while running exit 2.
enum Failure {
    Invalid(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn invalid(e: Error) -> Failure {
    Failure::Invalid(e)
}

fn config(global: &Global, required: bool) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &global.config {
        Some(p) => PipelineConfig::load(p).map_err(invalid)?,
        None if required => return Err(invalid(Error::Config("--config is required".into()))),
        None => PipelineConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(w) = global.workers {
        cfg.workers = w;
    }
    cfg.validate_params().map_err(invalid)?;
    Ok(cfg)
}

fn existing(p: &Path) -> Result<(), Failure> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(Error::Config(format!("{} does not exist", p.display()))))
    }
}

fn save(cloud: &PointCloud, path: &Path) -> Result<(), Failure> {
    Ok(save_pointcloud(cloud, path, CloudFormat::from_path(path))?)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Ground { input, out, dem } => {
            let cfg = config(g, false)?;
            existing(&input)?;
            let cloud = load_auto(&input)?;
            let r = ground_stage(&cloud, &cfg.ground)?;
            save(&cloud.select(&r.kept), &out)?;
            if let Some(d) = dem {
                r.dem.write_csv(d)?;
            }
            eprintln!("kept {} of {} points", r.kept.len(), cloud.len());
        }
        Command::Rasterize { input, out_dir } => {
            let cfg = config(g, false)?;
            existing(&input)?;
            let cloud = load_auto(&input)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::Io { path: out_dir.clone(), source: e })?;
            let windows = window_rasters(&cloud, &cfg.raster)?;
            for (i, (_, r)) in windows.iter().enumerate() {
                colorize(r).save_png(out_dir.join(format!("window_{i:03}.png")))?;
            }
            eprintln!("wrote {} windows", windows.len());
        }
        Command::Detect { input, out, backend, boxes, truth } => {
            let mut cfg = config(g, false)?;
            existing(&input)?;
            if let Some(b) = backend {
                cfg.detect.backend = b;
            }
            cfg.paths.boxes = boxes.or(cfg.paths.boxes);
            cfg.paths.truth = truth.or(cfg.paths.truth);
            match cfg.detect.backend {
                Backend::Boxes => existing(cfg.paths.boxes.as_deref().unwrap_or(Path::new("")))?,
                Backend::Truth => existing(cfg.paths.truth.as_deref().unwrap_or(Path::new("")))?,
                _ => {}
            }
            let cloud = load_auto(&input)?;
            let ground = if cfg.stages.ground {
                ground_stage(&cloud, &cfg.ground)?
            } else {
                flat_ground(&cloud, cfg.ground.dem_resolution)?
            };
            let inst = detect_stage(&cfg, &cloud, &ground)?;
            write_instances(&inst, &out)?;
            eprintln!("detected {} trees", inst.len());
        }
        Command::Segment { input, instances, out, backend, checkpoint, eigen_model } => {
            let mut cfg = config(g, false)?;
            existing(&input)?;
            existing(&instances)?;
            if let Some(b) = backend {
                cfg.segment.backend = b;
            }
            cfg.paths.checkpoint = checkpoint.or(cfg.paths.checkpoint);
            cfg.paths.eigen_model = eigen_model.or(cfg.paths.eigen_model);
            let model = SegmentModel::load(&cfg).map_err(invalid)?;
            let cloud = load_auto(&input)?;
            let inst = read_instances(&instances, &cloud)?;
            let ground = if cfg.stages.ground {
                ground_stage(&cloud, &cfg.ground)?
            } else {
                flat_ground(&cloud, cfg.ground.dem_resolution)?
            };
            let seg = segment_stage(&cfg, &model, &inst, &ground.dem)?;
            save(&label_cloud(&cloud, &inst, &seg)?, &out)?;
        }
        Command::Train { data, out_dir, backend, fine_tune_from, iterations } => {
            let mut cfg = config(g, false)?;
            if !data.is_empty() {
                cfg.paths.train_data = data;
            }
            if let Some(d) = out_dir {
                cfg.paths.output_dir = d;
            }
            if let Some(it) = iterations {
                cfg.train.iterations = it;
            }
            cfg.segment.backend = backend.unwrap_or(match cfg.segment.backend {
                Segmenter::Ransac => Segmenter::Fcn,
                b => b,
            });
            let plan = TrainPlan::prepare(&cfg, fine_tune_from.as_deref()).map_err(invalid)?;
            let art = plan.execute()?;
            println!("{} sha256:{}", art.model.display(), art.digest);
        }
        Command::Eval { input, truth, instances, labels, out } => {
            let cfg = config(g, false)?;
            for p in [&input, &truth, &instances] {
                existing(p)?;
            }
            let cloud = load_auto(&input)?;
            let t = ForestTruth::read_json(&truth)?;
            let inst = read_instances(&instances, &cloud)?;
            let seg = match labels {
                Some(p) => {
                    let labeled = load_auto(&p)?;
                    if labeled.len() != cloud.len() {
                        return Err(invalid(Error::InvalidArgument("labeled cloud and input differ in size".into())));
                    }
                    Some(inst.iter().map(|t| labeled.select(&t.indices)).collect::<Vec<_>>())
                }
                None => None,
            };
            let report = evaluate(&t, cloud.len(), &inst, seg.as_deref(), &cfg.eval)?;
            report.write_json(&out)?;
            report.write_csv(&out)?;
            if let Some(d) = &report.detection {
                println!("precision {:.3} recall {:.3} f1 {:.3}", d.precision, d.recall, d.f1);
            }
            if let Some(s) = &report.segmentation {
                println!("combined stem {:.3} ± {:.3}, foliage {:.3} ± {:.3}", s.combined_stem.mean, s.combined_stem.std, s.foliage.mean, s.foliage.std);
            }
        }
        Command::Synth { params, out_cloud, out_truth, out_crops } => {
            let mut p = match &params {
                Some(path) => {
                    existing(path)?;
                    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                    toml::from_str::<ForestParams>(&text).map_err(|e| invalid(Error::Config(e.to_string())))?
                }
                None => ForestParams::default(),
            };
            if let Some(s) = g.seed {
                p.seed = s;
            }
            p.validate().map_err(invalid)?;
            let forest = generate_forest(&p)?;
            save(&forest.cloud, &out_cloud)?;
            forest.truth.write_json(&out_truth)?;
            if let Some(dir) = out_crops {
                std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                for t in &forest.truth.trees {
                    save(&training_crop(&forest, t.id, 0.0)?, &dir.join(format!("tree_{:03}.ply", t.id)))?;
                }
            }
            for w in &forest.truth.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("{} points, {} trees", forest.cloud.len(), forest.truth.trees.len());
        }
        Command::Run => {
            let cfg = config(g, true)?;
            cfg.validate().map_err(invalid)?;
            let m = run_pipeline(&cfg)?;
            for s in &m.stages {
                eprintln!("{:<10} {:>8.2}s", s.name, s.seconds);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
