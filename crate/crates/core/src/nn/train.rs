use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::loss::{argmax_classes, softmax_xent, NUM_CLASSES};
use super::network::{SegNet, SegNetArch};
use super::optim::{OptimizerKind, OptimizerState};
use super::tensor::Tensor4;
use crate::cloud::{bounds, PointCloud};
use crate::error::{Error, Result};
use crate::voxel::{augment, voxelize, voxelize_targets, GridSpec, OccupancyGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_after: f64,
    /// Last iteration (1-based) run at `lr_initial`.
    pub lr_switch_iteration: usize,
    /// Fixed iteration cap; no separate convergence test is applied.
    pub iterations: usize,
    pub batch_trees: usize,
    /// Randomly rotated/flipped copies per tree, on top of the tree itself.
    pub augmentations_per_tree: usize,
    pub optimizer: OptimizerKind,
    /// Per-class loss weights; inverse voxel frequency when absent.
    pub class_weights: Option<[f64; NUM_CLASSES]>,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-3,
            lr_after: 1e-4,
            lr_switch_iteration: 500,
            iterations: 3000,
            batch_trees: 6,
            augmentations_per_tree: 4,
            optimizer: OptimizerKind::Adam,
            class_weights: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_initial > 0.0 && self.lr_after > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_trees == 0 || self.workers == 0 {
            return Err(Error::Config("batch_trees and workers must be at least 1".into()));
        }
        if let Some(w) = self.class_weights {
            if !w.iter().all(|v| v.is_finite() && *v > 0.0) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        if iteration <= self.lr_switch_iteration {
            self.lr_initial
        } else {
            self.lr_after
        }
    }
}

/// A fully labeled single-tree crop and the ground height beneath it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTree {
    pub cloud: PointCloud,
    pub ground_z: f64,
}

impl TrainingTree {
    /// Grid geometry for this tree: x,y centred on its bounding box.
    pub fn grid_for(cloud: &PointCloud, template: &GridSpec, ground_z: f64) -> Result<GridSpec> {
        let b = bounds(cloud)?;
        let [cx, cy, _] = b.center();
        Ok(template.centered(cx, cy, ground_z))
    }

    /// Input occupancy and per-voxel class targets after augmentation.
    pub fn encode(&self, template: &GridSpec, rotation: f64, flip_x: bool) -> Result<(OccupancyGrid, Vec<u8>)> {
        let cloud = augment(&self.cloud, rotation, flip_x);
        let spec = Self::grid_for(&cloud, template, self.ground_z)?;
        let input = voxelize(&cloud, &spec).grid;
        let target = voxelize_targets(&cloud, &spec)?.grid.classes()?;
        Ok((input, target))
    }
}

/// Inverse voxel frequency of each class over the un-augmented dataset,
/// normalized to mean 1. Absent classes count as one voxel.
pub fn class_weights(dataset: &[TrainingTree], template: &GridSpec) -> Result<[f64; NUM_CLASSES]> {
    let mut counts = [0u64; NUM_CLASSES];
    for tree in dataset {
        let (_, target) = tree.encode(template, 0.0, false)?;
        for c in target {
            counts[c as usize] += 1;
        }
    }
    Ok(inverse_frequency(counts))
}

pub fn inverse_frequency(counts: [u64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let inv: [f64; NUM_CLASSES] = std::array::from_fn(|c| 1.0 / counts[c].max(1) as f64);
    let mean = inv.iter().sum::<f64>() / NUM_CLASSES as f64;
    inv.map(|v| v / mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_loss_csv(trace: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("iteration,loss,lr\n");
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.iteration, r.loss, r.lr));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Stateful training loop; [`train`] and [`fine_tune`] wrap it.
pub struct Trainer {
    net: SegNet<f32>,
    optimizer: Vec<OptimizerState>,
    cfg: TrainConfig,
    grid: GridSpec,
    weights: [f64; NUM_CLASSES],
    rng: ChaCha8Rng,
    seed: u64,
    iteration: usize,
    trace: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(dataset: &[TrainingTree], arch: SegNetArch, grid: &GridSpec, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = SegNet::new(arch, &mut rng)?;
        Self::with_net(net, dataset, grid, cfg, seed, rng)
    }

    /// Continue from trained parameters with a fresh optimizer state.
    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: &[TrainingTree], cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_net(ckpt.net.clone(), dataset, &ckpt.grid, cfg, seed, rng)
    }

    fn with_net(net: SegNet<f32>, dataset: &[TrainingTree], grid: &GridSpec, cfg: &TrainConfig, seed: u64, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        grid.validate()?;
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("training needs at least one labeled tree".into()));
        }
        if net.arch.in_channels != 1 {
            return Err(Error::Config("occupancy input has one channel".into()));
        }
        if grid.dims.iter().any(|d| d % 2 != 0) {
            return Err(Error::Config(format!("grid dims {:?} must be even", grid.dims)));
        }
        let weights = match cfg.class_weights {
            Some(w) => w,
            None => class_weights(dataset, grid)?,
        };
        let optimizer = net.params().iter().map(|p| OptimizerState::new(cfg.optimizer, p.len())).collect();
        Ok(Self {
            net,
            optimizer,
            cfg: cfg.clone(),
            grid: *grid,
            weights,
            rng,
            seed,
            iteration: 0,
            trace: Vec::new(),
        })
    }

    pub fn class_weights(&self) -> [f64; NUM_CLASSES] {
        self.weights
    }

    pub fn trace(&self) -> &[LossRecord] {
        &self.trace
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn net(&self) -> &SegNet<f32> {
        &self.net
    }

    /// Draw the batch: trees without replacement (with replacement only when
    /// the dataset is smaller than the batch), each plus its augmentations.
    fn draw_batch(&mut self, n: usize) -> Vec<(usize, f64, bool)> {
        let trees: Vec<usize> = if n >= self.cfg.batch_trees {
            sample(&mut self.rng, n, self.cfg.batch_trees).into_vec()
        } else {
            (0..self.cfg.batch_trees).map(|_| self.rng.random_range(0..n)).collect()
        };
        let mut out = Vec::new();
        for t in trees {
            out.push((t, 0.0, false));
            for _ in 0..self.cfg.augmentations_per_tree {
                let angle = self.rng.random_range(0.0..std::f64::consts::TAU);
                let flip = self.rng.random_bool(0.5);
                out.push((t, angle, flip));
            }
        }
        out
    }

    /// One optimizer step on a freshly drawn batch; returns the mean loss.
    pub fn step(&mut self, dataset: &[TrainingTree]) -> Result<f64> {
        let iteration = self.iteration + 1;
        let batch = self.draw_batch(dataset.len());
        let results = self.batch_gradients(dataset, &batch)?;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Vec<f32>> = self.net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for (l, g) in results {
            loss += l;
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(part) {
                    *a += b;
                }
            }
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration, loss });
        }
        let scale = (1.0 / n) as f32;
        let lr = self.cfg.learning_rate(iteration);
        for ((p, g), state) in self.net.params_mut().into_iter().zip(&mut grads).zip(&mut self.optimizer) {
            g.iter_mut().for_each(|v| *v *= scale);
            state.step(p, g, lr as f32);
        }
        self.iteration = iteration;
        self.trace.push(LossRecord { iteration, loss, lr });
        Ok(loss)
    }

    fn batch_gradients(&self, dataset: &[TrainingTree], batch: &[(usize, f64, bool)]) -> Result<Vec<(f64, Vec<Vec<f32>>)>> {
        let one = |&(t, angle, flip): &(usize, f64, bool)| -> Result<(f64, Vec<Vec<f32>>)> {
            let (input, target) = dataset[t].encode(&self.grid, angle, flip)?;
            let cache = self.net.forward(&input.to_tensor())?;
            let (loss, g) = softmax_xent(&cache.logits, &target, &self.weights)?;
            let (grads, _) = self.net.backward(&cache, &g, false)?;
            Ok((loss, grads))
        };
        let workers = self.cfg.workers.min(batch.len()).max(1);
        if workers == 1 {
            return batch.iter().map(one).collect();
        }
        // Results are gathered by batch position, so the summation order and
        // therefore the update are independent of the worker count.
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("training worker panicked")?);
            }
            Ok(out)
        })
    }

    pub fn run(&mut self, dataset: &[TrainingTree], iterations: usize, mut progress: impl FnMut(&LossRecord)) -> Result<()> {
        for _ in 0..iterations {
            self.step(dataset)?;
            progress(self.trace.last().expect("just pushed"));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            grid: self.grid,
            iteration: self.iteration,
            seed: self.seed,
            class_weights: self.weights,
            optimizer: self.optimizer.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<LossRecord>,
}

pub fn train(dataset: &[TrainingTree], arch: SegNetArch, grid: &GridSpec, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let mut t = Trainer::new(dataset, arch, grid, cfg, seed)?;
    t.run(dataset, cfg.iterations, |_| {})?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        trace: t.trace,
    })
}

pub fn fine_tune(ckpt: &Checkpoint, dataset: &[TrainingTree], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let mut t = Trainer::from_checkpoint(ckpt, dataset, cfg, seed)?;
    t.run(dataset, cfg.iterations, |_| {})?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        trace: t.trace,
    })
}

/// Per-voxel class prediction as a one-hot four-channel grid.
pub fn infer(ckpt: &Checkpoint, grid: &OccupancyGrid) -> Result<OccupancyGrid> {
    if grid.channels() != ckpt.net.arch.in_channels {
        return Err(Error::shape(
            "infer",
            format!("grid has {} channels, network expects {}", grid.channels(), ckpt.net.arch.in_channels),
        ));
    }
    let cache = ckpt.net.forward(&grid.to_tensor::<f32>())?;
    OccupancyGrid::from_classes(*grid.spec(), &argmax_classes(&cache.logits))
}

/// Mean weighted loss of the current parameters on the un-augmented dataset.
pub fn dataset_loss(net: &SegNet<f32>, dataset: &[TrainingTree], grid: &GridSpec, weights: &[f64; NUM_CLASSES]) -> Result<f64> {
    let mut total = 0.0;
    for tree in dataset {
        let (input, target) = tree.encode(grid, 0.0, false)?;
        let logits: Tensor4<f32> = net.forward(&input.to_tensor())?.logits;
        total += softmax_xent(&logits, &target, weights)?.0;
    }
    Ok(total / dataset.len().max(1) as f64)
}
