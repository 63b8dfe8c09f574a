use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{SegNet, SegNetArch};
use super::optim::{OptimizerKind, OptimizerState};
use crate::error::{Error, Result};
use crate::voxel::GridSpec;

const MAGIC: &[u8; 8] = b"CNPYCKPT";
const VERSION: u32 = 1;

/// Trained network plus everything needed to resume or reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: SegNet<f32>,
    pub grid: GridSpec,
    pub iteration: usize,
    pub seed: u64,
    pub class_weights: [f64; 4],
    pub optimizer: Vec<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: SegNetArch,
    grid: GridSpec,
    iteration: usize,
    seed: u64,
    class_weights: [f64; 4],
    optimizer: OptimizerKind,
    optimizer_steps: Vec<u64>,
    param_lens: Vec<usize>,
}

fn put(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    /// Serialize: magic, version, header length, JSON header, then raw
    /// little-endian f32 parameters followed by optimizer moments.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let kind = self.optimizer.first().map(|o| o.kind).unwrap_or(OptimizerKind::Adam);
        let header = Header {
            arch: self.net.arch.clone(),
            grid: self.grid,
            iteration: self.iteration,
            seed: self.seed,
            class_weights: self.class_weights,
            optimizer: kind,
            optimizer_steps: self.optimizer.iter().map(|o| o.step).collect(),
            param_lens: self.net.params().iter().map(|p| p.len()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 24 + 12 * self.net.param_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for p in self.net.params() {
            put(&mut buf, p);
        }
        for o in &self.optimizer {
            put(&mut buf, &o.first);
            put(&mut buf, &o.second);
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut cursor = 20 + hlen;
        let mut take = |n: usize| -> Result<Vec<f32>> {
            let end = cursor + 4 * n;
            let raw = bytes.get(cursor..end).ok_or_else(|| bad("truncated payload".into()))?;
            cursor = end;
            Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        };
        // Rebuild the shapes from the arch, then overwrite values.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SegNet::<f32>::new(header.arch.clone(), &mut rng)?;
        if header.param_lens.len() != 10 {
            return Err(bad("wrong parameter array count".into()));
        }
        for (slot, &len) in net.params_mut().into_iter().zip(&header.param_lens) {
            if slot.len() != len {
                return Err(bad("parameter lengths do not match architecture".into()));
            }
            *slot = take(len)?;
        }
        let mut optimizer = Vec::new();
        for (&len, &step) in header.param_lens.iter().zip(&header.optimizer_steps) {
            let mut state = OptimizerState::new(header.optimizer, len);
            state.step = step;
            state.first = take(len)?;
            state.second = take(state.second.len())?;
            optimizer.push(state);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload".into()));
        }
        Ok(Self {
            net,
            grid: header.grid,
            iteration: header.iteration,
            seed: header.seed,
            class_weights: header.class_weights,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
