//! Binary checkpoint: magic, a JSON header, then named little-endian f64
//! tensors with their shapes.
//!
//! ```text
//! "QARC" | u32 version | u64 header_len | header JSON
//! u64 count | { u32 name_len | name | u32 ndim | u64 dims.. | f64 data.. }*
//! ```
//! Optimizer moments are stored as `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, Parameterized};

const MAGIC: &[u8; 4] = b"QARC";
const VERSION: u32 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub adam_step: u64,
    pub score_stats_seeded: bool,
    /// Training person ids in classifier order.
    pub class_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn capture(model: &mut Model, optimizer: &Adam, epoch: usize, seed: u64, class_ids: &[usize]) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit_params("", &mut |name, p| {
            tensors.insert(name.to_string(), p.value.clone());
        });
        for (name, (m, v)) in &optimizer.moments {
            tensors.insert(format!("{MOMENT_M}{name}"), m.clone());
            tensors.insert(format!("{MOMENT_V}{name}"), v.clone());
        }
        Self {
            header: CheckpointHeader {
                model: model.config.clone(),
                epoch,
                seed,
                adam_step: optimizer.step,
                score_stats_seeded: model.matcher.as_ref().is_some_and(|m| m.head.stats_seeded),
                class_ids: class_ids.to_vec(),
            },
            tensors,
        }
    }

    /// Rebuilds the model and optimizer state.
    pub fn restore(&self) -> Result<(Model, Adam)> {
        let mut model = Model::new(&self.header.model, self.header.seed)?;
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        model.visit_params("", &mut |name, p| match self.tensors.get(name) {
            None => missing.push(name.to_string()),
            Some(t) if t.shape() != p.shape() => mismatched.push(name.to_string()),
            Some(t) => p.value.assign(t),
        });
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing tensors {missing:?}, shape mismatches {mismatched:?}"
            )));
        }
        if let Some(m) = &mut model.matcher {
            m.head.stats_seeded = self.header.score_stats_seeded;
        }
        let mut adam = Adam {
            step: self.header.adam_step,
            ..Adam::default()
        };
        for (name, m) in &self.tensors {
            if let Some(param) = name.strip_prefix(MOMENT_M) {
                let v = self
                    .tensors
                    .get(&format!("{MOMENT_V}{param}"))
                    .ok_or_else(|| Error::Checkpoint(format!("second moment of {param} missing")))?;
                adam.moments.insert(param.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok((model, adam))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r).map_err(|e| match e {
            ReadError::Io(e) => Error::Checkpoint(format!("{}: {e}", path.display())),
            ReadError::Format(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        })
    }

    fn read_from<R: Read>(r: &mut R) -> std::result::Result<Self, ReadError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReadError::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ReadError::Format(format!("unsupported version {version}")));
        }
        let header_len = read_u64(r)? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| ReadError::Format(e.to_string()))?;
        let count = read_u64(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| ReadError::Format(e.to_string()))?;
            let ndim = read_u32(r)? as usize;
            let dims = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| ReadError::Format(e.to_string()))?;
            tensors.insert(name, t);
        }
        Ok(Self { header, tensors })
    }
}

enum ReadError {
    Io(std::io::Error),
    Format(String),
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Loads a checkpoint file into a model (optimizer state discarded).
pub fn load_model(path: &Path) -> Result<(Model, CheckpointHeader)> {
    let ckpt = Checkpoint::read(path)?;
    let (model, _) = ckpt.restore()?;
    Ok((model, ckpt.header))
}
