//! Self-contained model files: magic, little-endian header length, JSON
//! header, then raw little-endian `f32` tensor data.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Normalizer;
use crate::diffusion::{DiffusionError, NoiseSchedule};
use crate::unet::{DenoiserParams, UNetConfig, UNetError};

const MAGIC: &[u8; 8] = b"CGNCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("bad header: {0}")]
    Header(String),
    #[error(transparent)]
    Net(#[from] UNetError),
    #[error(transparent)]
    Schedule(#[from] DiffusionError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    case: String,
    n: usize,
    config: UNetConfig,
    schedule: ScheduleParams,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub case: String,
    /// Bus count of the case the model was trained on.
    pub n: usize,
    pub params: DenoiserParams<f32>,
    pub schedule: ScheduleParams,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::new(self.schedule.t_max, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        let tensors = self
            .params
            .specs
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                offset: s.offset * 4,
                dtype: "f32".into(),
            })
            .collect();
        let header = Header {
            case: self.case.clone(),
            n: self.n,
            config: self.params.config.clone(),
            schedule: self.schedule.clone(),
            normalizer: self.normalizer.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut raw = Vec::with_capacity(self.params.data.len() * 4);
        for v in &self.params.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&raw)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;

        let mut params = DenoiserParams::<f32>::zeros(&header.config)?;
        if header.tensors.len() != params.specs.len() {
            return Err(CheckpointError::Header(format!(
                "expected {} tensors, found {}",
                params.specs.len(),
                header.tensors.len()
            )));
        }
        for (entry, spec) in header.tensors.iter().zip(params.specs.clone()) {
            if entry.name != spec.name || entry.shape != spec.shape || entry.dtype != "f32" {
                return Err(CheckpointError::Header(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    entry.name, entry.shape, spec.name, spec.shape
                )));
            }
            let bytes = raw
                .get(entry.offset..entry.offset + spec.len * 4)
                .ok_or_else(|| CheckpointError::Header(format!("tensor {} truncated", entry.name)))?;
            for (dst, chunk) in params.data[spec.offset..spec.offset + spec.len]
                .iter_mut()
                .zip(bytes.chunks_exact(4))
            {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
        }
        Ok(Checkpoint {
            case: header.case,
            n: header.n,
            params,
            schedule: header.schedule,
            normalizer: header.normalizer,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
