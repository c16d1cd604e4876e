//! Raw little-endian float32 volumes with a JSON sidecar.
//!
//! `<stem>.f32` holds nx·ny·nz·n_samples values in C order with the sample
//! index fastest; `<stem>.json` records the shape and provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, PipelineError, Result};

pub const DTYPE: &str = "float32-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 4],
    pub dtype: String,
    pub units: String,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeContainer {
    pub dims: [usize; 4],
    pub data: Vec<f32>,
    pub units: String,
    pub provenance: String,
}

impl VolumeContainer {
    pub fn new(dims: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return invalid(format!("volume {:?} needs {expected} values, got {}", dims, data.len()));
        }
        Ok(Self { dims, data, units: "normalized".into(), provenance: String::new() })
    }

    pub fn with_provenance(mut self, units: &str, provenance: &str) -> Self {
        self.units = units.into();
        self.provenance = provenance.into();
        self
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn n_samples(&self) -> usize {
        self.dims[3]
    }

    pub fn voxel(&self, v: usize) -> &[f32] {
        let n = self.n_samples();
        &self.data[v * n..(v + 1) * n]
    }

    /// Spatial coordinates of flat voxel index `v` (z fastest).
    pub fn coords(&self, v: usize) -> [usize; 3] {
        let [_, ny, nz, _] = self.dims;
        [v / (ny * nz), (v / nz) % ny, v % nz]
    }

    pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        (stem.with_extension("f32"), stem.with_extension("json"))
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        let (raw, meta) = Self::paths(stem);
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&raw, bytes).map_err(|e| PipelineError::io(&raw, e))?;
        let sidecar = Sidecar {
            dims: self.dims,
            dtype: DTYPE.into(),
            units: self.units.clone(),
            provenance: self.provenance.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| PipelineError::format("sidecar", e))?;
        fs::write(&meta, text + "\n").map_err(|e| PipelineError::io(&meta, e))
    }

    pub fn read(stem: &Path) -> Result<Self> {
        let (raw, meta) = Self::paths(stem);
        let text = fs::read_to_string(&meta).map_err(|e| PipelineError::io(&meta, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| PipelineError::parse(&meta, e.line(), e.column(), e.to_string()))?;
        if sidecar.dtype != DTYPE {
            return Err(PipelineError::format("sidecar", format!("unsupported dtype '{}'", sidecar.dtype)));
        }
        let bytes = fs::read(&raw).map_err(|e| PipelineError::io(&raw, e))?;
        let expected = sidecar.dims.iter().product::<usize>();
        if bytes.len() != 4 * expected {
            return Err(PipelineError::format(
                "volume",
                format!("{} holds {} bytes, dims {:?} need {}", raw.display(), bytes.len(), sidecar.dims, 4 * expected),
            ));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Self { dims: sidecar.dims, data, units: sidecar.units, provenance: sidecar.provenance })
    }
}
