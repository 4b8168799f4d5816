//! RUN1 run checkpoints, written at task boundaries.
//!
//! Layout (little-endian): magic `RUN1`, version u32, then four blocks, each
//! a u64 byte length followed by the payload:
//!
//! 1. run configuration as JSON
//! 2. the model as an MLP1 file
//! 3. the episodic memory
//! 4. stream state as JSON (next position, accuracy-matrix rows, traces)

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CurriculumError, PhaseTrace, RunConfig, StreamState};
use crate::codec::{ByteReader, ByteWriter};
use crate::evalreport::AccuracyMatrix;
use crate::nn::{read_mlp1, write_mlp1};
use crate::replay::EpisodicMemory;

pub const RUN1_MAGIC: &[u8; 4] = b"RUN1";
pub const RUN1_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunCheckpoint {
    pub config: RunConfig,
    pub state: StreamState,
}

#[derive(Serialize, Deserialize)]
struct StreamHeader {
    next_position: usize,
    matrix: AccuracyMatrix,
    traces: Vec<PhaseTrace>,
}

impl RunCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CurriculumError> {
        let header = StreamHeader {
            next_position: self.state.next_position,
            matrix: self.state.matrix.clone(),
            traces: self.state.traces.clone(),
        };
        let mut w = ByteWriter::new();
        w.bytes(RUN1_MAGIC);
        w.u32(RUN1_VERSION);
        w.block(&serde_json::to_vec(&self.config)?);
        w.block(&write_mlp1(&self.state.model));
        w.block(&self.state.memory.to_bytes());
        w.block(&serde_json::to_vec(&header)?);
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CurriculumError> {
        let mut r = ByteReader::new(bytes);
        r.magic(RUN1_MAGIC)?;
        r.version(RUN1_VERSION)?;
        let config: RunConfig = serde_json::from_slice(r.block()?)?;
        let model = read_mlp1(r.block()?)?;
        let memory = EpisodicMemory::from_bytes(r.block()?)?;
        let header: StreamHeader = serde_json::from_slice(r.block()?)?;
        r.finish()?;
        header.matrix.validate()?;
        Ok(RunCheckpoint {
            config,
            state: StreamState {
                next_position: header.next_position,
                model,
                memory,
                matrix: header.matrix,
                traces: header.traces,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CurriculumError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)
            .map_err(|source| CurriculumError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CurriculumError> {
        let bytes = std::fs::read(path)
            .map_err(|source| CurriculumError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}
