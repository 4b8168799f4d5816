//! Embedding datasets: EMB1 files, manifests, splitting and synthetic data.

mod counts;
mod emb1;
mod manifest;
mod split;
mod synthetic;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::codec::CodecError;
use crate::embedding::{EmbeddingError, EmbeddingVector, PromptSet};

pub use counts::{validate_counts, CountMismatch, CountReport, CountScope, ExpectedCounts, SplitCounts};
pub use emb1::{
    decode_emb1, decode_prompt_table, encode_emb1, encode_prompt_table, prompt_sets, PromptEntry,
    EMB1_MAGIC, EMB1_VERSION,
};
pub use manifest::{
    Dims, LabelDescriptor, Manifest, Provenance, SplitAssignment, TaskDescriptor, MANIFEST_SCHEMA,
};
pub use split::{split, Split, SplitOutcome};
pub use synthetic::{gen_synthetic, SyntheticDataset, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("record {record_id}: expected width {expected}, found {found}")]
    DimMismatch { record_id: u64, expected: usize, found: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("record {record_id}: label {label_id} is not an answer of task {task_id}")]
    LabelNotInTask { record_id: u64, task_id: u16, label_id: u16 },
    #[error("record {record_id}: unknown task {task_id}")]
    UnknownTask { record_id: u64, task_id: u16 },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("cannot place {classes} means {separation} apart in dimension {dim}")]
    InfeasibleSeparation { classes: usize, dim: usize, separation: f64 },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("test fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("record {0} has no split assignment")]
    Unassigned(u64),
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub record_id: u64,
    pub task_id: u16,
    pub label_id: u16,
    pub image: EmbeddingVector,
    pub text: EmbeddingVector,
}

/// Records plus the manifest describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<EmbeddingRecord>,
}

/// Sidecar manifest path for an EMB1 file.
pub fn manifest_path(emb1: &Path) -> PathBuf {
    emb1.with_extension("manifest")
}

impl Dataset {
    pub fn new(manifest: Manifest, records: Vec<EmbeddingRecord>) -> Result<Self, DatasetError> {
        let ds = Dataset { manifest, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.manifest.validate()?;
        let dims = self.manifest.dims;
        let tasks = self.manifest.task_labels();
        for r in &self.records {
            if r.image.dim() != dims.image {
                return Err(DatasetError::DimMismatch {
                    record_id: r.record_id,
                    expected: dims.image,
                    found: r.image.dim(),
                });
            }
            if r.text.dim() != dims.text {
                return Err(DatasetError::DimMismatch {
                    record_id: r.record_id,
                    expected: dims.text,
                    found: r.text.dim(),
                });
            }
            let labels = tasks.get(&r.task_id).ok_or(DatasetError::UnknownTask {
                record_id: r.record_id,
                task_id: r.task_id,
            })?;
            if !labels.contains(&r.label_id) {
                return Err(DatasetError::LabelNotInTask {
                    record_id: r.record_id,
                    task_id: r.task_id,
                    label_id: r.label_id,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        encode_emb1(&self.records, self.manifest.dims.image, self.manifest.dims.text)
    }

    pub fn from_parts(bytes: &[u8], manifest_toml: &str) -> Result<Self, DatasetError> {
        let manifest = Manifest::from_toml(manifest_toml)?;
        let (d_img, d_txt, records) = decode_emb1(bytes)?;
        if (d_img, d_txt) != (manifest.dims.image, manifest.dims.text) {
            return Err(DatasetError::Manifest(format!(
                "file widths {d_img}/{d_txt} disagree with manifest {}/{}",
                manifest.dims.image, manifest.dims.text
            )));
        }
        Dataset::new(manifest, records)
    }

    /// Writes `path` and its `.manifest` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        let bytes = self.to_bytes()?;
        let toml = self.manifest.to_toml()?;
        std::fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))?;
        let mpath = manifest_path(path);
        std::fs::write(&mpath, toml).map_err(|e| DatasetError::io(&mpath, e))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = std::fs::read(path).map_err(|e| DatasetError::io(path, e))?;
        let mpath = manifest_path(path);
        let toml = std::fs::read_to_string(&mpath).map_err(|e| DatasetError::io(&mpath, e))?;
        Dataset::from_parts(&bytes, &toml)
    }

    /// Loads the prompt table named by the manifest, resolved against the
    /// dataset file's directory.
    pub fn load_prompts(&self, dataset_path: &Path) -> Result<Vec<PromptSet>, DatasetError> {
        let name = self
            .manifest
            .prompts_file
            .as_deref()
            .ok_or_else(|| DatasetError::Manifest("manifest names no prompt table".into()))?;
        let path = dataset_path.parent().unwrap_or(Path::new(".")).join(name);
        let bytes = std::fs::read(&path).map_err(|e| DatasetError::io(&path, e))?;
        prompt_sets(&decode_prompt_table(&bytes)?)
    }

    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<SplitDataset, DatasetError> {
        let out = split(&self.records, self.manifest.split.as_ref(), test_fraction, seed)?;
        for w in &out.warnings {
            log::warn!("{w}");
        }
        Ok(SplitDataset {
            manifest: self.manifest.clone(),
            train: out.train,
            test: out.test,
            warnings: out.warnings,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub manifest: Manifest,
    pub train: Vec<EmbeddingRecord>,
    pub test: Vec<EmbeddingRecord>,
    pub warnings: Vec<String>,
}
