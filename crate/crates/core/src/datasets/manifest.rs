//! Dataset manifests: a TOML sidecar next to each EMB1 file.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::DatasetError;

pub const MANIFEST_SCHEMA: &str = "cvqa-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub name: String,
    /// Prompt-table EMB1 file for zero-shot evaluation, relative to the
    /// manifest's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_file: Option<String>,
    pub dims: Dims,
    pub provenance: Provenance,
    /// Global answer vocabulary; ids are dense `0..C`.
    pub labels: Vec<LabelDescriptor>,
    pub tasks: Vec<TaskDescriptor>,
    /// Published train/test assignment, when the source dataset has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitAssignment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub image: usize,
    pub text: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub encoder: String,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDescriptor {
    pub id: u16,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub id: u16,
    pub name: String,
    /// Global label ids answering this task's questions.
    pub labels: Vec<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitAssignment {
    pub fn lookup(&self) -> BTreeMap<u64, super::Split> {
        self.train
            .iter()
            .map(|&id| (id, super::Split::Train))
            .chain(self.test.iter().map(|&id| (id, super::Split::Test)))
            .collect()
    }
}

impl Manifest {
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn task(&self, id: u16) -> Option<&TaskDescriptor> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn label_name(&self, id: u16) -> Option<&str> {
        self.labels.iter().find(|l| l.id == id).map(|l| l.name.as_str())
    }

    pub fn task_labels(&self) -> BTreeMap<u16, BTreeSet<u16>> {
        self.tasks.iter().map(|t| (t.id, t.labels.iter().copied().collect())).collect()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |msg: String| Err(DatasetError::Manifest(msg));
        if self.schema != MANIFEST_SCHEMA {
            return bad(format!("unsupported manifest schema `{}`", self.schema));
        }
        if self.dims.image == 0 || self.dims.text == 0 {
            return bad("embedding widths must be nonzero".into());
        }
        let mut ids: Vec<u16> = self.labels.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| id as usize != i) {
            return bad(format!("label ids must be dense 0..{}, found {ids:?}", ids.len()));
        }
        let mut task_ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if !task_ids.insert(t.id) {
                return bad(format!("duplicate task id {}", t.id));
            }
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate task name `{}`", t.name));
            }
            if t.labels.is_empty() {
                return bad(format!("task {} has no labels", t.id));
            }
            if let Some(&l) = t.labels.iter().find(|&&l| l as usize >= ids.len()) {
                return bad(format!("task {} references unknown label {l}", t.id));
            }
        }
        if let Some(split) = &self.split {
            let mut seen = BTreeSet::new();
            if let Some(id) = split.train.iter().chain(&split.test).find(|&&id| !seen.insert(id)) {
                return bad(format!("record {id} assigned to the split twice"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, DatasetError> {
        toml::to_string(self).map_err(|e| DatasetError::Manifest(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        let m: Manifest = toml::from_str(text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// The three in-scope FloodNet question categories with their default
    /// answer vocabularies. Label names are placeholders to be overridden by
    /// the exporter's vocabulary; Counting questions are not part of it.
    pub fn floodnet_template(dim: usize) -> Self {
        let labels = ["yes", "no", "flooded", "non-flooded"]
            .iter()
            .enumerate()
            .map(|(i, n)| LabelDescriptor { id: i as u16, name: n.to_string() })
            .collect();
        Manifest {
            schema: MANIFEST_SCHEMA.into(),
            name: "floodnet-vqa".into(),
            prompts_file: None,
            dims: Dims { image: dim, text: dim },
            provenance: Provenance {
                encoder: "CLIP ViT-L/14".into(),
                notes: "Yes/No, Image Condition Recognition and Road Condition Recognition questions"
                    .into(),
            },
            labels,
            tasks: vec![
                TaskDescriptor {
                    id: 0,
                    name: "yes_no".into(),
                    labels: vec![0, 1],
                    prompt_template: Some("{label}".into()),
                },
                TaskDescriptor {
                    id: 1,
                    name: "image_condition".into(),
                    labels: vec![2, 3],
                    prompt_template: Some("a photo of a {label} area".into()),
                },
                TaskDescriptor {
                    id: 2,
                    name: "road_condition".into(),
                    labels: vec![2, 3],
                    prompt_template: Some("a photo of a {label} area".into()),
                },
            ],
            split: None,
        }
    }
}
