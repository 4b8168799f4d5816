use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    Dataset, DatasetError, Dims, EmbeddingRecord, LabelDescriptor, Manifest, PromptEntry,
    Provenance, SplitAssignment, TaskDescriptor, MANIFEST_SCHEMA,
};
use crate::embedding::EmbeddingVector;
use crate::seed::{self, Stream};

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
const TEXT_NOISE: f64 = 0.05;

/// Gaussian class clusters with unit σ; means sit on a sphere of radius
/// `cluster_separation` and are pairwise at least that far apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim_img: usize,
    pub dim_txt: usize,
    pub cluster_separation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tasks: 3,
            classes_per_task: 3,
            dim_img: 32,
            dim_txt: 32,
            cluster_separation: 8.0,
            train_per_class: 200,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.tasks * self.classes_per_task
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidSpec(m.into()));
        if self.tasks == 0 || self.classes_per_task == 0 {
            return bad("tasks and classes_per_task must be at least 1");
        }
        if self.dim_img == 0 || self.dim_txt == 0 {
            return bad("embedding widths must be at least 1");
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("per-class counts must be at least 1");
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return bad("cluster_separation must be positive and finite");
        }
        if self.num_classes() > u16::MAX as usize || self.tasks > u16::MAX as usize {
            return bad("too many labels for 16-bit ids");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Image-space class means indexed by global label id.
    pub class_means: Vec<Vec<f64>>,
    /// Text-space task means indexed by task id.
    pub text_means: Vec<Vec<f64>>,
}

impl SyntheticDataset {
    /// Prompt table whose entries are the class means, one per label.
    pub fn prompt_entries(&self) -> Result<Vec<PromptEntry>, DatasetError> {
        let mut out = Vec::new();
        for t in &self.dataset.manifest.tasks {
            for &l in &t.labels {
                let v = self.class_means[l as usize].iter().map(|&x| x as f32).collect();
                out.push(PromptEntry { task_id: t.id, label_id: l, embedding: EmbeddingVector::new(v)? });
            }
        }
        Ok(out)
    }
}

fn sample_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| sample_normal(rng)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn place_means(
    rng: &mut impl Rng,
    classes: usize,
    dim: usize,
    separation: f64,
) -> Result<Vec<Vec<f64>>, DatasetError> {
    let infeasible = || DatasetError::InfeasibleSeparation { classes, dim, separation };
    if dim == 1 && classes > 2 {
        return Err(infeasible());
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let mut v = gaussian_vec(rng, dim);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x *= separation / norm);
            if means.iter().all(|m| dist(m, &v) >= separation) {
                means.push(v);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(infeasible());
        }
    }
    Ok(means)
}

fn to_embedding(v: Vec<f64>) -> Result<EmbeddingVector, DatasetError> {
    Ok(EmbeddingVector::new(v.into_iter().map(|x| x as f32).collect())?)
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset, DatasetError> {
    spec.validate()?;
    let cpt = spec.classes_per_task;
    let mut rng = seed::rng(spec.seed, Stream::Synthetic, 0);
    let class_means = place_means(&mut rng, spec.num_classes(), spec.dim_img, spec.cluster_separation)?;
    let text_means: Vec<Vec<f64>> = (0..spec.tasks)
        .map(|_| {
            (0..spec.dim_txt)
                .map(|_| {
                    let mag = rng.random_range(0.5..1.5);
                    if rng.random::<bool>() { mag } else { -mag }
                })
                .collect()
        })
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (label, mean) in class_means.iter().enumerate() {
        let task = label / cpt;
        let mut rng = seed::rng(spec.seed, Stream::Synthetic, 1 + label as u64);
        for i in 0..spec.train_per_class + spec.test_per_class {
            let image: Vec<f64> = mean.iter().map(|&m| m + sample_normal(&mut rng)).collect();
            let text: Vec<f64> = text_means[task]
                .iter()
                .map(|&m| m + TEXT_NOISE * sample_normal(&mut rng))
                .collect();
            let side = if i < spec.train_per_class { &mut train } else { &mut test };
            side.push((task as u16, label as u16, image, text));
        }
    }

    let mut records = Vec::with_capacity(train.len() + test.len());
    let mut assignment = SplitAssignment::default();
    for (is_test, rows) in [(false, train), (true, test)] {
        for (task_id, label_id, image, text) in rows {
            let record_id = records.len() as u64;
            if is_test { assignment.test.push(record_id) } else { assignment.train.push(record_id) }
            records.push(EmbeddingRecord {
                record_id,
                task_id,
                label_id,
                image: to_embedding(image)?,
                text: to_embedding(text)?,
            });
        }
    }

    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        name: "synthetic".into(),
        prompts_file: None,
        dims: Dims { image: spec.dim_img, text: spec.dim_txt },
        provenance: Provenance {
            encoder: "synthetic-gaussian".into(),
            notes: format!(
                "{} tasks x {} classes, separation {} sigma, seed {}",
                spec.tasks, cpt, spec.cluster_separation, spec.seed
            ),
        },
        labels: (0..spec.num_classes())
            .map(|l| LabelDescriptor { id: l as u16, name: format!("t{}-c{}", l / cpt, l % cpt) })
            .collect(),
        tasks: (0..spec.tasks)
            .map(|t| TaskDescriptor {
                id: t as u16,
                name: format!("task-{t}"),
                labels: (t * cpt..(t + 1) * cpt).map(|l| l as u16).collect(),
                prompt_template: None,
            })
            .collect(),
        split: Some(assignment),
    };
    Ok(SyntheticDataset { dataset: Dataset::new(manifest, records)?, class_means, text_means })
}
