use super::{Curriculum, CurriculumError};
use crate::datasets::SplitDataset;
use crate::embedding::{zero_shot_predict, PromptSet};
use crate::evalreport::{RunReport, TaskResult};

pub const ZERO_SHOT_METHOD: &str = "CLIP-ZS";

/// Zero-shot accuracy on the test split: each image is matched against its
/// task's prompt embeddings, no training involved.
pub fn evaluate_zero_shot(
    data: &SplitDataset,
    prompts: &[PromptSet],
    temperature: f64,
    order: Option<&[u16]>,
) -> Result<RunReport, CurriculumError> {
    let curriculum = Curriculum::from_manifest(&data.manifest, order)?;
    let image_dim = data.manifest.dims.image;
    let mut tasks = Vec::new();
    for t in data.manifest.tasks.iter().filter(|t| curriculum.order().contains(&t.id)) {
        let set = prompts
            .iter()
            .find(|p| p.task_id() == t.id)
            .ok_or(CurriculumError::MissingPrompts(t.id))?;
        if let Some(dim) = set.dim().filter(|&d| d != image_dim) {
            return Err(CurriculumError::PromptWidth { prompt: dim, image: image_dim });
        }
        let mut correct = 0usize;
        let mut total = 0usize;
        for r in data.test.iter().filter(|r| r.task_id == t.id) {
            total += 1;
            if zero_shot_predict(&r.image, set, temperature)?.label_id == r.label_id {
                correct += 1;
            }
        }
        if total == 0 {
            return Err(CurriculumError::EmptyEvaluation(format!("task {}", t.id)));
        }
        tasks.push(TaskResult {
            task_id: t.id,
            name: t.name.clone(),
            test_count: total,
            accuracy: 100.0 * correct as f64 / total as f64,
        });
    }
    Ok(RunReport::assemble(ZERO_SHOT_METHOD, "zero-shot", 0, None, curriculum.order(), tasks, None)?)
}
