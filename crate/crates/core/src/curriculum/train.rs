use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;

use super::{Curriculum, CurriculumError, PhaseTrace, RunConfig, TrainConfig, TrainMode};
use crate::datasets::{EmbeddingRecord, Manifest, SplitDataset};
use crate::embedding::{fuse_into, EmbeddingError, EmbeddingVector, FusionMode};
use crate::evalreport::{AccuracyMatrix, RunReport, TaskResult};
use crate::nn::{
    adam_step, backward, forward, init_model, predict, softmax_cross_entropy, AdamConfig,
    AdamState, MlpModel, WeightDecayMode,
};
use crate::replay::{EpisodicMemory, MemorySlot};
use crate::seed::{self, Stream};

const EVAL_CHUNK: usize = 1024;

/// Fused inputs for a set of records, one row per record.
#[derive(Debug, Clone)]
pub(crate) struct FusedSet {
    pub features: Array2<f32>,
    pub labels: Vec<u16>,
    pub tasks: Vec<u16>,
}

impl FusedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn build<'a>(
        records: impl IntoIterator<Item = &'a EmbeddingRecord>,
        fusion: FusionMode,
        dims: (usize, usize),
    ) -> Result<Self, CurriculumError> {
        let width = input_dim(fusion, dims)?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut tasks = Vec::new();
        for r in records {
            let start = data.len();
            data.resize(start + width, 0.0f32);
            fuse_into(r.image.as_slice(), r.text.as_slice(), fusion, &mut data[start..]);
            if let Some((index, &value)) = data[start..].iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { index, value }.into());
            }
            labels.push(r.label_id);
            tasks.push(r.task_id);
        }
        let features = Array2::from_shape_vec((labels.len(), width), data)
            .expect("row-major buffer matches shape");
        Ok(FusedSet { features, labels, tasks })
    }

    fn row(&self, i: usize) -> &[f32] {
        self.features.row(i).to_slice().expect("standard layout")
    }
}

pub(crate) fn input_dim(fusion: FusionMode, (image, text): (usize, usize)) -> Result<usize, CurriculumError> {
    fusion.output_dim(image, text).ok_or(CurriculumError::FusionWidths { fusion, image, text })
}

fn dims(manifest: &Manifest) -> (usize, usize) {
    (manifest.dims.image, manifest.dims.text)
}

fn fused_for_task(
    records: &[EmbeddingRecord],
    task_id: u16,
    fusion: FusionMode,
    manifest: &Manifest,
) -> Result<FusedSet, CurriculumError> {
    FusedSet::build(records.iter().filter(|r| r.task_id == task_id), fusion, dims(manifest))
}

fn accuracy(model: &MlpModel<f32>, set: &FusedSet) -> Result<f64, CurriculumError> {
    let mut correct = 0usize;
    for start in (0..set.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(set.len());
        let batch = set.features.slice(ndarray::s![start..end, ..]).to_owned();
        let pred = predict(model, &batch)?;
        correct += pred.iter().zip(&set.labels[start..end]).filter(|(p, l)| p == l).count();
    }
    Ok(100.0 * correct as f64 / set.len() as f64)
}

/// Percentage of test records (optionally restricted to one task) whose
/// argmax prediction equals the label.
pub fn evaluate(
    model: &MlpModel<f32>,
    test: &[EmbeddingRecord],
    fusion: FusionMode,
    task_filter: Option<u16>,
) -> Result<f64, CurriculumError> {
    let first = test.first().ok_or_else(|| CurriculumError::EmptyEvaluation("the test split".into()))?;
    let dims = (first.image.dim(), first.text.dim());
    let set = FusedSet::build(
        test.iter().filter(|r| task_filter.is_none_or(|t| r.task_id == t)),
        fusion,
        dims,
    )?;
    if set.len() == 0 {
        return Err(CurriculumError::EmptyEvaluation(match task_filter {
            Some(t) => format!("task {t}"),
            None => "the test split".into(),
        }));
    }
    accuracy(model, &set)
}

/// Memory access for one training phase.
struct PhaseMemory<'m> {
    memory: &'m mut EpisodicMemory,
    /// Items appended to every step; zero disables sampling.
    replay_batch: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_phase(
    model: &mut MlpModel<f32>,
    data: &FusedSet,
    cfg: &TrainConfig,
    decay_mode: WeightDecayMode,
    master: u64,
    position: usize,
    task_id: u16,
    mut memory: Option<PhaseMemory<'_>>,
) -> Result<PhaseTrace, CurriculumError> {
    if data.len() == 0 {
        return Err(CurriculumError::EmptyTraining(format!("task {task_id}")));
    }
    let mut adam = AdamState::new(model, AdamConfig::default());
    let mut train_rng = seed::rng(master, Stream::Train, position as u64);
    let mut replay_rng = seed::rng(master, Stream::Replay, position as u64);
    if let Some(m) = memory.as_mut() {
        m.memory.reseed(seed::derive(master, Stream::Memory, position as u64));
    }

    let width = data.features.ncols();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = PhaseTrace {
        position,
        task_id,
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        epochs: cfg.epochs,
        steps: 0,
        records_seen: 0,
        tasks_touched: Vec::new(),
        replayed: 0,
        replay_sources: Vec::new(),
        inserted: 0,
        final_epoch_loss: 0.0,
    };
    let mut touched = BTreeSet::new();
    let mut sources = BTreeSet::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut train_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let replayed = match memory.as_ref() {
                Some(m) if m.replay_batch > 0 && position > 0 => {
                    m.memory.sample_replay(m.replay_batch, &mut replay_rng)
                }
                _ => Vec::new(),
            };
            let rows = chunk.len() + replayed.len();
            let mut buf = Vec::with_capacity(rows * width);
            let mut labels = Vec::with_capacity(rows);
            for &i in chunk {
                buf.extend_from_slice(data.row(i));
                labels.push(data.labels[i]);
                touched.insert(data.tasks[i]);
            }
            for slot in &replayed {
                buf.extend_from_slice(slot.feature.as_slice());
                labels.push(slot.label_id);
                sources.insert(slot.source_task);
            }
            let batch = Array2::from_shape_vec((rows, width), buf).expect("batch shape");

            let (logits, cache) = forward(model, &batch, cfg.dropout_rate, true, &mut train_rng)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(CurriculumError::NonFiniteLoss { task_id, epoch, step: trace.steps });
            }
            let grads = backward(model, &cache, &dlogits)?;
            adam_step(model, &mut adam, &grads, cfg.learning_rate, cfg.weight_decay, decay_mode)?;

            trace.steps += 1;
            trace.records_seen += chunk.len() as u64;
            trace.replayed += replayed.len() as u64;
            epoch_loss += loss * rows as f64;
            epoch_rows += rows;

            if epoch == 0 {
                if let Some(m) = memory.as_mut() {
                    for &i in chunk {
                        let feature = EmbeddingVector::new(data.row(i).to_vec())?;
                        m.memory.insert(MemorySlot::new(feature, data.labels[i], task_id))?;
                        trace.inserted += 1;
                    }
                }
            }
        }
        trace.final_epoch_loss = epoch_loss / epoch_rows as f64;
    }
    trace.tasks_touched = touched.into_iter().collect();
    trace.replay_sources = sources.into_iter().collect();
    Ok(trace)
}

fn new_model(config: &RunConfig, manifest: &Manifest, index: u64) -> Result<MlpModel<f32>, CurriculumError> {
    Ok(init_model(
        input_dim(config.fusion, dims(manifest))?,
        config.hidden_dim,
        config.num_hidden_layers,
        manifest.num_labels(),
        seed::derive(config.seed, Stream::Init, index),
    )?)
}

fn expect_mode(config: &RunConfig, ok: bool, expected: &'static str) -> Result<(), CurriculumError> {
    if ok { Ok(()) } else { Err(CurriculumError::WrongMode { expected, found: config.mode }) }
}

/// Per-task test accuracy, listed in manifest order.
fn task_results(
    data: &SplitDataset,
    curriculum: &Curriculum,
    mut accuracy_of: impl FnMut(usize, &FusedSet) -> Result<f64, CurriculumError>,
    fusion: FusionMode,
) -> Result<Vec<TaskResult>, CurriculumError> {
    let in_curriculum: BTreeSet<u16> = curriculum.order().into_iter().collect();
    let mut out = Vec::new();
    for t in data.manifest.tasks.iter().filter(|t| in_curriculum.contains(&t.id)) {
        let set = fused_for_task(&data.test, t.id, fusion, &data.manifest)?;
        if set.len() == 0 {
            return Err(CurriculumError::EmptyEvaluation(format!("task {}", t.id)));
        }
        let position = curriculum.order().iter().position(|&id| id == t.id).expect("in curriculum");
        out.push(TaskResult {
            task_id: t.id,
            name: t.name.clone(),
            test_count: set.len(),
            accuracy: accuracy_of(position, &set)?,
        });
    }
    Ok(out)
}

fn degenerate_note(train: &FusedSet) -> Option<String> {
    let labels: BTreeSet<u16> = train.labels.iter().copied().collect();
    (labels.len() == 1).then(|| "degenerate: training data holds a single class".to_string())
}

/// One model trained on every curriculum task's training records at once.
pub fn train_supervised(
    data: &SplitDataset,
    config: &RunConfig,
) -> Result<(MlpModel<f32>, RunReport), CurriculumError> {
    expect_mode(config, config.mode == TrainMode::Joint, "joint")?;
    config.validate()?;
    let curriculum = Curriculum::from_manifest(&data.manifest, config.order.as_deref())?;
    let ids: BTreeSet<u16> = curriculum.order().into_iter().collect();
    let train = FusedSet::build(
        data.train.iter().filter(|r| ids.contains(&r.task_id)),
        config.fusion,
        dims(&data.manifest),
    )?;
    if train.len() == 0 {
        return Err(CurriculumError::EmptyTraining("the curriculum".into()));
    }
    let mut model = new_model(config, &data.manifest, 0)?;
    let trace = train_phase(
        &mut model,
        &train,
        &config.first_task,
        config.weight_decay_mode,
        config.seed,
        0,
        curriculum.tasks()[0].task_id,
        None,
    )?;
    let tasks = task_results(data, &curriculum, |_, set| accuracy(&model, set), config.fusion)?;
    let mut report = RunReport::assemble(
        config.method_label(),
        config.mode.as_str(),
        config.seed,
        Some(config.clone()),
        curriculum.order(),
        tasks,
        None,
    )?;
    report.traces.push(trace);
    report.notes.extend(degenerate_note(&train));
    Ok((model, report))
}

/// An independent model per task, trained and tested on that task alone.
pub fn train_taskwise(
    data: &SplitDataset,
    config: &RunConfig,
) -> Result<(Vec<MlpModel<f32>>, RunReport), CurriculumError> {
    expect_mode(config, config.mode == TrainMode::Taskwise, "taskwise")?;
    config.validate()?;
    let curriculum = Curriculum::from_manifest(&data.manifest, config.order.as_deref())?;
    let mut models = Vec::new();
    let mut traces = Vec::new();
    let mut notes = Vec::new();
    for (k, task) in curriculum.tasks().iter().enumerate() {
        let train = fused_for_task(&data.train, task.task_id, config.fusion, &data.manifest)?;
        let mut model = new_model(config, &data.manifest, k as u64)?;
        traces.push(train_phase(
            &mut model,
            &train,
            &config.first_task,
            config.weight_decay_mode,
            config.seed,
            k,
            task.task_id,
            None,
        )?);
        if let Some(n) = degenerate_note(&train) {
            notes.push(format!("task {}: {n}", task.task_id));
        }
        models.push(model);
    }
    let tasks = task_results(data, &curriculum, |k, set| accuracy(&models[k], set), config.fusion)?;
    let mut report = RunReport::assemble(
        config.method_label(),
        config.mode.as_str(),
        config.seed,
        Some(config.clone()),
        curriculum.order(),
        tasks,
        None,
    )?;
    report.traces = traces;
    report.notes = notes;
    Ok((models, report))
}

/// Everything a continual run carries across task boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    /// Curriculum position of the next task to train.
    pub next_position: usize,
    pub model: MlpModel<f32>,
    pub memory: EpisodicMemory,
    /// Rows filled so far; one per completed task.
    pub matrix: AccuracyMatrix,
    pub traces: Vec<PhaseTrace>,
}

/// Drives a continual run one task at a time so it can be checkpointed and
/// resumed at task boundaries.
pub struct ContinualRunner<'a> {
    data: &'a SplitDataset,
    config: RunConfig,
    curriculum: Curriculum,
    train_sets: Vec<FusedSet>,
    test_sets: Vec<FusedSet>,
    state: StreamState,
}

impl<'a> ContinualRunner<'a> {
    pub fn new(data: &'a SplitDataset, config: &RunConfig) -> Result<Self, CurriculumError> {
        expect_mode(config, config.mode.is_continual(), "continual or continual-noreplay")?;
        config.validate()?;
        let curriculum = Curriculum::from_manifest(&data.manifest, config.order.as_deref())?;
        let mut memory = EpisodicMemory::new(
            config.policy,
            config.per_class_capacity,
            seed::derive(config.seed, Stream::Memory, 0),
        )
        .with_scope(config.reservoir_scope);
        memory.bind_fusion(config.fusion);
        let state = StreamState {
            next_position: 0,
            model: new_model(config, &data.manifest, 0)?,
            memory,
            matrix: AccuracyMatrix::new(curriculum.order()),
            traces: Vec::new(),
        };
        Self::with_state(data, config.clone(), curriculum, state)
    }

    fn with_state(
        data: &'a SplitDataset,
        config: RunConfig,
        curriculum: Curriculum,
        state: StreamState,
    ) -> Result<Self, CurriculumError> {
        let mut train_sets = Vec::new();
        let mut test_sets = Vec::new();
        for t in curriculum.tasks() {
            let train = fused_for_task(&data.train, t.task_id, config.fusion, &data.manifest)?;
            if train.len() == 0 {
                return Err(CurriculumError::EmptyTraining(format!("task {}", t.task_id)));
            }
            let test = fused_for_task(&data.test, t.task_id, config.fusion, &data.manifest)?;
            if test.len() == 0 {
                return Err(CurriculumError::EmptyEvaluation(format!("task {}", t.task_id)));
            }
            train_sets.push(train);
            test_sets.push(test);
        }
        Ok(ContinualRunner { data, config, curriculum, train_sets, test_sets, state })
    }

    /// Continues a run from a checkpoint taken at a task boundary.
    pub fn resume(
        data: &'a SplitDataset,
        checkpoint: super::RunCheckpoint,
    ) -> Result<Self, CurriculumError> {
        let super::RunCheckpoint { config, state } = checkpoint;
        expect_mode(&config, config.mode.is_continual(), "continual or continual-noreplay")?;
        let curriculum = Curriculum::from_manifest(&data.manifest, config.order.as_deref())?;
        if state.matrix.task_ids != curriculum.order() {
            return Err(CurriculumError::CheckpointMismatch("task order differs".into()));
        }
        if state.next_position > curriculum.len()
            || state.matrix.rows.len() != state.next_position
            || state.traces.len() != state.next_position
        {
            return Err(CurriculumError::CheckpointMismatch("stream position is inconsistent".into()));
        }
        let expected_in = input_dim(config.fusion, dims(&data.manifest))?;
        if state.model.input_dim() != expected_in || state.model.output_dim() != data.manifest.num_labels() {
            return Err(CurriculumError::CheckpointMismatch("model shape does not fit the dataset".into()));
        }
        Self::with_state(data, config, curriculum, state)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn curriculum(&self) -> &Curriculum {
        &self.curriculum
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.next_position == self.curriculum.len()
    }

    pub fn checkpoint(&self) -> super::RunCheckpoint {
        super::RunCheckpoint { config: self.config.clone(), state: self.state.clone() }
    }

    /// Trains the next task and appends its accuracy-matrix row. Returns
    /// false once the curriculum is exhausted.
    pub fn step(&mut self) -> Result<bool, CurriculumError> {
        if self.is_finished() {
            return Ok(false);
        }
        let p = self.state.next_position;
        let task_id = self.curriculum.tasks()[p].task_id;
        let memory = match self.config.mode {
            TrainMode::Continual => Some(PhaseMemory {
                memory: &mut self.state.memory,
                replay_batch: self.config.replay_batch,
            }),
            _ => None,
        };
        let trace = train_phase(
            &mut self.state.model,
            &self.train_sets[p],
            self.config.train_config(p),
            self.config.weight_decay_mode,
            self.config.seed,
            p,
            task_id,
            memory,
        )?;
        let row = self
            .test_sets
            .iter()
            .map(|set| accuracy(&self.state.model, set))
            .collect::<Result<Vec<_>, _>>()?;
        self.state.matrix.push_row(row)?;
        self.state.traces.push(trace);
        self.state.next_position += 1;
        log::info!("finished task {task_id} ({}/{})", p + 1, self.curriculum.len());
        Ok(true)
    }

    pub fn run(mut self) -> Result<(MlpModel<f32>, RunReport), CurriculumError> {
        while self.step()? {}
        self.finish()
    }

    /// Builds the report; the curriculum must be complete.
    pub fn finish(self) -> Result<(MlpModel<f32>, RunReport), CurriculumError> {
        let last = self.state.matrix.final_row()?.to_vec();
        let tasks = task_results(self.data, &self.curriculum, |p, _| Ok(last[p]), self.config.fusion)?;
        let mut report = RunReport::assemble(
            self.config.method_label(),
            self.config.mode.as_str(),
            self.config.seed,
            Some(self.config.clone()),
            self.curriculum.order(),
            tasks,
            Some(self.state.matrix.clone()),
        )?;
        report.traces = self.state.traces;
        Ok((self.state.model, report))
    }
}

/// Tasks in curriculum order, each trained once, with replay in
/// `Continual` mode.
pub fn train_continual(
    data: &SplitDataset,
    config: &RunConfig,
) -> Result<(MlpModel<f32>, RunReport), CurriculumError> {
    ContinualRunner::new(data, config)?.run()
}

/// Dispatches on `config.mode`.
pub fn train(
    data: &SplitDataset,
    config: &RunConfig,
) -> Result<(Vec<MlpModel<f32>>, RunReport), CurriculumError> {
    match config.mode {
        TrainMode::Joint => train_supervised(data, config).map(|(m, r)| (vec![m], r)),
        TrainMode::Taskwise => train_taskwise(data, config),
        TrainMode::Continual | TrainMode::ContinualNoReplay => {
            train_continual(data, config).map(|(m, r)| (vec![m], r))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_synthetic, SyntheticSpec};
    use crate::replay::BufferPolicy;

    fn small_data(seed: u64) -> SplitDataset {
        let spec = SyntheticSpec {
            tasks: 3,
            classes_per_task: 2,
            dim_img: 8,
            dim_txt: 8,
            cluster_separation: 6.0,
            train_per_class: 40,
            test_per_class: 20,
            seed,
        };
        gen_synthetic(&spec).unwrap().dataset.split(0.2, 0).unwrap()
    }

    fn small_config(mode: TrainMode) -> RunConfig {
        let fast = TrainConfig { learning_rate: 1e-3, weight_decay: 1e-5, dropout_rate: 0.1, batch_size: 32, epochs: 4 };
        RunConfig {
            mode,
            hidden_dim: 16,
            num_hidden_layers: 2,
            first_task: fast,
            later_tasks: TrainConfig { learning_rate: 5e-4, ..fast },
            per_class_capacity: 5,
            replay_batch: 8,
            seed: 11,
            ..RunConfig::default()
        }
    }

    #[test]
    fn evaluate_matches_counting_oracle() {
        let data = small_data(1);
        let cfg = small_config(TrainMode::Joint);
        let (model, _) = train_supervised(&data, &cfg).unwrap();
        for filter in [None, Some(0), Some(2)] {
            let mut correct = 0;
            let mut total = 0;
            for r in data.test.iter().filter(|r| filter.is_none_or(|t| r.task_id == t)) {
                let x = crate::embedding::fuse(&r.image, &r.text, cfg.fusion).unwrap();
                let batch = Array2::from_shape_vec((1, x.dim()), x.into_inner()).unwrap();
                total += 1;
                if predict(&model, &batch).unwrap()[0] == r.label_id {
                    correct += 1;
                }
            }
            let got = evaluate(&model, &data.test, cfg.fusion, filter).unwrap();
            assert_eq!(got, 100.0 * correct as f64 / total as f64);
        }
        assert!(matches!(
            evaluate(&model, &data.test, cfg.fusion, Some(9)),
            Err(CurriculumError::EmptyEvaluation(_))
        ));
    }

    #[test]
    fn evaluate_trivial_models() {
        use crate::nn::LayerParams;
        let data = small_data(2);
        let two: Vec<EmbeddingRecord> = data.test.iter().filter(|r| r.task_id == 0).cloned().collect();
        // Constant prediction of label 0 on the balanced two-class task.
        let mut out = LayerParams::<f32>::zeros(6, 8);
        out.biases[0] = 1.0;
        let constant = MlpModel::from_layers(vec![out]).unwrap();
        assert_eq!(evaluate(&constant, &two, FusionMode::Mul, None).unwrap(), 50.0);

        // A linear probe that reads the label out of a leaked coordinate.
        let leaked: Vec<EmbeddingRecord> = two
            .iter()
            .map(|r| {
                let mut img = vec![0.0f32; 8];
                img[r.label_id as usize] = 1.0;
                EmbeddingRecord { image: EmbeddingVector::new(img).unwrap(), ..r.clone() }
            })
            .collect();
        let mut probe = LayerParams::<f32>::zeros(6, 16);
        for l in 0..6 {
            probe.weights[[l, l]] = 1.0;
        }
        let oracle = MlpModel::from_layers(vec![probe]).unwrap();
        assert_eq!(evaluate(&oracle, &leaked, FusionMode::Cat, None).unwrap(), 100.0);
    }

    #[test]
    fn modes_reject_the_wrong_config() {
        let data = small_data(3);
        assert!(matches!(
            train_supervised(&data, &small_config(TrainMode::Taskwise)),
            Err(CurriculumError::WrongMode { .. })
        ));
        assert!(matches!(
            train_continual(&data, &small_config(TrainMode::Joint)),
            Err(CurriculumError::WrongMode { .. })
        ));
        let mut cfg = small_config(TrainMode::Continual);
        cfg.order = Some(vec![1, 1, 2]);
        assert!(matches!(train_continual(&data, &cfg), Err(CurriculumError::RepeatedTask(1))));
    }

    #[test]
    fn single_task_modes_coincide() {
        let data = small_data(4);
        let mut joint = small_config(TrainMode::Joint);
        joint.order = Some(vec![1]);
        let (m_joint, r_joint) = train_supervised(&data, &joint).unwrap();
        let (m_task, r_task) = train_taskwise(&data, &RunConfig { mode: TrainMode::Taskwise, ..joint.clone() }).unwrap();
        let (m_cont, r_cont) = train_continual(&data, &RunConfig { mode: TrainMode::Continual, ..joint.clone() }).unwrap();
        assert_eq!(m_joint, m_task[0]);
        assert_eq!(m_joint, m_cont);
        assert_eq!(r_joint.tasks, r_task.tasks);
        assert_eq!(r_joint.tasks, r_cont.tasks);
    }

    #[test]
    fn zero_capacity_replay_equals_no_replay() {
        let data = small_data(5);
        let mut on = small_config(TrainMode::Continual);
        on.per_class_capacity = 0;
        let off = RunConfig { mode: TrainMode::ContinualNoReplay, ..on.clone() };
        let (m_on, r_on) = train_continual(&data, &on).unwrap();
        let (m_off, r_off) = train_continual(&data, &off).unwrap();
        assert_eq!(m_on, m_off);
        assert_eq!(r_on.matrix, r_off.matrix);
    }

    #[test]
    fn stream_discipline_and_hyperparameter_trace() {
        let data = small_data(6);
        let mut cfg = small_config(TrainMode::Continual);
        cfg.order = Some(vec![2, 0, 1]);
        let (_, report) = train_continual(&data, &cfg).unwrap();
        let m = report.matrix.as_ref().unwrap();
        assert_eq!(m.rows.len(), 3);
        assert!(m.rows.iter().all(|r| r.len() == 3));
        for (p, trace) in report.traces.iter().enumerate() {
            let task = cfg.order.as_ref().unwrap()[p];
            assert_eq!(trace.task_id, task);
            assert_eq!(trace.tasks_touched, vec![task]);
            assert_eq!(trace.learning_rate, cfg.train_config(p).learning_rate);
            assert_eq!(trace.weight_decay, cfg.train_config(p).weight_decay);
            let n = data.train.iter().filter(|r| r.task_id == task).count() as u64;
            assert_eq!(trace.records_seen, n * cfg.train_config(p).epochs as u64);
            // Each current sample offered to memory exactly once.
            assert_eq!(trace.inserted, n);
            if p == 0 {
                assert_eq!(trace.replayed, 0);
            } else {
                assert_eq!(trace.replayed, trace.steps * cfg.replay_batch as u64);
                // Memory also holds current-task items once they are offered.
                let seen: Vec<u16> = cfg.order.as_ref().unwrap()[..=p].to_vec();
                assert!(trace.replay_sources.iter().all(|s| seen.contains(s)));
                assert!(trace.replay_sources.iter().any(|&s| s != task));
            }
        }
        report.verify().unwrap();
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = small_data(7);
        let cfg = RunConfig { policy: BufferPolicy::Ring, ..small_config(TrainMode::Continual) };
        let (m_full, r_full) = train_continual(&data, &cfg).unwrap();

        let mut runner = ContinualRunner::new(&data, &cfg).unwrap();
        runner.step().unwrap();
        let bytes = runner.checkpoint().to_bytes().unwrap();
        drop(runner);
        let ckpt = super::super::RunCheckpoint::from_bytes(&bytes).unwrap();
        let (m_res, r_res) = ContinualRunner::resume(&data, ckpt).unwrap().run().unwrap();
        assert_eq!(m_full, m_res);
        assert_eq!(r_full, r_res);
    }

    #[test]
    fn deterministic_under_seed() {
        let data = small_data(8);
        let cfg = small_config(TrainMode::Continual);
        let a = train_continual(&data, &cfg).unwrap();
        let b = train_continual(&data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_json().unwrap(), b.1.to_json().unwrap());
        let c = train_continual(&data, &RunConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn nan_inputs_abort_with_numeric_error() {
        let data = small_data(9);
        let mut cfg = small_config(TrainMode::Joint);
        cfg.first_task.learning_rate = 1e30;
        cfg.first_task.epochs = 50;
        let err = train_supervised(&data, &cfg).unwrap_err();
        assert!(err.is_numeric(), "{err}");
    }

    #[test]
    fn one_class_dataset_is_flagged() {
        let spec = SyntheticSpec { tasks: 1, classes_per_task: 1, dim_img: 4, dim_txt: 4, ..Default::default() };
        let data = gen_synthetic(&spec).unwrap().dataset.split(0.2, 0).unwrap();
        let cfg = small_config(TrainMode::Joint);
        let (_, report) = train_supervised(&data, &cfg).unwrap();
        assert_eq!(report.overall_accuracy, 100.0);
        assert!(report.notes.iter().any(|n| n.contains("degenerate")));
    }
}
