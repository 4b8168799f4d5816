//! Episodic memory for experience replay.
//!
//! Three update policies share one per-class store:
//!
//! * **Reservoir**: Algorithm R run independently per class, so each class
//!   keeps a uniform sample of everything offered for it. A global variant
//!   (one reservoir across all classes) exists for ablations.
//! * **Ring**: per-class FIFO keeping the most recent items.
//! * **Mean of features**: one slot per class holding the running mean of
//!   every feature offered for that class.
//!
//! Stored items are fused features, so a memory is tied to the fusion mode
//! that produced them.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ByteReader, ByteWriter, CodecError};
use crate::embedding::{EmbeddingVector, FusionMode};
use crate::seed::EngineRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("{operation} requires the {expected} policy but the memory uses {actual}")]
    PolicyMismatch { operation: &'static str, expected: BufferPolicy, actual: BufferPolicy },
    #[error("feature dimension changed from {expected} to {found}")]
    FeatureDimChanged { expected: usize, found: usize },
    #[error("unknown buffer policy `{0}` (expected reservoir, ring or mof)")]
    UnknownPolicy(String),
    #[error("memory checkpoint: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferPolicy {
    Reservoir,
    Ring,
    #[serde(rename = "mof")]
    MeanOfFeatures,
}

impl BufferPolicy {
    pub const ALL: [BufferPolicy; 3] =
        [BufferPolicy::Reservoir, BufferPolicy::Ring, BufferPolicy::MeanOfFeatures];

    pub fn as_str(self) -> &'static str {
        match self {
            BufferPolicy::Reservoir => "reservoir",
            BufferPolicy::Ring => "ring",
            BufferPolicy::MeanOfFeatures => "mof",
        }
    }

    fn code(self) -> u8 {
        match self {
            BufferPolicy::Reservoir => 0,
            BufferPolicy::Ring => 1,
            BufferPolicy::MeanOfFeatures => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self, CodecError> {
        match c {
            0 => Ok(BufferPolicy::Reservoir),
            1 => Ok(BufferPolicy::Ring),
            2 => Ok(BufferPolicy::MeanOfFeatures),
            _ => Err(CodecError::Invalid(format!("unknown buffer policy code {c}"))),
        }
    }
}

impl fmt::Display for BufferPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BufferPolicy {
    type Err = ReplayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "reservoir" => Ok(BufferPolicy::Reservoir),
            "ring" => Ok(BufferPolicy::Ring),
            "mof" | "mean-of-features" | "meanoffeatures" => Ok(BufferPolicy::MeanOfFeatures),
            _ => Err(ReplayError::UnknownPolicy(s.to_string())),
        }
    }
}

/// Whether reservoir sampling is stratified by class or run over the whole
/// stream. Under `Global` the total budget is `per_class_capacity` times the
/// number of classes observed, and individual classes may exceed
/// `per_class_capacity`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReservoirScope {
    #[default]
    PerClass,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot {
    pub feature: EmbeddingVector,
    pub label_id: u16,
    pub source_task: u16,
    /// 1.0 for raw samples; the running count for mean-of-features slots.
    pub weight: f64,
}

impl MemorySlot {
    pub fn new(feature: EmbeddingVector, label_id: u16, source_task: u16) -> Self {
        Self { feature, label_id, source_task, weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMemory {
    policy: BufferPolicy,
    scope: ReservoirScope,
    per_class_capacity: usize,
    slots: BTreeMap<u16, VecDeque<MemorySlot>>,
    seen: BTreeMap<u16, u64>,
    /// Running means in f64 for the mean-of-features policy.
    means: BTreeMap<u16, Vec<f64>>,
    total_seen: u64,
    feature_dim: Option<usize>,
    fusion: Option<FusionMode>,
    rng: EngineRng,
    /// Slot-level operations performed so far (appends, replacements,
    /// evictions, random draws); used to check per-insert cost.
    ops: u64,
}

impl EpisodicMemory {
    pub fn new(policy: BufferPolicy, per_class_capacity: usize, seed: u64) -> Self {
        Self {
            policy,
            scope: ReservoirScope::PerClass,
            per_class_capacity,
            slots: BTreeMap::new(),
            seen: BTreeMap::new(),
            means: BTreeMap::new(),
            total_seen: 0,
            feature_dim: None,
            fusion: None,
            rng: EngineRng::seed_from_u64(seed),
            ops: 0,
        }
    }

    pub fn with_scope(mut self, scope: ReservoirScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    pub fn scope(&self) -> ReservoirScope {
        self.scope
    }

    pub fn per_class_capacity(&self) -> usize {
        self.per_class_capacity
    }

    pub fn operation_count(&self) -> u64 {
        self.ops
    }

    pub fn fusion(&self) -> Option<FusionMode> {
        self.fusion
    }

    /// Replaces the generator driving update decisions.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = EngineRng::seed_from_u64(seed);
    }

    /// Ties the memory to a fusion mode. Contents produced under a different
    /// mode are discarded; returns whether that happened.
    pub fn bind_fusion(&mut self, mode: FusionMode) -> bool {
        let invalidated = matches!(self.fusion, Some(m) if m != mode) && !self.is_empty();
        if self.fusion != Some(mode) {
            self.slots.clear();
            self.means.clear();
            self.seen.clear();
            self.total_seen = 0;
            self.feature_dim = None;
        }
        self.fusion = Some(mode);
        invalidated
    }

    pub fn len(&self) -> usize {
        self.slots.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_slots(&self, label_id: u16) -> impl Iterator<Item = &MemorySlot> {
        self.slots.get(&label_id).into_iter().flatten()
    }

    pub fn slots(&self) -> impl Iterator<Item = &MemorySlot> {
        self.slots.values().flatten()
    }

    /// Exact running mean for a class under mean-of-features.
    pub fn class_mean(&self, label_id: u16) -> Option<&[f64]> {
        self.means.get(&label_id).map(Vec::as_slice)
    }

    fn check_policy(&self, operation: &'static str, expected: BufferPolicy) -> Result<(), ReplayError> {
        if self.policy != expected {
            return Err(ReplayError::PolicyMismatch { operation, expected, actual: self.policy });
        }
        Ok(())
    }

    fn check_dim(&mut self, slot: &MemorySlot) -> Result<(), ReplayError> {
        match self.feature_dim {
            Some(d) if d != slot.feature.dim() => {
                Err(ReplayError::FeatureDimChanged { expected: d, found: slot.feature.dim() })
            }
            Some(_) => Ok(()),
            None => {
                self.feature_dim = Some(slot.feature.dim());
                Ok(())
            }
        }
    }

    /// Bumps the seen counters and returns the class's new count.
    fn observe(&mut self, label: u16) -> u64 {
        self.total_seen += 1;
        let n = self.seen.entry(label).or_insert(0);
        *n += 1;
        *n
    }

    /// Offers a sample under whatever policy the memory was built with.
    pub fn insert(&mut self, slot: MemorySlot) -> Result<(), ReplayError> {
        match self.policy {
            BufferPolicy::Reservoir => self.reservoir_update(slot),
            BufferPolicy::Ring => self.ring_update(slot),
            BufferPolicy::MeanOfFeatures => self.mof_update(slot),
        }
    }

    /// Algorithm R. With `n` samples of the class seen so far and capacity
    /// `M`, a full class replaces a uniformly chosen slot with probability
    /// `M / n` and otherwise discards the sample.
    pub fn reservoir_update(&mut self, slot: MemorySlot) -> Result<(), ReplayError> {
        self.check_policy("reservoir_update", BufferPolicy::Reservoir)?;
        self.check_dim(&slot)?;
        let label = slot.label_id;
        let n = self.observe(label);
        match self.scope {
            ReservoirScope::PerClass => {
                let cap = self.per_class_capacity;
                let class = self.slots.entry(label).or_default();
                if class.len() < cap {
                    class.push_back(slot);
                    self.ops += 1;
                } else {
                    let j = self.rng.random_range(0..n);
                    self.ops += 1;
                    if (j as usize) < cap {
                        class[j as usize] = slot;
                        self.ops += 1;
                    }
                }
            }
            ReservoirScope::Global => {
                let budget = self.per_class_capacity * self.seen.len();
                let stored = self.len();
                if stored < budget {
                    self.slots.entry(label).or_default().push_back(slot);
                    self.ops += 1;
                } else {
                    let j = self.rng.random_range(0..self.total_seen);
                    self.ops += 1;
                    if (j as usize) < stored {
                        self.remove_flat(j as usize);
                        self.slots.entry(label).or_default().push_back(slot);
                        self.ops += 2;
                    }
                }
            }
        }
        Ok(())
    }

    fn remove_flat(&mut self, mut index: usize) {
        let mut emptied = None;
        for (label, class) in self.slots.iter_mut() {
            if index < class.len() {
                class.remove(index);
                if class.is_empty() {
                    emptied = Some(*label);
                }
                break;
            }
            index -= class.len();
        }
        if let Some(label) = emptied {
            self.slots.remove(&label);
        }
    }

    /// Per-class FIFO: append, then evict the oldest slot of that class if
    /// it is over capacity.
    pub fn ring_update(&mut self, slot: MemorySlot) -> Result<(), ReplayError> {
        self.check_policy("ring_update", BufferPolicy::Ring)?;
        self.check_dim(&slot)?;
        let label = slot.label_id;
        self.observe(label);
        let cap = self.per_class_capacity;
        let class = self.slots.entry(label).or_default();
        class.push_back(slot);
        self.ops += 1;
        while class.len() > cap {
            class.pop_front();
            self.ops += 1;
        }
        Ok(())
    }

    /// Folds the sample into its class's running mean. The stored slot's
    /// `weight` is the number of samples averaged.
    pub fn mof_update(&mut self, slot: MemorySlot) -> Result<(), ReplayError> {
        self.check_policy("mof_update", BufferPolicy::MeanOfFeatures)?;
        self.check_dim(&slot)?;
        let label = slot.label_id;
        let n = self.observe(label);
        if self.per_class_capacity == 0 {
            return Ok(());
        }
        let mean = self.means.entry(label).or_insert_with(|| vec![0.0; slot.feature.dim()]);
        let inv = 1.0 / n as f64;
        for (m, &x) in mean.iter_mut().zip(slot.feature.as_slice()) {
            *m += (x as f64 - *m) * inv;
        }
        let feature = EmbeddingVector::new(mean.iter().map(|&m| m as f32).collect())
            .expect("mean of finite features is finite");
        let stored = MemorySlot { feature, label_id: label, source_task: slot.source_task, weight: n as f64 };
        let class = self.slots.entry(label).or_default();
        class.clear();
        class.push_back(stored);
        self.ops += 1;
        Ok(())
    }

    /// Draws `k` replay samples.
    ///
    /// Reservoir and ring memories return `min(k, len)` distinct slots drawn
    /// uniformly across all classes. Mean-of-features memories return `k`
    /// mean slots, visiting classes in a shuffled order and cycling when `k`
    /// exceeds the class count. An empty memory yields nothing and leaves
    /// `rng` untouched.
    pub fn sample_replay(&self, k: usize, rng: &mut impl Rng) -> Vec<MemorySlot> {
        let total = self.len();
        if k == 0 || total == 0 {
            return Vec::new();
        }
        let flat: Vec<&MemorySlot> = self.slots().collect();
        match self.policy {
            BufferPolicy::Reservoir | BufferPolicy::Ring => {
                let amount = k.min(total);
                rand::seq::index::sample(rng, total, amount)
                    .into_iter()
                    .map(|i| flat[i].clone())
                    .collect()
            }
            BufferPolicy::MeanOfFeatures => {
                let mut order: Vec<usize> = (0..total).collect();
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
                (0..k).map(|i| flat[order[i % total]].clone()).collect()
            }
        }
    }

    pub fn stats(&self) -> MemoryStats {
        let classes: Vec<ClassStats> = self
            .seen
            .iter()
            .map(|(&label_id, &seen)| ClassStats {
                label_id,
                stored: self.slots.get(&label_id).map_or(0, VecDeque::len),
                seen,
            })
            .collect();
        let per_class = match self.policy {
            BufferPolicy::MeanOfFeatures => self.per_class_capacity.min(1),
            _ => self.per_class_capacity,
        };
        let capacity = per_class * classes.len();
        let total_stored = self.len();
        MemoryStats {
            total_stored,
            total_seen: self.total_seen,
            capacity,
            utilization: if capacity == 0 { 0.0 } else { total_stored as f64 / capacity as f64 },
            classes,
        }
    }

    pub(crate) fn write_to(&self, w: &mut ByteWriter) {
        w.u8(self.policy.code());
        w.u8(match self.scope {
            ReservoirScope::PerClass => 0,
            ReservoirScope::Global => 1,
        });
        w.u64(self.per_class_capacity as u64);
        w.u8(match self.fusion {
            None => 0,
            Some(FusionMode::Add) => 1,
            Some(FusionMode::Mul) => 2,
            Some(FusionMode::Cat) => 3,
        });
        w.u32(self.feature_dim.unwrap_or(0) as u32);
        w.u64(self.total_seen);
        w.u64(self.ops);
        w.bytes(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.bytes(&self.rng.get_word_pos().to_le_bytes());

        w.u32(self.seen.len() as u32);
        for (&label, &n) in &self.seen {
            w.u16(label);
            w.u64(n);
        }
        w.u32(self.slots.len() as u32);
        for (&label, class) in &self.slots {
            w.u16(label);
            w.u32(class.len() as u32);
            for s in class {
                w.u16(s.label_id);
                w.u16(s.source_task);
                w.f64s(&[s.weight]);
                w.f32s(s.feature.as_slice());
            }
        }
        w.u32(self.means.len() as u32);
        for (&label, mean) in &self.means {
            w.u16(label);
            w.f64s(mean);
        }
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self, ReplayError> {
        let policy = BufferPolicy::from_code(r.u8()?)?;
        let scope = match r.u8()? {
            0 => ReservoirScope::PerClass,
            1 => ReservoirScope::Global,
            c => return Err(CodecError::Invalid(format!("unknown reservoir scope {c}")).into()),
        };
        let per_class_capacity = r.u64()? as usize;
        let fusion = match r.u8()? {
            0 => None,
            1 => Some(FusionMode::Add),
            2 => Some(FusionMode::Mul),
            3 => Some(FusionMode::Cat),
            c => return Err(CodecError::Invalid(format!("unknown fusion code {c}")).into()),
        };
        let dim = r.u32()? as usize;
        let feature_dim = (dim > 0).then_some(dim);
        let total_seen = r.u64()?;
        let ops = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = EngineRng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        let mut seen = BTreeMap::new();
        for _ in 0..r.u32()? {
            let label = r.u16()?;
            seen.insert(label, r.u64()?);
        }
        let mut slots = BTreeMap::new();
        for _ in 0..r.u32()? {
            let label = r.u16()?;
            let count = r.u32()? as usize;
            let mut class = VecDeque::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let label_id = r.u16()?;
                let source_task = r.u16()?;
                let weight = r.finite_f64s(1)?[0];
                let feature = EmbeddingVector::new(r.finite_f32s(dim)?)
                    .map_err(|e| CodecError::Invalid(format!("memory slot: {e}")))?;
                class.push_back(MemorySlot { feature, label_id, source_task, weight });
            }
            slots.insert(label, class);
        }
        let mut means = BTreeMap::new();
        for _ in 0..r.u32()? {
            let label = r.u16()?;
            means.insert(label, r.finite_f64s(dim)?);
        }
        Ok(Self {
            policy,
            scope,
            per_class_capacity,
            slots,
            seen,
            means,
            total_seen,
            feature_dim,
            fusion,
            rng,
            ops,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.write_to(&mut w);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReplayError> {
        let mut r = ByteReader::new(bytes);
        let m = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label_id: u16,
    pub stored: usize,
    pub seen: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub classes: Vec<ClassStats>,
    pub total_stored: usize,
    pub total_seen: u64,
    pub capacity: usize,
    pub utilization: f64,
}
