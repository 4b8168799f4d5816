use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, Split, SyntheticSpec};

const FLOODNET_EXPECTED: &str = include_str!("../../data/floodnet_expected.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub records: usize,
    /// Optional per-task breakdown keyed by task id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_task: BTreeMap<u16, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub name: String,
    pub train: SplitCounts,
    pub test: SplitCounts,
}

impl ExpectedCounts {
    /// The bundled FloodNet expectation (3620 train / 891 test).
    pub fn floodnet() -> Self {
        Self::from_toml(FLOODNET_EXPECTED).expect("bundled expectation parses")
    }

    pub fn from_toml(text: &str) -> Result<Self, DatasetError> {
        toml::from_str(text).map_err(|e| DatasetError::Manifest(e.to_string()))
    }

    pub fn from_synthetic(spec: &SyntheticSpec) -> Self {
        let per = |n: usize| SplitCounts {
            records: spec.tasks * spec.classes_per_task * n,
            per_task: (0..spec.tasks as u16).map(|t| (t, spec.classes_per_task * n)).collect(),
        };
        ExpectedCounts {
            name: format!("synthetic-{}", spec.seed),
            train: per(spec.train_per_class),
            test: per(spec.test_per_class),
        }
    }

    pub fn total(&self) -> usize {
        self.train.records + self.test.records
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CountScope {
    Train,
    Test,
    Unassigned,
}

/// One split whose counts disagree; `per_task` lists `(task, expected, found)`
/// for every task that differs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountMismatch {
    pub scope: CountScope,
    pub expected: usize,
    pub found: usize,
    pub per_task: Vec<(u16, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountReport {
    pub name: String,
    pub train: usize,
    pub test: usize,
    pub unassigned: usize,
    pub mismatches: Vec<CountMismatch>,
}

impl CountReport {
    pub fn is_ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for CountReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: train {} test {} total {}",
            self.name,
            self.train,
            self.test,
            self.train + self.test + self.unassigned
        )?;
        for m in &self.mismatches {
            write!(f, "  mismatch {:?}: expected {}, found {}", m.scope, m.expected, m.found)?;
            for (task, e, found) in &m.per_task {
                write!(f, "; task {task} expected {e} found {found}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Compares split sizes against `expected`. Records are assigned to splits
/// through the manifest; records it does not mention count as unassigned.
pub fn validate_counts(dataset: &Dataset, expected: &ExpectedCounts) -> CountReport {
    let lookup = dataset.manifest.split.as_ref().map(|s| s.lookup()).unwrap_or_default();
    let mut found: BTreeMap<Split, BTreeMap<u16, usize>> = BTreeMap::new();
    let mut unassigned = 0;
    for r in &dataset.records {
        match lookup.get(&r.record_id) {
            Some(&s) => *found.entry(s).or_default().entry(r.task_id).or_default() += 1,
            None => unassigned += 1,
        }
    }
    let total = |s: Split| found.get(&s).map_or(0, |m| m.values().sum());

    let mut mismatches = Vec::new();
    for (split, scope, exp) in [
        (Split::Train, CountScope::Train, &expected.train),
        (Split::Test, CountScope::Test, &expected.test),
    ] {
        let got = found.get(&split).cloned().unwrap_or_default();
        let per_task: Vec<(u16, usize, usize)> = exp
            .per_task
            .iter()
            .map(|(&t, &e)| (t, e, got.get(&t).copied().unwrap_or(0)))
            .chain(
                got.iter()
                    .filter(|(t, _)| !exp.per_task.is_empty() && !exp.per_task.contains_key(t))
                    .map(|(&t, &n)| (t, 0, n)),
            )
            .filter(|(_, e, n)| e != n)
            .collect();
        let n = total(split);
        if n != exp.records || !per_task.is_empty() {
            mismatches.push(CountMismatch { scope, expected: exp.records, found: n, per_task });
        }
    }
    if unassigned > 0 {
        mismatches.push(CountMismatch {
            scope: CountScope::Unassigned,
            expected: 0,
            found: unassigned,
            per_task: Vec::new(),
        });
    }
    CountReport {
        name: expected.name.clone(),
        train: total(Split::Train),
        test: total(Split::Test),
        unassigned,
        mismatches,
    }
}
