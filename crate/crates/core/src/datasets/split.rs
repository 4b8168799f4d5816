use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{DatasetError, EmbeddingRecord, SplitAssignment};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub train: Vec<EmbeddingRecord>,
    pub test: Vec<EmbeddingRecord>,
    pub warnings: Vec<String>,
}

/// Splits records into train and test sets.
///
/// A pre-assigned split is used verbatim. Otherwise the split is stratified
/// by `(task, label)`: each class contributes `floor(n * fraction)` test
/// records and the remaining test quota (so that the total is
/// `round(N * fraction)`) goes to the classes with the largest fractional
/// remainders. Classes with fewer than two records stay in train. Output
/// preserves input order within each side.
pub fn split(
    records: &[EmbeddingRecord],
    assignment: Option<&SplitAssignment>,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitOutcome, DatasetError> {
    if let Some(assignment) = assignment {
        return apply_assignment(records, assignment);
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::BadFraction(test_fraction));
    }

    let mut classes: BTreeMap<(u16, u16), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        classes.entry((r.task_id, r.label_id)).or_default().push(i);
    }

    let mut warnings = Vec::new();
    let mut quota: BTreeMap<(u16, u16), usize> = BTreeMap::new();
    let mut remainders = Vec::new();
    let mut eligible = 0usize;
    for (&key, idx) in &classes {
        let n = idx.len();
        if n < 2 {
            warnings.push(format!(
                "task {} label {} has {n} record(s); kept in train",
                key.0, key.1
            ));
            quota.insert(key, 0);
            continue;
        }
        eligible += n;
        let exact = n as f64 * test_fraction;
        // Every class keeps at least one training record.
        let base = (exact.floor() as usize).min(n - 1);
        quota.insert(key, base);
        if base < n - 1 {
            remainders.push((exact - base as f64, key));
        }
    }
    let target = (eligible as f64 * test_fraction).round() as usize;
    let assigned: usize = quota.values().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, key) in remainders.into_iter().take(target.saturating_sub(assigned)) {
        *quota.get_mut(&key).expect("class present") += 1;
    }

    let mut is_test = vec![false; records.len()];
    for (i, (key, idx)) in classes.iter().enumerate() {
        let mut rng = seed::rng(seed, Stream::Split, i as u64);
        let mut shuffled = idx.clone();
        shuffled.shuffle(&mut rng);
        for &j in &shuffled[..quota[key]] {
            is_test[j] = true;
        }
    }

    let (test, train): (Vec<_>, Vec<_>) =
        records.iter().cloned().zip(is_test).partition(|(_, t)| *t);
    Ok(SplitOutcome {
        train: train.into_iter().map(|(r, _)| r).collect(),
        test: test.into_iter().map(|(r, _)| r).collect(),
        warnings,
    })
}

fn apply_assignment(
    records: &[EmbeddingRecord],
    assignment: &SplitAssignment,
) -> Result<SplitOutcome, DatasetError> {
    let lookup = assignment.lookup();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        match lookup.get(&r.record_id) {
            Some(Split::Train) => train.push(r.clone()),
            Some(Split::Test) => test.push(r.clone()),
            None => return Err(DatasetError::Unassigned(r.record_id)),
        }
    }
    Ok(SplitOutcome { train, test, warnings: Vec::new() })
}
