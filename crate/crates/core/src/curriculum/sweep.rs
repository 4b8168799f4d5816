use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_continual, Curriculum, CurriculumError, RunConfig, TrainMode};
use crate::datasets::SplitDataset;
use crate::evalreport::RunReport;
use crate::replay::BufferPolicy;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOptions {
    /// Permit task counts other than three.
    pub allow_n: bool,
    pub parallel: bool,
    pub policies: Vec<BufferPolicy>,
    /// Explicit orders; `None` means every permutation.
    pub orders: Option<Vec<Vec<u16>>>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { allow_n: false, parallel: false, policies: BufferPolicy::ALL.to_vec(), orders: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_index: usize,
    pub order: Vec<u16>,
    pub policy: BufferPolicy,
    pub seed: u64,
    pub final_average_accuracy: f64,
    pub mean_forgetting: Option<f64>,
    /// 1 for the best policy on this order.
    pub rank_within_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub master_seed: u64,
    pub rows: Vec<SweepRow>,
    /// Policies by mean final average accuracy over orders, best first.
    pub ranking: Vec<(BufferPolicy, f64)>,
}

impl SweepAggregate {
    fn build(master_seed: u64, mut rows: Vec<SweepRow>) -> Self {
        let orders: Vec<Vec<u16>> = rows.iter().fold(Vec::new(), |mut acc, r| {
            if !acc.contains(&r.order) {
                acc.push(r.order.clone());
            }
            acc
        });
        for order in &orders {
            let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| &rows[i].order == order).collect();
            idx.sort_by(|&a, &b| {
                rows[b].final_average_accuracy.total_cmp(&rows[a].final_average_accuracy).then(a.cmp(&b))
            });
            for (rank, i) in idx.into_iter().enumerate() {
                rows[i].rank_within_order = rank + 1;
            }
        }
        let mut policies: Vec<BufferPolicy> = Vec::new();
        for r in &rows {
            if !policies.contains(&r.policy) {
                policies.push(r.policy);
            }
        }
        let mut ranking: Vec<(BufferPolicy, f64)> = policies
            .into_iter()
            .map(|p| {
                let accs: Vec<f64> =
                    rows.iter().filter(|r| r.policy == p).map(|r| r.final_average_accuracy).collect();
                (p, accs.iter().sum::<f64>() / accs.len() as f64)
            })
            .collect();
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
        SweepAggregate { master_seed, rows, ranking }
    }

    pub fn best_policy(&self) -> Option<BufferPolicy> {
        self.ranking.first().map(|r| r.0)
    }

    /// One line per run.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "run",
            "order",
            "policy",
            "seed",
            "final_average_accuracy",
            "mean_forgetting",
            "rank_within_order",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.run_index.to_string(),
                order_label(&r.order),
                r.policy.to_string(),
                r.seed.to_string(),
                r.final_average_accuracy.to_string(),
                r.mean_forgetting.map_or_else(String::new, |f| f.to_string()),
                r.rank_within_order.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    pub fn ranking_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "policy", "mean_final_average_accuracy"]).expect("in-memory write");
        for (i, (p, acc)) in self.ranking.iter().enumerate() {
            w.write_record([(i + 1).to_string(), p.to_string(), acc.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }
}

pub fn order_label(order: &[u16]) -> String {
    order.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub reports: Vec<RunReport>,
    pub aggregate: SweepAggregate,
}

/// All orderings of `ids` in lexicographic order of positions.
pub fn permutations(ids: &[u16]) -> Vec<Vec<u16>> {
    if ids.len() <= 1 {
        return vec![ids.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &first) in ids.iter().enumerate() {
        let mut rest = ids.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, first);
            out.push(tail);
        }
    }
    out
}

/// Continual runs over every (order, policy) pair. Run `i` is seeded with a
/// child of the master seed keyed by `i`, so runs are independent and the
/// result does not depend on execution order.
pub fn permutation_sweep(
    data: &SplitDataset,
    base: &RunConfig,
    opts: &SweepOptions,
) -> Result<SweepResult, CurriculumError> {
    let all = Curriculum::from_manifest(&data.manifest, base.order.as_deref())?;
    if all.len() != 3 && !opts.allow_n {
        return Err(CurriculumError::TaskCount(all.len()));
    }
    if opts.policies.is_empty() {
        return Err(CurriculumError::BadConfig("no policies selected".into()));
    }
    let orders = match &opts.orders {
        Some(o) => o.clone(),
        None => permutations(&all.order()),
    };
    let runs: Vec<RunConfig> = orders
        .iter()
        .flat_map(|order| opts.policies.iter().map(move |&p| (order, p)))
        .enumerate()
        .map(|(i, (order, policy))| RunConfig {
            mode: TrainMode::Continual,
            policy,
            order: Some(order.clone()),
            seed: seed::derive(base.seed, Stream::Sweep, i as u64),
            ..base.clone()
        })
        .collect();

    let run_one = |cfg: &RunConfig| train_continual(data, cfg).map(|(_, report)| report);
    let reports: Vec<RunReport> = if opts.parallel {
        runs.par_iter().map(run_one).collect::<Result<_, _>>()?
    } else {
        runs.iter().map(run_one).collect::<Result<_, _>>()?
    };

    let rows = reports
        .iter()
        .zip(&runs)
        .enumerate()
        .map(|(i, (r, cfg))| SweepRow {
            run_index: i,
            order: r.order.clone(),
            policy: cfg.policy,
            seed: cfg.seed,
            final_average_accuracy: r.average_accuracy.expect("continual reports carry a matrix"),
            mean_forgetting: r.forgetting.as_ref().map(|f| f.mean),
            rank_within_order: 0,
        })
        .collect();
    Ok(SweepResult { aggregate: SweepAggregate::build(base.seed, rows), reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curriculum::TrainConfig;
    use crate::datasets::{gen_synthetic, SyntheticSpec};

    #[test]
    fn permutation_counts_and_order() {
        assert_eq!(permutations(&[0, 1, 2]).len(), 6);
        assert_eq!(permutations(&[0, 1, 2])[0], vec![0, 1, 2]);
        assert_eq!(permutations(&[0, 1, 2])[5], vec![2, 1, 0]);
        assert_eq!(permutations(&[4, 5, 6, 7]).len(), 24);
        let mut all = permutations(&[0, 1, 2, 3]);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 24);
    }

    fn tiny(tasks: usize) -> (SplitDataset, RunConfig) {
        let spec = SyntheticSpec {
            tasks,
            classes_per_task: 2,
            dim_img: 6,
            dim_txt: 6,
            cluster_separation: 6.0,
            train_per_class: 12,
            test_per_class: 6,
            seed: 2,
        };
        let data = gen_synthetic(&spec).unwrap().dataset.split(0.2, 0).unwrap();
        let t = TrainConfig { learning_rate: 1e-3, weight_decay: 0.0, dropout_rate: 0.0, batch_size: 16, epochs: 2 };
        let cfg = RunConfig {
            hidden_dim: 8,
            num_hidden_layers: 1,
            first_task: t,
            later_tasks: t,
            per_class_capacity: 3,
            replay_batch: 4,
            seed: 99,
            ..RunConfig::default()
        };
        (data, cfg)
    }

    #[test]
    fn eighteen_runs_serial_equals_parallel() {
        let (data, cfg) = tiny(3);
        let serial = permutation_sweep(&data, &cfg, &SweepOptions::default()).unwrap();
        assert_eq!(serial.reports.len(), 18);
        let parallel =
            permutation_sweep(&data, &cfg, &SweepOptions { parallel: true, ..Default::default() }).unwrap();
        assert_eq!(serial.aggregate.to_csv(), parallel.aggregate.to_csv());
        assert_eq!(serial, parallel);
        let seeds: std::collections::BTreeSet<u64> = serial.aggregate.rows.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 18);
        for order in permutations(&[0, 1, 2]) {
            let mut ranks: Vec<usize> = serial
                .aggregate
                .rows
                .iter()
                .filter(|r| r.order == order)
                .map(|r| r.rank_within_order)
                .collect();
            ranks.sort();
            assert_eq!(ranks, vec![1, 2, 3]);
        }
    }

    #[test]
    fn task_count_guard() {
        let (data, cfg) = tiny(2);
        assert!(matches!(
            permutation_sweep(&data, &cfg, &SweepOptions::default()),
            Err(CurriculumError::TaskCount(2))
        ));
        let ok = permutation_sweep(
            &data,
            &cfg,
            &SweepOptions { allow_n: true, policies: vec![BufferPolicy::Ring], ..Default::default() },
        )
        .unwrap();
        assert_eq!(ok.reports.len(), 2);
    }
}
