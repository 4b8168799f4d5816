//! Continual-learning metrics and report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curriculum::{PhaseTrace, RunConfig};

pub const REPORT_SCHEMA: &str = "cvqa-report/1";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("accuracy matrix has {rows} of {tasks} rows")]
    Partial { rows: usize, tasks: usize },
    #[error("forgetting needs at least two tasks, got {0}")]
    TooFewTasks(usize),
    #[error("row has {found} entries, expected {expected}")]
    RowLength { expected: usize, found: usize },
    #[error("accuracy {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("accuracy matrix is already complete")]
    MatrixFull,
    #[error("{accuracies} accuracies but {counts} test counts")]
    CountMismatch { accuracies: usize, counts: usize },
    #[error("test counts must be positive")]
    ZeroCount,
    #[error("report has no accuracy matrix")]
    NoMatrix,
    #[error("report is inconsistent: {0}")]
    Inconsistent(String),
    #[error("malformed matrix csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// `rows[i][j]`: accuracy (percent) on the `j`-th curriculum task right after
/// training the `i`-th. Columns follow `task_ids`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub task_ids: Vec<u16>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// One signed value per task except the last, in curriculum order.
    pub per_task: Vec<f64>,
    pub mean: f64,
}

impl AccuracyMatrix {
    pub fn new(task_ids: Vec<u16>) -> Self {
        AccuracyMatrix { task_ids, rows: Vec::new() }
    }

    pub fn num_tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.task_ids.len()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<(), ReportError> {
        if self.is_complete() {
            return Err(ReportError::MatrixFull);
        }
        check_row(&row, self.num_tasks())?;
        self.rows.push(row);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.rows.len() > self.num_tasks() {
            return Err(ReportError::MatrixFull);
        }
        self.rows.iter().try_for_each(|r| check_row(r, self.num_tasks()))
    }

    fn full(&self) -> Result<(), ReportError> {
        if !self.is_complete() || self.task_ids.is_empty() {
            return Err(ReportError::Partial { rows: self.rows.len(), tasks: self.num_tasks() });
        }
        Ok(())
    }

    pub fn final_row(&self) -> Result<&[f64], ReportError> {
        self.full()?;
        Ok(self.rows.last().expect("complete matrix"))
    }

    /// Mean of the last row.
    pub fn average_accuracy(&self) -> Result<f64, ReportError> {
        let last = self.final_row()?;
        Ok(last.iter().sum::<f64>() / last.len() as f64)
    }

    /// `f_j = max_{j <= i < T-1} R[i][j] - R[T-1][j]` for every `j < T-1`.
    /// Values keep their sign; negative means later tasks helped.
    pub fn forgetting(&self) -> Result<Forgetting, ReportError> {
        self.full()?;
        let t = self.num_tasks();
        if t < 2 {
            return Err(ReportError::TooFewTasks(t));
        }
        let last = &self.rows[t - 1];
        let per_task: Vec<f64> = (0..t - 1)
            .map(|j| {
                let best = (j..t - 1).map(|i| self.rows[i][j]).fold(f64::NEG_INFINITY, f64::max);
                best - last[j]
            })
            .collect();
        let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
        Ok(Forgetting { per_task, mean })
    }
}

fn check_row(row: &[f64], n: usize) -> Result<(), ReportError> {
    if row.len() != n {
        return Err(ReportError::RowLength { expected: n, found: row.len() });
    }
    if let Some(&v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
        return Err(ReportError::OutOfRange(v));
    }
    Ok(())
}

/// Question-count-weighted mean, i.e. the accuracy of the pooled test set.
pub fn overall_accuracy(per_task: &[f64], test_counts: &[usize]) -> Result<f64, ReportError> {
    if per_task.len() != test_counts.len() {
        return Err(ReportError::CountMismatch {
            accuracies: per_task.len(),
            counts: test_counts.len(),
        });
    }
    if per_task.is_empty() || test_counts.contains(&0) {
        return Err(ReportError::ZeroCount);
    }
    let total: usize = test_counts.iter().sum();
    let weighted: f64 = per_task.iter().zip(test_counts).map(|(a, &n)| a * n as f64).sum();
    Ok(weighted / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: u16,
    pub name: String,
    pub test_count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub engine_version: String,
    /// Row label, e.g. `CLIP-mul` or `continual-reservoir`.
    pub method: String,
    pub mode: String,
    pub seed: u64,
    pub config: Option<RunConfig>,
    /// Curriculum order of task ids.
    pub order: Vec<u16>,
    /// Final per-task accuracy in manifest task order.
    pub tasks: Vec<TaskResult>,
    pub overall_accuracy: f64,
    pub matrix: Option<AccuracyMatrix>,
    pub average_accuracy: Option<f64>,
    pub forgetting: Option<Forgetting>,
    pub traces: Vec<PhaseTrace>,
    pub notes: Vec<String>,
    pub wall_clock_secs: Option<f64>,
}

impl RunReport {
    /// Builds a report and fills every derived metric from `tasks` and
    /// `matrix`.
    pub fn assemble(
        method: impl Into<String>,
        mode: impl Into<String>,
        seed: u64,
        config: Option<RunConfig>,
        order: Vec<u16>,
        tasks: Vec<TaskResult>,
        matrix: Option<AccuracyMatrix>,
    ) -> Result<Self, ReportError> {
        let mut report = RunReport {
            schema: REPORT_SCHEMA.into(),
            engine_version: ENGINE_VERSION.into(),
            method: method.into(),
            mode: mode.into(),
            seed,
            config,
            order,
            tasks,
            overall_accuracy: 0.0,
            matrix,
            average_accuracy: None,
            forgetting: None,
            traces: Vec::new(),
            notes: Vec::new(),
            wall_clock_secs: None,
        };
        let (overall, average, forgetting) = report.derived()?;
        report.overall_accuracy = overall;
        report.average_accuracy = average;
        report.forgetting = forgetting;
        Ok(report)
    }

    #[allow(clippy::type_complexity)]
    fn derived(&self) -> Result<(f64, Option<f64>, Option<Forgetting>), ReportError> {
        let accs: Vec<f64> = self.tasks.iter().map(|t| t.accuracy).collect();
        let counts: Vec<usize> = self.tasks.iter().map(|t| t.test_count).collect();
        let overall = overall_accuracy(&accs, &counts)?;
        let Some(m) = &self.matrix else { return Ok((overall, None, None)) };
        m.validate()?;
        let last = m.final_row()?;
        for t in &self.tasks {
            let j = m.task_ids.iter().position(|&id| id == t.task_id).ok_or_else(|| {
                ReportError::Inconsistent(format!("task {} missing from matrix", t.task_id))
            })?;
            if last[j] != t.accuracy {
                return Err(ReportError::Inconsistent(format!(
                    "task {} final accuracy {} differs from matrix {}",
                    t.task_id, t.accuracy, last[j]
                )));
            }
        }
        let forgetting = if m.num_tasks() >= 2 { Some(m.forgetting()?) } else { None };
        Ok((overall, Some(m.average_accuracy()?), forgetting))
    }

    /// Recomputes every derived metric and checks it matches exactly.
    pub fn verify(&self) -> Result<(), ReportError> {
        if self.schema != REPORT_SCHEMA {
            return Err(ReportError::Inconsistent(format!("schema `{}`", self.schema)));
        }
        let (overall, average, forgetting) = self.derived()?;
        if overall != self.overall_accuracy
            || average != self.average_accuracy
            || forgetting != self.forgetting
        {
            return Err(ReportError::Inconsistent("derived metrics do not match".into()));
        }
        Ok(())
    }

    pub fn task_accuracy(&self, task_id: u16) -> Option<f64> {
        self.tasks.iter().find(|t| t.task_id == task_id).map(|t| t.accuracy)
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `after_task,<id>...` header, then one line per completed row.
pub fn matrix_csv(m: &AccuracyMatrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("after_task".to_string())
        .chain(m.task_ids.iter().map(|id| id.to_string()))
        .collect();
    w.write_record(&header).expect("in-memory write");
    for (i, row) in m.rows.iter().enumerate() {
        let line: Vec<String> = std::iter::once(m.task_ids[i].to_string())
            .chain(row.iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&line).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn parse_matrix_csv(text: &str) -> Result<AccuracyMatrix, ReportError> {
    let bad = |e: &dyn std::fmt::Display| ReportError::Csv(e.to_string());
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| bad(&e))?.clone();
    if headers.get(0) != Some("after_task") {
        return Err(ReportError::Csv("missing `after_task` header".into()));
    }
    let task_ids = headers
        .iter()
        .skip(1)
        .map(|h| h.parse::<u16>().map_err(|e| bad(&e)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut m = AccuracyMatrix::new(task_ids);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(&e))?;
        let after: u16 = rec.get(0).unwrap_or("").parse().map_err(|e| bad(&e))?;
        if m.task_ids.get(i) != Some(&after) {
            return Err(ReportError::Csv(format!("row {i} labelled with task {after}")));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| bad(&e)))
            .collect::<Result<Vec<_>, _>>()?;
        m.push_row(row)?;
    }
    Ok(m)
}

/// Per-task table used when a report has no matrix.
pub fn tasks_csv(report: &RunReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task_id", "name", "test_count", "accuracy"]).expect("in-memory write");
    for t in &report.tasks {
        w.write_record([
            t.task_id.to_string(),
            t.name.clone(),
            t.test_count.to_string(),
            t.accuracy.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Accuracy of each task against the index of the task being trained, one
/// polyline per task starting where that task is first trained.
pub fn curves_svg(m: &AccuracyMatrix, names: &[(u16, String)]) -> String {
    let (w, h, left, right, top, bottom) = (480.0, 320.0, 48.0, 120.0, 16.0, 40.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let t = m.num_tasks().max(1);
    let x_of = |i: usize| {
        if t == 1 { left + plot_w / 2.0 } else { left + plot_w * i as f64 / (t - 1) as f64 }
    };
    let y_of = |acc: f64| top + plot_h * (1.0 - acc / 100.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{left:.2} {top:.2} V{:.2} H{:.2}" stroke="black" fill="none"/>"#,
        top + plot_h,
        left + plot_w
    );
    for acc in [0.0, 50.0, 100.0] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{acc}</text>"#,
            left - 4.0,
            y_of(acc) + 3.0
        );
    }
    for (i, id) in m.task_ids.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="middle">{id}</text>"#,
            x_of(i),
            top + plot_h + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">task trained</text>"#,
        left + plot_w / 2.0,
        h - 6.0
    );
    for (j, id) in m.task_ids.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let points: Vec<String> = (j..m.rows.len())
            .map(|i| format!("{:.2},{:.2}", x_of(i), y_of(m.rows[i][j])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            points.join(" ")
        );
        let name = names.iter().find(|(t, _)| t == id).map_or_else(|| format!("task {id}"), |(_, n)| n.clone());
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{color}">{}</text>"#,
            w - right + 8.0,
            top + 14.0 * (j + 1) as f64,
            xml_escape(&name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

pub fn render(report: &RunReport, format: ReportFormat) -> Result<String, ReportError> {
    match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => {
            Ok(report.matrix.as_ref().map_or_else(|| tasks_csv(report), matrix_csv))
        }
        ReportFormat::Svg => {
            let m = report.matrix.as_ref().ok_or(ReportError::NoMatrix)?;
            let names: Vec<(u16, String)> =
                report.tasks.iter().map(|t| (t.task_id, t.name.clone())).collect();
            Ok(curves_svg(m, &names))
        }
    }
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<(), ReportError> {
    let text = render(report, format)?;
    std::fs::write(path, text).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

/// Text table with one row per report: method, overall, then per-task
/// accuracy in the column order of the first report.
pub fn table1(reports: &[&RunReport]) -> String {
    let Some(first) = reports.first() else { return String::new() };
    let method_w = reports.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let cols: Vec<(u16, String)> = first.tasks.iter().map(|t| (t.task_id, t.name.clone())).collect();
    let widths: Vec<usize> = cols.iter().map(|(_, n)| n.len().max(8)).collect();
    let mut s = format!("{:<method_w$}  {:>8}", "Method", "Overall");
    for ((_, name), w) in cols.iter().zip(&widths) {
        let _ = write!(s, "  {name:>w$}");
    }
    s.push('\n');
    for r in reports {
        let _ = write!(s, "{:<method_w$}  {:>8.2}", r.method, r.overall_accuracy);
        for ((id, _), w) in cols.iter().zip(&widths) {
            match r.task_accuracy(*id) {
                Some(a) => {
                    let _ = write!(s, "  {a:>w$.2}");
                }
                None => {
                    let _ = write!(s, "  {:>w$}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> AccuracyMatrix {
        let mut m = AccuracyMatrix::new((0..rows.len() as u16).collect());
        for r in rows {
            m.push_row(r.to_vec()).unwrap();
        }
        m
    }

    #[test]
    fn average_of_last_row() {
        let m = matrix(&[&[95.0, 10.0, 0.0], &[90.0, 85.0, 5.0], &[90.0, 80.0, 70.0]]);
        assert_eq!(m.average_accuracy().unwrap(), 80.0);
        let perfect = matrix(&[&[100.0; 3], &[100.0; 3], &[100.0; 3]]);
        assert_eq!(perfect.average_accuracy().unwrap(), 100.0);
    }

    #[test]
    fn partial_matrix_is_rejected() {
        let mut m = AccuracyMatrix::new(vec![0, 1]);
        m.push_row(vec![50.0, 0.0]).unwrap();
        assert!(matches!(m.average_accuracy(), Err(ReportError::Partial { .. })));
        assert!(matches!(m.forgetting(), Err(ReportError::Partial { .. })));
        assert!(m.push_row(vec![1.0]).is_err());
        assert!(m.push_row(vec![1.0, 101.0]).is_err());
        m.push_row(vec![1.0, 2.0]).unwrap();
        assert!(matches!(m.push_row(vec![1.0, 2.0]), Err(ReportError::MatrixFull)));
    }

    #[test]
    fn two_task_forgetting() {
        let m = matrix(&[&[95.0, 0.0], &[60.0, 90.0]]);
        assert_eq!(m.forgetting().unwrap(), Forgetting { per_task: vec![35.0], mean: 35.0 });
    }

    #[test]
    fn rising_columns_give_nonpositive_forgetting() {
        let m = matrix(&[&[50.0, 0.0, 0.0], &[60.0, 40.0, 0.0], &[70.0, 45.0, 30.0]]);
        let f = m.forgetting().unwrap();
        assert_eq!(f.per_task, vec![-10.0, -5.0]);
    }

    #[test]
    fn single_task_forgetting_is_an_error() {
        let m = matrix(&[&[88.0]]);
        assert!(matches!(m.forgetting(), Err(ReportError::TooFewTasks(1))));
    }

    #[test]
    fn weighted_overall() {
        assert_eq!(overall_accuracy(&[90.0, 80.0, 70.0], &[10, 10, 10]).unwrap(), 80.0);
        assert_eq!(overall_accuracy(&[42.5], &[7]).unwrap(), 42.5);
        // Hand computation: (97.71*870 + 95.17*145 + 97.14*35) / 1050.
        let hand = (85007.7 + 13799.65 + 3399.9) / 1050.0;
        let got = overall_accuracy(&[97.71, 95.17, 97.14], &[870, 145, 35]).unwrap();
        assert!((got - hand).abs() < 1e-9, "{got} vs {hand}");
        assert!(overall_accuracy(&[1.0], &[0]).is_err());
        assert!(overall_accuracy(&[1.0, 2.0], &[1]).is_err());
    }

    fn sample_report() -> RunReport {
        let m = matrix(&[&[96.5, 0.0, 0.0], &[40.25, 97.0, 0.0], &[12.0, 55.5, 99.0]]);
        let tasks = (0..3)
            .map(|i| TaskResult {
                task_id: i,
                name: format!("task-{i}"),
                test_count: 100 + i as usize,
                accuracy: m.rows[2][i as usize],
            })
            .collect();
        RunReport::assemble("continual-reservoir", "continual", 7, None, vec![0, 1, 2], tasks, Some(m))
            .unwrap()
    }

    #[test]
    fn report_is_consistent_and_deterministic() {
        let r = sample_report();
        r.verify().unwrap();
        assert_eq!(r.to_json().unwrap(), sample_report().to_json().unwrap());
        for f in [ReportFormat::Csv, ReportFormat::Svg] {
            assert_eq!(render(&r, f).unwrap(), render(&sample_report(), f).unwrap());
        }
        let mut tampered = r.clone();
        tampered.overall_accuracy += 1e-9;
        assert!(tampered.verify().is_err());
        let mut tampered = r;
        tampered.tasks[0].accuracy = 13.0;
        assert!(tampered.verify().is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_task() {
        let svg = render(&sample_report(), ReportFormat::Svg).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn emit_to_file_and_unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report();
        let p = dir.path().join("r.json");
        emit_report(&r, ReportFormat::Json, &p).unwrap();
        assert_eq!(RunReport::from_json(&std::fs::read_to_string(&p).unwrap()).unwrap(), r);
        let bad = dir.path().join("missing").join("r.json");
        assert!(matches!(emit_report(&r, ReportFormat::Json, &bad), Err(ReportError::Io { .. })));
    }

    #[test]
    fn table_layout() {
        let r = sample_report();
        let t = table1(&[&r]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Method"));
        assert!(lines[0].contains("Overall") && lines[0].contains("task-2"));
        assert!(lines[1].contains(&format!("{:.2}", r.overall_accuracy)));
    }

    fn square_matrix() -> impl Strategy<Value = AccuracyMatrix> {
        (1usize..6).prop_flat_map(|t| {
            prop::collection::vec(prop::collection::vec(0.0f64..=100.0, t), t).prop_map(move |rows| {
                AccuracyMatrix { task_ids: (0..t as u16).map(|i| i * 3 + 1).collect(), rows }
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn metrics_match_direct_oracles(m in square_matrix()) {
            let t = m.num_tasks();
            let last = &m.rows[t - 1];
            let mut sum = 0.0;
            for v in last { sum += v; }
            prop_assert_eq!(m.average_accuracy().unwrap(), sum / t as f64);

            if t >= 2 {
                let f = m.forgetting().unwrap();
                for j in 0..t - 1 {
                    let mut best = m.rows[j][j];
                    for i in j..t - 1 {
                        if m.rows[i][j] > best { best = m.rows[i][j]; }
                    }
                    prop_assert_eq!(f.per_task[j], best - last[j]);
                }
            } else {
                prop_assert!(m.forgetting().is_err());
            }
        }

        #[test]
        fn csv_round_trip(m in square_matrix(), keep in 0usize..6) {
            let mut m = m;
            m.rows.truncate(keep);
            prop_assert_eq!(parse_matrix_csv(&matrix_csv(&m)).unwrap(), m);
        }
    }
}
