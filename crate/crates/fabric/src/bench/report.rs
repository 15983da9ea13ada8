//! Per-task rows, aggregates and CSV output.
//!
//! `tasks.csv` columns, one row per task ordered by `task_id`:
//! `task_id, submit_us, terminal_us, state, attempt, items, latency_us,
//! t_s_ns, t_f_ns, t_e_ns, t_w_ns, error`.
//!
//! `summary.csv` columns, one row per sweep point:
//! `experiment, point, param, count, items, succeeded, failed, lost,
//! duplicates, completion_s, throughput_per_s, per_item_ms, p50_ms, p95_ms,
//! p99_ms, mean_ms, t_s_ms, t_f_ms, t_e_ms, t_w_ms, partial`.

use std::path::{Path, PathBuf};

use fabric_core::lifecycle::ErrorKind;
use fabric_core::{TaskId, TaskState};
use serde::{Deserialize, Serialize};

use crate::service::api::TaskView;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task_id: TaskId,
    pub submit_us: u64,
    /// Zero when the task never finished.
    pub terminal_us: u64,
    pub state: TaskState,
    pub attempt: u32,
    /// Inputs carried by the task (batch size for batch tasks).
    pub items: u32,
    pub latency_us: u64,
    pub t_s_ns: u64,
    pub t_f_ns: u64,
    pub t_e_ns: u64,
    pub t_w_ns: u64,
    pub error: String,
}

impl TaskRow {
    pub fn from_view(v: &TaskView, items: u32) -> TaskRow {
        let terminal = v.finished_us.unwrap_or(0);
        TaskRow {
            task_id: v.task_id,
            submit_us: v.submitted_us,
            terminal_us: terminal,
            state: v.state,
            attempt: v.attempt,
            items,
            latency_us: terminal.saturating_sub(v.submitted_us),
            t_s_ns: v.timing.t_s.as_nanos() as u64,
            t_f_ns: v.timing.t_f.as_nanos() as u64,
            t_e_ns: v.timing.t_e.as_nanos() as u64,
            t_w_ns: v.timing.t_w.as_nanos() as u64,
            error: v.error.as_ref().map(|e| e.to_string()).unwrap_or_default(),
        }
    }

    pub fn is_lost(&self) -> bool {
        // `error` holds TaskError's Display form, "<kind>: <message>"
        let lost = format!("{:?}:", ErrorKind::Lost);
        !self.state.is_terminal() || (self.state == TaskState::Failed && self.error.starts_with(&lost))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub point: String,
    /// The swept value, when there is one.
    pub param: f64,
    pub count: usize,
    pub items: u64,
    pub succeeded: usize,
    pub failed: usize,
    pub lost: usize,
    pub duplicates: u64,
    pub completion_s: f64,
    pub throughput_per_s: f64,
    pub per_item_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub t_s_ms: f64,
    pub t_f_ms: f64,
    pub t_e_ms: f64,
    pub t_w_ms: f64,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<TaskRow>,
    pub summary: Summary,
}

/// Nearest-rank percentile of unsorted samples; 0 for none.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

pub fn mean(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        0.0
    } else {
        samples.iter().sum::<f64>() / samples.len() as f64
    }
}

pub fn std_dev(samples: &[f64]) -> f64 {
    if samples.len() < 2 {
        return 0.0;
    }
    let m = mean(samples);
    (samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (samples.len() - 1) as f64).sqrt()
}

fn us_to_ms(us: u64) -> f64 {
    us as f64 / 1000.0
}

impl ExperimentReport {
    /// Builds the aggregates from rows. Rows are sorted by task id.
    pub fn new(experiment: &str, point: &str, param: f64, mut rows: Vec<TaskRow>, duplicates: u64, partial: bool) -> Self {
        rows.sort_by_key(|r| r.task_id);
        let done: Vec<&TaskRow> = rows.iter().filter(|r| r.state.is_terminal()).collect();
        let latencies: Vec<f64> = done.iter().map(|r| us_to_ms(r.latency_us)).collect();
        let first_submit = rows.iter().map(|r| r.submit_us).min().unwrap_or(0);
        let last_terminal = done.iter().map(|r| r.terminal_us).max().unwrap_or(first_submit);
        let completion_s = last_terminal.saturating_sub(first_submit) as f64 / 1e6;
        let items: u64 = rows.iter().map(|r| r.items as u64).sum();
        let col = |f: fn(&TaskRow) -> u64| mean(&done.iter().map(|r| f(r) as f64 / 1e6).collect::<Vec<_>>());
        let summary = Summary {
            experiment: experiment.to_string(),
            point: point.to_string(),
            param,
            count: rows.len(),
            items,
            succeeded: rows.iter().filter(|r| r.state == TaskState::Succeeded).count(),
            failed: rows.iter().filter(|r| r.state == TaskState::Failed && !r.is_lost()).count(),
            lost: rows.iter().filter(|r| r.is_lost()).count(),
            duplicates,
            completion_s,
            throughput_per_s: if completion_s > 0.0 { rows.len() as f64 / completion_s } else { 0.0 },
            per_item_ms: if items > 0 { completion_s * 1000.0 / items as f64 } else { 0.0 },
            p50_ms: percentile(&latencies, 50.0),
            p95_ms: percentile(&latencies, 95.0),
            p99_ms: percentile(&latencies, 99.0),
            mean_ms: mean(&latencies),
            t_s_ms: col(|r| r.t_s_ns),
            t_f_ms: col(|r| r.t_f_ns),
            t_e_ms: col(|r| r.t_e_ns),
            t_w_ms: col(|r| r.t_w_ns),
            partial,
        };
        ExperimentReport { rows, summary }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `rows` as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `tasks.csv` and `summary.csv` into `dir`, creating it.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<(), ReportError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_csv(&dir.join("tasks.csv"), &report.rows)?;
    write_csv(&dir.join("summary.csv"), std::slice::from_ref(&report.summary))
}

/// Reads back a `tasks.csv`.
pub fn read_tasks(path: &Path) -> Result<Vec<TaskRow>, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<TaskRow>, _>>().map_err(csv_err)
}

/// One asserted property of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fabric_core::lifecycle::TaskError;

    fn row(id: u128, submit: u64, end: u64, state: TaskState) -> TaskRow {
        TaskRow {
            task_id: TaskId::from_u128(id),
            submit_us: submit,
            terminal_us: end,
            state,
            attempt: 0,
            items: 1,
            latency_us: end.saturating_sub(submit),
            t_s_ns: 10,
            t_f_ns: 20,
            t_e_ns: 30,
            t_w_ns: 40,
            error: String::new(),
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&s, 50.0), 50.0);
        assert_eq!(percentile(&s, 95.0), 95.0);
        assert_eq!(percentile(&s, 100.0), 100.0);
        assert_eq!(percentile(&[3.0], 99.0), 3.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn throughput_recomputes_from_rows() {
        let rows: Vec<TaskRow> = (0..10)
            .rev()
            .map(|i| row(i, 1_000_000 + i as u64 * 1000, 1_500_000 + i as u64 * 100_000, TaskState::Succeeded))
            .collect();
        let r = ExperimentReport::new("run", "p", 0.0, rows, 0, false);
        assert!(r.rows.windows(2).all(|w| w[0].task_id < w[1].task_id));
        let first = r.rows.iter().map(|r| r.submit_us).min().unwrap();
        let last = r.rows.iter().map(|r| r.terminal_us).max().unwrap();
        let expect = 10.0 / ((last - first) as f64 / 1e6);
        assert!((r.summary.throughput_per_s - expect).abs() < 1e-9);
        assert_eq!(r.summary.succeeded, 10);
        assert_eq!(r.summary.lost, 0);
    }

    #[test]
    fn lost_counts_unfinished_and_lost_failures() {
        let mut lost = row(2, 0, 10, TaskState::Failed);
        lost.error = TaskError::new(ErrorKind::Lost, "manager lost").to_string();
        let mut failed = row(3, 0, 10, TaskState::Failed);
        failed.error = TaskError::new(ErrorKind::Execution, "boom").to_string();
        let rows = vec![row(1, 0, 0, TaskState::Queued), lost, failed, row(4, 0, 10, TaskState::Succeeded)];
        let r = ExperimentReport::new("run", "p", 0.0, rows, 2, true);
        assert_eq!((r.summary.lost, r.summary.failed, r.summary.succeeded), (2, 1, 1));
        assert_eq!(r.summary.duplicates, 2);
    }

    #[test]
    fn csv_round_trip_and_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<TaskRow> = (0..10).map(|i| row(i, 0, 5, TaskState::Succeeded)).collect();
        let r = ExperimentReport::new("run", "p", 0.0, rows, 0, false);
        emit_report(&r, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("tasks.csv")).unwrap();
        assert_eq!(text.lines().count(), 11);
        assert!(text.starts_with("task_id,submit_us,terminal_us,state,attempt,items,latency_us,"));
        assert_eq!(read_tasks(&dir.path().join("tasks.csv")).unwrap(), r.rows);
    }

    #[test]
    fn unwritable_path_is_an_error_with_context() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, b"x").unwrap();
        let r = ExperimentReport::new("run", "p", 0.0, vec![], 0, false);
        let err = emit_report(&r, &blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"));
    }
}
