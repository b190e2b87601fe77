//! Metrics derived from a trace: deadline misses, response times and the
//! four overhead families (get-task, scheduling, release, preemption).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trace::{EventKind, Trace};
use crate::error::{Error, Result};
use crate::model::JobId;
use crate::time::Nanos;

/// Summary of a sample of durations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: u64,
    pub min: Nanos,
    pub max: Nanos,
    pub mean: f64,
    pub total: Nanos,
}

impl Stats {
    pub fn of(values: impl IntoIterator<Item = Nanos>) -> Self {
        let mut s = Stats::default();
        for v in values {
            if s.count == 0 || v < s.min {
                s.min = v;
            }
            s.max = s.max.max(v);
            s.total += v;
            s.count += 1;
        }
        if s.count > 0 {
            s.mean = s.total as f64 / s.count as f64;
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overheads {
    pub get_task: Stats,
    pub scheduling: Stats,
    pub worker_lock_wait: Stats,
    pub scheduler_lock_wait: Stats,
    /// Effective minus theoretical release, per job.
    pub release: Stats,
    pub preemptions: u64,
    pub resumes: u64,
    pub preemption_overhead: Nanos,
    pub overruns: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub name: String,
    pub released: u64,
    pub completed: u64,
    pub misses: u64,
    /// Jobs still unfinished when the run ended.
    pub truncated: u64,
    pub response: Stats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub backend: String,
    pub policy: String,
    pub preemptive: bool,
    pub version_filter: String,
    pub workers: usize,
    pub horizon_ns: Nanos,
    pub seed: Option<u64>,
    /// Timestamp of the last trace event.
    pub end_ns: Nanos,
    pub released: u64,
    pub completed: u64,
    pub misses: u64,
    pub miss_ratio: f64,
    pub tasks: Vec<TaskStats>,
    pub overheads: Overheads,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn task(&self, name: &str) -> Option<&TaskStats> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Mean response time over all completed jobs.
    pub fn mean_response(&self) -> f64 {
        let (sum, n) = self
            .tasks
            .iter()
            .fold((0.0, 0u64), |(s, n), t| (s + t.response.mean * t.response.count as f64, n + t.response.count));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

#[derive(Default, Clone, Copy)]
struct JobTimes {
    theoretical: Option<Nanos>,
    effective: Option<Nanos>,
    start: Option<Nanos>,
    complete: Option<Nanos>,
    deadline: Option<Nanos>,
}

fn job_times(trace: &Trace) -> Result<BTreeMap<JobId, JobTimes>> {
    let mut jobs: BTreeMap<JobId, JobTimes> = BTreeMap::new();
    let name = |j: JobId| format!("{}#{}", trace.task_name(j.task), j.seq);
    for e in &trace.events {
        let Some(j) = e.job else { continue };
        let jt = jobs.entry(j).or_default();
        match e.kind {
            EventKind::ReleaseTheoretical => {
                jt.theoretical = Some(e.t);
                jt.deadline = e.get_u64("deadline");
            }
            EventKind::ReleaseEffective => {
                let theo = jt
                    .theoretical
                    .ok_or_else(|| Error::Integrity(format!("{}: effective release without theoretical", name(j))))?;
                if e.t < theo {
                    return Err(Error::Integrity(format!("{}: released before its arrival", name(j))));
                }
                jt.effective = Some(e.t);
            }
            EventKind::JobStart => {
                let eff = jt
                    .effective
                    .ok_or_else(|| Error::Integrity(format!("{}: started before release", name(j))))?;
                if e.t < eff || jt.start.is_some() {
                    return Err(Error::Integrity(format!("{}: inconsistent job_start", name(j))));
                }
                jt.start = Some(e.t);
            }
            EventKind::JobComplete => {
                let start = jt
                    .start
                    .ok_or_else(|| Error::Integrity(format!("{}: completed without start", name(j))))?;
                if e.t < start || jt.complete.is_some() {
                    return Err(Error::Integrity(format!("{}: inconsistent job_complete", name(j))));
                }
                jt.complete = Some(e.t);
            }
            _ => {}
        }
    }
    Ok(jobs)
}

/// Overhead section of a report; fails on a malformed trace.
pub fn compute_overheads(trace: &Trace) -> Result<Overheads> {
    let jobs = job_times(trace)?;
    let mut o = Overheads {
        release: Stats::of(
            jobs.values()
                .filter_map(|j| Some(j.effective? - j.theoretical?)),
        ),
        ..Default::default()
    };
    let mut get_task = Vec::new();
    let mut sched = Vec::new();
    let mut worker_wait = Vec::new();
    let mut sched_wait = Vec::new();
    let mut open_tick: Option<(Nanos, Nanos)> = None;
    for e in &trace.events {
        match e.kind {
            EventKind::GetTask => get_task.push(e.get_u64("dur").unwrap_or(0)),
            EventKind::LockWait => {
                let d = e.get_u64("dur").unwrap_or(0);
                if e.worker.is_some() {
                    worker_wait.push(d);
                } else {
                    sched_wait.push(d);
                    if let Some((_, w)) = open_tick.as_mut() {
                        *w += d;
                    }
                }
            }
            EventKind::TickBegin => {
                if open_tick.is_some() {
                    return Err(Error::Integrity(format!("nested tick_begin at {}", e.t)));
                }
                open_tick = Some((e.t, 0));
            }
            EventKind::TickEnd => {
                let (begin, waited) = open_tick
                    .take()
                    .ok_or_else(|| Error::Integrity(format!("tick_end without tick_begin at {}", e.t)))?;
                sched.push((e.t - begin).saturating_sub(waited));
            }
            EventKind::Preempt => {
                o.preemptions += 1;
                o.preemption_overhead += e.get_u64("cost").unwrap_or(0);
            }
            EventKind::Resume => {
                o.resumes += 1;
                o.preemption_overhead += e.get_u64("cost").unwrap_or(0);
            }
            EventKind::Overrun => o.overruns += 1,
            _ => {}
        }
    }
    o.get_task = Stats::of(get_task);
    o.scheduling = Stats::of(sched);
    o.worker_lock_wait = Stats::of(worker_wait);
    o.scheduler_lock_wait = Stats::of(sched_wait);
    Ok(o)
}

/// Per-task and per-run metrics. A job misses when it completes after its
/// absolute deadline, or is unfinished at the end with its deadline passed.
pub fn build_report(trace: &Trace) -> Result<RunReport> {
    let jobs = job_times(trace)?;
    let end = trace.events.iter().map(|e| e.t).max().unwrap_or(0);
    let mut tasks: Vec<TaskStats> = trace
        .task_names
        .iter()
        .map(|n| TaskStats {
            name: n.clone(),
            ..Default::default()
        })
        .collect();
    let mut responses: Vec<Vec<Nanos>> = vec![Vec::new(); tasks.len()];
    for (id, j) in &jobs {
        let Some(theo) = j.theoretical else { continue };
        let ts = &mut tasks[id.task.index()];
        ts.released += 1;
        let deadline = j.deadline.unwrap_or(Nanos::MAX);
        match j.complete {
            Some(c) => {
                ts.completed += 1;
                responses[id.task.index()].push(c - theo);
                if c > deadline {
                    ts.misses += 1;
                }
            }
            None => {
                ts.truncated += 1;
                if end > deadline {
                    ts.misses += 1;
                }
            }
        }
    }
    for (ts, r) in tasks.iter_mut().zip(responses) {
        ts.response = Stats::of(r);
    }
    let released: u64 = tasks.iter().map(|t| t.released).sum();
    let misses: u64 = tasks.iter().map(|t| t.misses).sum();
    Ok(RunReport {
        end_ns: end,
        released,
        completed: tasks.iter().map(|t| t.completed).sum(),
        misses,
        miss_ratio: if released == 0 { 0.0 } else { misses as f64 / released as f64 },
        overheads: compute_overheads(trace)?,
        tasks,
        ..Default::default()
    })
}
