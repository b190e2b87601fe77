//! Scheduler-side logic shared by both backends for GLOBAL and PARTITIONED
//! mapping: release bookkeeping, job construction, ready queues, dispatch
//! decisions and preemption targets.

use std::collections::VecDeque;

use crate::error::Result;
use crate::graph::{check_activation, TokenSource};
use crate::middleware::{sporadic_release, TaskSet};
use crate::model::{
    AccelId, ChannelId, JobId, MappingScheme, SelectionSettings, TaskId, TaskKind, VersionId,
    WorkerId,
};
use crate::priority::{assign_priority, sort_ready, JobClass, Prioritized, PriorityKey};
use crate::select::{eligible_versions, select_version, AccelRegistry, AcquireOutcome, SelectionContext};
use crate::time::Nanos;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JobState {
    Ready,
    Running,
    Preempted,
    Completed,
}

#[derive(Clone, Debug)]
pub struct Job {
    pub id: JobId,
    pub class: JobClass,
    /// Base key; the effective key may be raised by priority inheritance.
    pub key: PriorityKey,
    /// Theoretical release.
    pub arrival: Nanos,
    pub deadline: Nanos,
    /// Tentative at release, final once dispatched.
    pub version: Option<VersionId>,
    pub state: JobState,
    pub worker: Option<WorkerId>,
    /// Input tokens claimed at activation, popped when the job starts.
    pub claimed: Vec<(ChannelId, u32)>,
}

impl Prioritized for Job {
    fn priority(&self) -> PriorityKey {
        self.key
    }
}

/// Builds job `seq` of `task`. Data-driven graph nodes pass the deadline
/// carried by their input tokens.
pub fn make_job(ts: &TaskSet, task: TaskId, seq: u64, arrival: Nanos, deadline: Option<Nanos>) -> Result<Job> {
    let t = ts.task(task);
    let class = if t.desc.kind == TaskKind::Aperiodic {
        JobClass::Aperiodic
    } else {
        JobClass::Recurring
    };
    let deadline = deadline.unwrap_or_else(|| {
        arrival.saturating_add(ts.deadlines[task.index()].unwrap_or(Nanos::MAX - arrival))
    });
    let key = assign_priority(
        ts.config.priority_assignment,
        task,
        &ts.statics[task.index()],
        class,
        arrival,
        deadline,
        seq,
    )?;
    Ok(Job {
        id: JobId { task, seq },
        class,
        key,
        arrival,
        deadline,
        version: None,
        state: JobState::Ready,
        worker: None,
        claimed: t.inputs.clone(),
    })
}

/// Release bookkeeping owned by the scheduler context.
#[derive(Clone, Debug)]
pub struct ReleaseBook {
    next_arrival: Vec<Option<Nanos>>,
    period: Vec<Nanos>,
    seq: Vec<u64>,
    last_activation: Vec<Option<Nanos>>,
    pending: Vec<VecDeque<Nanos>>,
    stopped: bool,
}

impl ReleaseBook {
    pub fn new(ts: &TaskSet) -> Self {
        let n = ts.tasks.len();
        ReleaseBook {
            next_arrival: ts
                .tasks
                .iter()
                .map(|t| t.is_periodic_release().then_some(t.desc.release_offset))
                .collect(),
            period: ts.tasks.iter().map(|t| t.desc.period.unwrap_or(0)).collect(),
            seq: vec![0; n],
            last_activation: vec![None; n],
            pending: vec![VecDeque::new(); n],
            stopped: false,
        }
    }

    /// Records an activation request of a sporadic or aperiodic task and
    /// returns its arrival instant.
    pub fn activate(&mut self, ts: &TaskSet, task: TaskId, now: Nanos) -> Nanos {
        let i = task.index();
        let arrival = match ts.task(task).desc.kind {
            TaskKind::Sporadic => sporadic_release(now, self.last_activation[i], self.period[i]),
            _ => now,
        };
        self.last_activation[i] = Some(arrival);
        self.pending[i].push_back(arrival);
        arrival
    }

    pub fn next_seq(&mut self, task: TaskId) -> u64 {
        let s = self.seq[task.index()];
        self.seq[task.index()] += 1;
        s
    }

    /// Timer and activation arrivals `≤ now`, in task-id order:
    /// `(task, arrival)`.
    pub fn due(&mut self, now: Nanos) -> Vec<(TaskId, Nanos)> {
        let mut out = Vec::new();
        if self.stopped {
            return out;
        }
        for i in 0..self.next_arrival.len() {
            if let Some(next) = self.next_arrival[i].as_mut() {
                while *next <= now {
                    out.push((TaskId(i as u32), *next));
                    *next += self.period[i];
                }
            }
            while self.pending[i].front().is_some_and(|&a| a <= now) {
                out.push((TaskId(i as u32), self.pending[i].pop_front().expect("front")));
            }
        }
        out
    }

    /// Earliest future arrival, if any.
    pub fn next_arrival(&self) -> Option<Nanos> {
        if self.stopped {
            return None;
        }
        self.next_arrival
            .iter()
            .flatten()
            .chain(self.pending.iter().filter_map(|p| p.front()))
            .copied()
            .min()
    }

    pub fn has_pending(&self) -> bool {
        !self.stopped && self.pending.iter().any(|p| !p.is_empty())
    }

    pub fn stop(&mut self) {
        self.stopped = true;
    }
}

/// Releases every data-driven node whose inputs are satisfied, claiming the
/// tokens. A node may fire several times if tokens for several iterations
/// are present.
pub fn activate_graph_nodes(
    ts: &TaskSet,
    tokens: &mut impl TokenSource,
    book: &mut ReleaseBook,
    now: Nanos,
) -> Result<Vec<Job>> {
    let mut jobs = Vec::new();
    for t in ts.tasks.iter().filter(|t| t.is_data_driven()) {
        while check_activation(t, tokens) {
            let mut deadline = Nanos::MAX;
            for &(ch, n) in &t.inputs {
                for stamp in tokens.reserve(ch, n) {
                    deadline = deadline.min(stamp);
                }
            }
            let seq = book.next_seq(t.id);
            jobs.push(make_job(ts, t.id, seq, now, Some(deadline))?);
        }
    }
    Ok(jobs)
}

/// Ready queues: a single shared queue (GLOBAL) or one per worker.
#[derive(Clone, Debug, Default)]
pub struct ReadyQueues {
    queues: Vec<Vec<Job>>,
}

impl ReadyQueues {
    pub fn new(count: usize) -> Self {
        ReadyQueues {
            queues: vec![Vec::new(); count],
        }
    }

    pub fn insert(&mut self, q: usize, job: Job) {
        self.queues[q].push(job);
    }

    /// Restores priority order; returns the number of displaced entries.
    pub fn sort(&mut self, q: usize) -> usize {
        sort_ready(&mut self.queues[q])
    }

    pub fn head_key(&self, q: usize) -> Option<PriorityKey> {
        self.queues[q].first().map(|j| j.key)
    }

    pub fn pop(&mut self, q: usize) -> Option<Job> {
        if self.queues[q].is_empty() {
            None
        } else {
            Some(self.queues[q].remove(0))
        }
    }

    pub fn len(&self, q: usize) -> usize {
        self.queues[q].len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(Vec::is_empty)
    }

    pub fn total_len(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }

    pub fn queue(&self, q: usize) -> &[Job] {
        &self.queues[q]
    }

    pub fn count(&self) -> usize {
        self.queues.len()
    }
}

/// Queue a worker draws from.
pub fn queue_of_worker(mapping: MappingScheme, w: WorkerId) -> usize {
    match mapping {
        MappingScheme::Global => 0,
        _ => w,
    }
}

/// Workers to notify after a scheduler step: every worker whose running job
/// (effective key) ranks below the head of the queue it draws from, lowest
/// priority first.
pub fn preemption_targets(
    mapping: MappingScheme,
    heads: &[Option<PriorityKey>],
    running: &[Option<PriorityKey>],
) -> Vec<WorkerId> {
    let mut targets: Vec<(PriorityKey, WorkerId)> = running
        .iter()
        .enumerate()
        .filter_map(|(w, k)| {
            let k = (*k)?;
            let head = heads[queue_of_worker(mapping, w)]?;
            head.higher_than(&k).then_some((k, w))
        })
        .collect();
    targets.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    targets.into_iter().map(|(_, w)| w).collect()
}

/// Idle workers to wake so that every queued job has a taker, lowest index
/// first.
pub fn idle_to_notify(mapping: MappingScheme, queue_len: &[usize], idle: &[bool]) -> Vec<WorkerId> {
    let mut budget = queue_len.to_vec();
    let mut out = Vec::new();
    for (w, &is_idle) in idle.iter().enumerate() {
        let q = queue_of_worker(mapping, w);
        if is_idle && budget[q] > 0 {
            budget[q] -= 1;
            out.push(w);
        }
    }
    out
}

/// Version a job is released with, ignoring busy accelerators only when no
/// candidate is free.
pub fn tentative_version(
    ts: &TaskSet,
    task: TaskId,
    registry: &AccelRegistry,
    settings: &SelectionSettings,
    now: Nanos,
) -> Result<VersionId> {
    let t = ts.task(task);
    let candidates = &ts.candidates[task.index()];
    let ctx = SelectionContext {
        now,
        settings,
        registry,
    };
    let method = ts.config.version_selection;
    let eligible = eligible_versions(candidates, &ts.versions, registry);
    match select_version(method, t, &ts.versions, &eligible, &ctx) {
        Ok(v) => Ok(v),
        Err(e) if eligible.len() == candidates.len() => Err(e),
        Err(_) => select_version(method, t, &ts.versions, candidates, &ctx),
    }
}

/// Outcome of trying to start a job at dispatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispatchOutcome {
    Run(VersionId),
    Blocked {
        version: VersionId,
        accel: AccelId,
        holder: JobId,
        inherited: bool,
    },
}

/// Re-validates the tentative version against accelerator availability and
/// acquires the accelerators of the final choice.
pub fn dispatch_job(
    ts: &TaskSet,
    job: &Job,
    registry: &mut AccelRegistry,
    settings: &SelectionSettings,
    now: Nanos,
) -> Result<DispatchOutcome> {
    let candidates = &ts.candidates[job.id.task.index()];
    let eligible = eligible_versions(candidates, &ts.versions, registry);
    let version = match job.version {
        Some(v) if eligible.contains(&v) => v,
        _ => tentative_version(ts, job.id.task, registry, settings, now)?,
    };
    let accels = &ts.version(version).accelerators;
    if accels.is_empty() {
        return Ok(DispatchOutcome::Run(version));
    }
    match registry.acquire(job.id, job.key, accels, ts.config.priority_inheritance)? {
        AcquireOutcome::Acquired => Ok(DispatchOutcome::Run(version)),
        AcquireOutcome::Blocked {
            accel,
            holder,
            inherited,
        } => Ok(DispatchOutcome::Blocked {
            version,
            accel,
            holder,
            inherited,
        }),
    }
}
