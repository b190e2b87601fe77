//! Discrete-event simulator. Runs the on-line scheduler logic (GLOBAL and
//! PARTITIONED) and the table dispatcher (OFFLINE) in virtual time, with
//! synthetic critical-section costs standing in for the middleware's own
//! overheads.
//!
//! Events with equal timestamps are processed in insertion order, so a run
//! is a pure function of the task set, the job model, the horizon and the
//! seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clock::VirtualClock;
use super::lock::SimLock;
use super::report::{build_report, RunReport};
use super::trace::{EventKind, Trace, TraceEvent};
use crate::error::{Error, Result};
use crate::graph::TokenLedger;
use crate::middleware::TaskSet;
use crate::model::{JobId, MappingScheme, SelectionSettings, TaskId, TaskKind, WaitingStrategy, WorkerId};
use crate::offline::{RowCursor, Slot};
use crate::online::{
    activate_graph_nodes, dispatch_job, idle_to_notify, make_job, preemption_targets,
    queue_of_worker, tentative_version, DispatchOutcome, Job, JobState, ReadyQueues, ReleaseBook,
};
use crate::priority::PriorityKey;
use crate::select::AccelRegistry;
use crate::time::{serde_duration, Nanos};

/// How actual execution times relate to the declared ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExecModel {
    /// Every job runs exactly its version's execution time.
    #[default]
    Fixed,
    /// Each job runs a fraction drawn uniformly from `[min_fraction, 1]`.
    Uniform { min_fraction: f64 },
}

/// A scripted `task_activate` call.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedActivation {
    pub task: String,
    #[serde(with = "serde_duration")]
    pub at: Nanos,
}

/// A scripted change of the global selection inputs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSwitch {
    #[serde(with = "serde_duration")]
    pub at: Nanos,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub execution_mode: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permission_mask: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery_level: Option<u64>,
}

/// Synthetic costs and execution-time model. All zero gives the ideal
/// schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimJobModel {
    /// Length of one worker critical section on a ready queue.
    #[serde(with = "serde_duration")]
    pub get_task_cost: Nanos,
    /// Scheduler cost per declared task, per tick.
    #[serde(with = "serde_duration")]
    pub sched_scan_cost_per_task: Nanos,
    /// Scheduler cost per queued element when sorting a queue.
    #[serde(with = "serde_duration")]
    pub sort_cost_per_element: Nanos,
    /// Charged on every preemption and every resume.
    #[serde(with = "serde_duration")]
    pub context_switch_cost: Nanos,
    pub exec: ExecModel,
    pub activations: Vec<ScriptedActivation>,
    pub mode_switches: Vec<ModeSwitch>,
}

impl SimJobModel {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if let ExecModel::Uniform { min_fraction } = self.exec {
            if !(min_fraction > 0.0 && min_fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "exec.min_fraction {min_fraction} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Horizon {
    Hyperperiods(u64),
    Nanos(Nanos),
}

impl Horizon {
    /// Horizon in ns; one hyperperiod when unspecified.
    pub fn resolve(horizon: Option<Horizon>, ts: &TaskSet) -> Result<Nanos> {
        match horizon {
            Some(Horizon::Nanos(n)) => Ok(n),
            Some(Horizon::Hyperperiods(k)) => ts
                .hyperperiod
                .and_then(|h| h.checked_mul(k))
                .ok_or(Error::HorizonRequired),
            None => ts.hyperperiod.ok_or(Error::HorizonRequired),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimOutcome {
    pub trace: Trace,
    pub report: RunReport,
}

/// Simulates `ts` up to `horizon`. No job is released at or after the
/// horizon; jobs released before it run to completion.
pub fn run_simulation(
    ts: &TaskSet,
    model: &SimJobModel,
    horizon: Option<Horizon>,
    seed: u64,
) -> Result<SimOutcome> {
    model.validate()?;
    let horizon = Horizon::resolve(horizon, ts)?;
    let mut sim = Sim::new(ts, model, horizon, seed)?;
    sim.run()?;
    let Sim {
        mut trace,
        warnings,
        ..
    } = sim;
    trace.finish();
    let mut report = build_report(&trace)?;
    report.backend = "sim".into();
    report.policy = ts.config.policy_label();
    report.preemptive = ts.config.preemptive;
    report.version_filter = ts.config.version_filter.label().into();
    report.workers = ts.config.worker_count;
    report.horizon_ns = horizon;
    report.seed = Some(seed);
    report.warnings = ts.warnings.iter().cloned().chain(warnings).collect();
    Ok(SimOutcome { trace, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Actor {
    Scheduler,
    Worker(WorkerId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Why {
    Fetch,
    Preempt,
    Complete,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum WState {
    Idle,
    Running { job: JobId, since: Nanos },
    /// Waiting for the queue lock; `paused` is the interrupted job.
    Locking { why: Why, paused: Option<JobId> },
    InCs,
    /// Finished executing but an output channel is full.
    BlockedPush { job: JobId },
}

#[derive(Clone, Debug)]
struct Worker {
    state: WState,
    stack: Vec<JobId>,
    /// Bumped whenever the running job is paused; stale completions are
    /// dropped.
    epoch: u64,
}

#[derive(Clone, Copy, Debug)]
enum Next {
    Start { job: JobId, preempted: Option<JobId> },
    Resume(JobId),
    Continue(JobId),
    Idle,
}

impl Next {
    fn label(self) -> &'static str {
        match self {
            Next::Start { preempted: None, .. } => "start",
            Next::Start { .. } => "preempt",
            Next::Resume(_) => "resume",
            Next::Continue(_) => "continue",
            Next::Idle => "idle",
        }
    }
}

#[derive(Clone, Debug)]
enum Ev {
    Tick(u64),
    ScanEnd,
    SchedCsEnd { queue: usize, released: Vec<JobId> },
    Activation(TaskId),
    ModeSwitch(usize),
    WorkerCsEnd { w: WorkerId, next: Next },
    Complete { w: WorkerId, epoch: u64 },
    TableStart { core: WorkerId, slot: Slot },
    TableComplete { core: WorkerId, job: JobId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SchedPhase {
    Idle,
    Scanning,
    Locking,
    InCs,
}

#[derive(Clone, Debug)]
struct Sched {
    phase: SchedPhase,
    tick: u64,
    began: Nanos,
    waited: Nanos,
    released: usize,
    /// PARTITIONED: jobs collected by the scan, per target queue.
    pending: BTreeMap<usize, Vec<Job>>,
    missed: Option<u64>,
}

struct Sim<'a> {
    ts: &'a TaskSet,
    model: &'a SimJobModel,
    horizon: Nanos,
    clock: VirtualClock,
    events: BTreeMap<(Nanos, u64), Ev>,
    next_seq: u64,
    trace: Trace,
    warnings: Vec<String>,
    rng: ChaCha8Rng,
    settings: SelectionSettings,
    book: ReleaseBook,
    tokens: TokenLedger,
    registry: AccelRegistry,
    queues: ReadyQueues,
    locks: Vec<SimLock<(Actor, Nanos)>>,
    workers: Vec<Worker>,
    sched: Sched,
    /// Dispatched and not yet completed.
    active: BTreeMap<JobId, Job>,
    /// Waiting for an accelerator.
    parked: BTreeMap<JobId, Job>,
    fraction: BTreeMap<JobId, f64>,
    remaining: BTreeMap<JobId, Nanos>,
    cursors: Vec<RowCursor<'a>>,
}

impl<'a> Sim<'a> {
    fn new(ts: &'a TaskSet, model: &'a SimJobModel, horizon: Nanos, seed: u64) -> Result<Self> {
        let workers = ts.config.worker_count;
        let mut sim = Sim {
            ts,
            model,
            horizon,
            clock: VirtualClock::default(),
            events: BTreeMap::new(),
            next_seq: 0,
            trace: Trace::new(ts.tasks.iter().map(|t| t.desc.name.clone()).collect()),
            warnings: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            settings: ts.selection.clone(),
            book: ReleaseBook::new(ts),
            tokens: TokenLedger::new(&ts.channels),
            registry: AccelRegistry::new(ts.accelerators.len()),
            queues: ReadyQueues::new(ts.queue_count()),
            locks: vec![SimLock::default(); ts.queue_count()],
            workers: vec![
                Worker {
                    state: WState::Idle,
                    stack: Vec::new(),
                    epoch: 0,
                };
                workers
            ],
            sched: Sched {
                phase: SchedPhase::Idle,
                tick: 0,
                began: 0,
                waited: 0,
                released: 0,
                pending: BTreeMap::new(),
                missed: None,
            },
            active: BTreeMap::new(),
            parked: BTreeMap::new(),
            fraction: BTreeMap::new(),
            remaining: BTreeMap::new(),
            cursors: Vec::new(),
        };
        for (i, sw) in model.mode_switches.iter().enumerate() {
            sim.schedule(sw.at, Ev::ModeSwitch(i));
        }
        if ts.config.is_online() {
            for a in &model.activations {
                let task = ts
                    .task_by_name(&a.task)
                    .ok_or_else(|| Error::unknown("task", &a.task))?;
                if !matches!(ts.task(task).desc.kind, TaskKind::Sporadic | TaskKind::Aperiodic) {
                    return Err(Error::Usage(format!(
                        "scripted activation of {}, which is neither sporadic nor aperiodic",
                        a.task
                    )));
                }
                sim.schedule(a.at, Ev::Activation(task));
            }
            if horizon > 0 {
                sim.schedule(0, Ev::Tick(0));
            }
        } else {
            let table = ts.table.as_ref().ok_or_else(|| Error::Internal("OFFLINE without table".into()))?;
            for core in 0..workers {
                let mut cursor = RowCursor::new(table, core);
                if let Some(slot) = cursor.next_slot(0, horizon) {
                    sim.schedule(slot.start, Ev::TableStart { core, slot });
                }
                sim.cursors.push(cursor);
            }
        }
        Ok(sim)
    }

    fn now(&self) -> Nanos {
        use super::clock::Clock;
        self.clock.now()
    }

    fn schedule(&mut self, t: Nanos, ev: Ev) {
        self.events.insert((t, self.next_seq), ev);
        self.next_seq += 1;
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.trace.push(ev);
    }

    fn label(&self, job: JobId) -> String {
        format!("{}#{}", self.ts.task(job.task).name(), job.seq)
    }

    fn tick_len(&self) -> Nanos {
        self.ts.tick.unwrap_or(Nanos::MAX)
    }

    fn run(&mut self) -> Result<()> {
        while let Some(((t, _), ev)) = self.events.pop_first() {
            self.clock.wait_until(t, WaitingStrategy::Sleep);
            self.handle(ev)?;
        }
        let stuck: Vec<String> = self
            .workers
            .iter()
            .filter_map(|w| match w.state {
                WState::BlockedPush { job } => Some(self.label(job)),
                _ => None,
            })
            .collect();
        if !stuck.is_empty() {
            self.warnings.push(format!(
                "run ended with jobs blocked on full output channels: {}",
                stuck.join(", ")
            ));
        }
        if !self.parked.is_empty() {
            self.warnings.push(format!("run ended with {} jobs waiting for accelerators", self.parked.len()));
        }
        Ok(())
    }

    fn handle(&mut self, ev: Ev) -> Result<()> {
        match ev {
            Ev::Tick(k) => self.on_tick(k),
            Ev::ScanEnd => self.on_scan_end(),
            Ev::SchedCsEnd { queue, released } => self.on_sched_cs_end(queue, released),
            Ev::Activation(task) => {
                let now = self.now();
                if now < self.horizon {
                    let arrival = self.book.activate(self.ts, task, now);
                    if arrival > now {
                        self.warnings.push(format!(
                            "sporadic task {} activated early at {now}; release delayed to {arrival}",
                            self.ts.task(task).name()
                        ));
                    }
                }
                Ok(())
            }
            Ev::ModeSwitch(i) => {
                let sw = &self.model.mode_switches[i];
                if let Some(m) = sw.execution_mode {
                    self.settings.execution_mode = m;
                }
                if let Some(m) = sw.permission_mask {
                    self.settings.permission_mask = m;
                }
                if let Some(b) = sw.battery_level {
                    self.settings.battery_level = b;
                }
                Ok(())
            }
            Ev::WorkerCsEnd { w, next } => self.on_worker_cs_end(w, next),
            Ev::Complete { w, epoch } => {
                if self.workers[w].epoch != epoch {
                    return Ok(());
                }
                let WState::Running { job, .. } = self.workers[w].state else {
                    return Err(Error::Internal(format!("completion on non-running worker {w}")));
                };
                self.remaining.insert(job, 0);
                self.try_finish(w, job)
            }
            Ev::TableStart { core, slot } => self.on_table_start(core, slot),
            Ev::TableComplete { core, job } => self.on_table_complete(core, job),
        }
    }

    // ---- scheduler context ----

    fn on_tick(&mut self, k: u64) -> Result<()> {
        let next = (k + 1).saturating_mul(self.tick_len());
        if next < self.horizon {
            self.schedule(next, Ev::Tick(k + 1));
        }
        if self.sched.phase != SchedPhase::Idle {
            let now = self.now();
            self.emit(TraceEvent::new(now, EventKind::Overrun).kv("tick", k));
            self.sched.missed = Some(k);
            return Ok(());
        }
        self.begin_tick(k)
    }

    fn begin_tick(&mut self, k: u64) -> Result<()> {
        let now = self.now();
        self.sched.tick = k;
        self.sched.began = now;
        self.sched.waited = 0;
        self.sched.released = 0;
        self.emit(TraceEvent::new(now, EventKind::TickBegin).kv("tick", k));
        if self.ts.config.mapping_scheme == MappingScheme::Global {
            self.sched.phase = SchedPhase::Locking;
            self.request_lock(0, Actor::Scheduler)
        } else {
            self.sched.phase = SchedPhase::Scanning;
            let scan = self.model.sched_scan_cost_per_task * self.ts.tasks.len() as Nanos;
            self.schedule(now + scan, Ev::ScanEnd);
            Ok(())
        }
    }

    /// Releases due at the current tick: timer and activation arrivals, then
    /// data-driven graph nodes.
    fn collect_releases(&mut self) -> Result<Vec<Job>> {
        let t = self.sched.tick * self.tick_len();
        let mut jobs = Vec::new();
        for (task, arrival) in self.book.due(t) {
            let seq = self.book.next_seq(task);
            jobs.push(make_job(self.ts, task, seq, arrival, None)?);
        }
        jobs.extend(activate_graph_nodes(self.ts, &mut self.tokens, &mut self.book, t)?);
        let now = self.now();
        for job in &mut jobs {
            let v = tentative_version(self.ts, job.id.task, &self.registry, &self.settings, now)?;
            job.version = Some(v);
            let f = match self.model.exec {
                ExecModel::Fixed => 1.0,
                ExecModel::Uniform { min_fraction } => self.rng.gen_range(min_fraction..=1.0),
            };
            self.fraction.insert(job.id, f);
            let ev = TraceEvent::new(job.arrival, EventKind::ReleaseTheoretical)
                .job(job.id)
                .kv("deadline", job.deadline)
                .kv("version", &self.ts.version(v).desc.name);
            self.trace.push(ev);
        }
        self.sched.released += jobs.len();
        Ok(jobs)
    }

    fn insert_jobs(&mut self, queue: usize, jobs: Vec<Job>) -> (Vec<JobId>, Nanos) {
        let ids = jobs.iter().map(|j| j.id).collect();
        for j in jobs {
            self.queues.insert(queue, j);
        }
        self.queues.sort(queue);
        (ids, self.model.sort_cost_per_element * self.queues.len(queue) as Nanos)
    }

    fn sched_granted(&mut self, queue: usize) -> Result<()> {
        self.sched.phase = SchedPhase::InCs;
        let now = self.now();
        match self.ts.config.mapping_scheme {
            MappingScheme::Global => {
                let jobs = self.collect_releases()?;
                let (ids, sort) = self.insert_jobs(0, jobs);
                let cost = sort + self.model.sched_scan_cost_per_task * self.ts.tasks.len() as Nanos;
                self.schedule(now + cost, Ev::SchedCsEnd { queue: 0, released: ids });
            }
            _ => {
                let jobs = self.sched.pending.remove(&queue).unwrap_or_default();
                let (ids, cost) = self.insert_jobs(queue, jobs);
                self.schedule(now + cost, Ev::SchedCsEnd { queue, released: ids });
            }
        }
        Ok(())
    }

    fn on_scan_end(&mut self) -> Result<()> {
        for job in self.collect_releases()? {
            let q = self.ts.queue_of(job.id.task);
            self.sched.pending.entry(q).or_default().push(job);
        }
        self.next_partition_queue()
    }

    fn next_partition_queue(&mut self) -> Result<()> {
        match self.sched.pending.keys().next().copied() {
            Some(q) => {
                self.sched.phase = SchedPhase::Locking;
                self.request_lock(q, Actor::Scheduler)
            }
            None => self.finish_tick(),
        }
    }

    fn on_sched_cs_end(&mut self, queue: usize, released: Vec<JobId>) -> Result<()> {
        let now = self.now();
        for j in released {
            self.emit(TraceEvent::new(now, EventKind::ReleaseEffective).job(j));
        }
        self.release_lock(queue)?;
        self.notify(&[queue]);
        match self.ts.config.mapping_scheme {
            MappingScheme::Global => self.finish_tick(),
            _ => self.next_partition_queue(),
        }
    }

    fn finish_tick(&mut self) -> Result<()> {
        let now = self.now();
        let sched = now - self.sched.began - self.sched.waited;
        let ev = TraceEvent::new(now, EventKind::TickEnd)
            .kv("released", self.sched.released)
            .kv("sched", sched)
            .kv("wait", self.sched.waited);
        self.emit(ev);
        self.sched.phase = SchedPhase::Idle;
        match self.sched.missed.take() {
            Some(k) => self.begin_tick(k),
            None => Ok(()),
        }
    }

    /// Wakes idle workers for queued work and, when preemptive, signals the
    /// workers running lower-priority jobs than the head of `queues`.
    fn notify(&mut self, queues: &[usize]) {
        let mapping = self.ts.config.mapping_scheme;
        let qc = self.queues.count();
        let lens: Vec<usize> = (0..qc)
            .map(|q| if queues.contains(&q) { self.queues.len(q) } else { 0 })
            .collect();
        let idle: Vec<bool> = self.workers.iter().map(|w| w.state == WState::Idle).collect();
        let mut targets = idle_to_notify(mapping, &lens, &idle);
        if self.ts.config.preemptive {
            let heads: Vec<Option<PriorityKey>> = (0..qc)
                .map(|q| if queues.contains(&q) { self.queues.head_key(q) } else { None })
                .collect();
            let running: Vec<Option<PriorityKey>> = self
                .workers
                .iter()
                .map(|w| match w.state {
                    WState::Running { job, .. } => Some(self.effective_key(job)),
                    _ => None,
                })
                .collect();
            targets.extend(preemption_targets(mapping, &heads, &running));
        }
        for w in targets {
            self.deliver(w);
        }
    }

    fn effective_key(&self, job: JobId) -> PriorityKey {
        self.registry.effective_key(job, self.active[&job].key)
    }

    // ---- locks ----

    fn request_lock(&mut self, queue: usize, actor: Actor) -> Result<()> {
        let now = self.now();
        if self.locks[queue].request((actor, now), now) {
            self.granted(queue, actor, now)?;
        }
        Ok(())
    }

    fn release_lock(&mut self, queue: usize) -> Result<()> {
        if let Some(((actor, asked), _)) = self.locks[queue].release() {
            self.granted(queue, actor, asked)?;
        }
        Ok(())
    }

    fn granted(&mut self, queue: usize, actor: Actor, asked: Nanos) -> Result<()> {
        let now = self.now();
        let wait = now - asked;
        let worker = match actor {
            Actor::Scheduler => {
                self.sched.waited += wait;
                None
            }
            Actor::Worker(w) => Some(w),
        };
        self.emit(
            TraceEvent::new(now, EventKind::LockWait)
                .on(worker)
                .kv("lock", queue)
                .kv("dur", wait),
        );
        match actor {
            Actor::Scheduler => self.sched_granted(queue),
            Actor::Worker(w) => self.worker_granted(w),
        }
    }

    // ---- workers ----

    fn deliver(&mut self, w: WorkerId) {
        let now = self.now();
        let why = match self.workers[w].state {
            WState::Idle => (Why::Fetch, None),
            WState::Running { job, since } => {
                let ran = now.saturating_sub(since);
                let left = self.remaining.get_mut(&job).expect("running job has remaining time");
                *left = left.saturating_sub(ran);
                self.workers[w].epoch += 1;
                (Why::Preempt, Some(job))
            }
            _ => return,
        };
        self.workers[w].state = WState::Locking {
            why: why.0,
            paused: why.1,
        };
        let q = queue_of_worker(self.ts.config.mapping_scheme, w);
        // a grant only schedules events, so it cannot fail here
        let _ = self.request_lock(q, Actor::Worker(w));
    }

    fn worker_granted(&mut self, w: WorkerId) -> Result<()> {
        let WState::Locking { paused, .. } = self.workers[w].state else {
            return Err(Error::Internal(format!("worker {w} granted without request")));
        };
        self.workers[w].state = WState::InCs;
        let now = self.now();
        let q = queue_of_worker(self.ts.config.mapping_scheme, w);
        let next = loop {
            let top = paused.or_else(|| self.workers[w].stack.last().copied());
            let take = match (self.queues.head_key(q), top) {
                (Some(_), None) => true,
                (Some(h), Some(t)) => h.higher_than(&self.effective_key(t)),
                (None, _) => false,
            };
            if take {
                let mut job = self.queues.pop(q).expect("head");
                match dispatch_job(self.ts, &job, &mut self.registry, &self.settings, now)? {
                    DispatchOutcome::Run(v) => {
                        job.version = Some(v);
                        job.worker = Some(w);
                        for a in &self.ts.version(v).accelerators {
                            let name = &self.ts.accelerators[a.index()].name;
                            let ev = TraceEvent::new(now, EventKind::AccelAcquire)
                                .job(job.id)
                                .worker(w)
                                .kv("accel", name);
                            self.trace.push(ev);
                        }
                        let id = job.id;
                        self.active.insert(id, job);
                        if let Some(p) = paused {
                            self.set_state(p, JobState::Preempted);
                            self.workers[w].stack.push(p);
                        }
                        break Next::Start { job: id, preempted: paused };
                    }
                    DispatchOutcome::Blocked {
                        accel,
                        holder,
                        inherited,
                        ..
                    } => {
                        self.registry.add_waiter(accel, job.id);
                        let ev = TraceEvent::new(now, EventKind::AccelBlock)
                            .job(job.id)
                            .worker(w)
                            .kv("accel", &self.ts.accelerators[accel.index()].name)
                            .kv("holder", self.label(holder))
                            .kv("inherited", inherited);
                        self.emit(ev);
                        self.parked.insert(job.id, job);
                    }
                }
            } else if let Some(p) = paused {
                break Next::Continue(p);
            } else if let Some(t) = self.workers[w].stack.pop() {
                break Next::Resume(t);
            } else {
                break Next::Idle;
            }
        };
        let g = self.model.get_task_cost;
        let ev = TraceEvent::new(now, EventKind::GetTask)
            .worker(w)
            .kv("dur", g)
            .kv("outcome", next.label());
        self.emit(ev);
        self.schedule(now + g, Ev::WorkerCsEnd { w, next });
        Ok(())
    }

    fn set_state(&mut self, job: JobId, state: JobState) {
        if let Some(j) = self.active.get_mut(&job) {
            j.state = state;
        }
    }

    fn run_on(&mut self, w: WorkerId, job: JobId, since: Nanos) {
        self.set_state(job, JobState::Running);
        self.workers[w].state = WState::Running { job, since };
        let epoch = self.workers[w].epoch;
        let left = self.remaining[&job];
        self.schedule(since + left, Ev::Complete { w, epoch });
    }

    fn exec_time(&self, job: &Job) -> Nanos {
        let v = self.ts.version(job.version.expect("dispatched job has a version"));
        let f = self.fraction.get(&job.id).copied().unwrap_or(1.0);
        ((v.exec_time() as f64 * f).round() as Nanos).max(1)
    }

    fn on_worker_cs_end(&mut self, w: WorkerId, next: Next) -> Result<()> {
        let now = self.now();
        let q = queue_of_worker(self.ts.config.mapping_scheme, w);
        self.release_lock(q)?;
        let ctx = self.model.context_switch_cost;
        match next {
            Next::Start { job, preempted } => {
                let cost = if let Some(p) = preempted {
                    let ev = TraceEvent::new(now, EventKind::Preempt)
                        .job(p)
                        .worker(w)
                        .kv("by", self.label(job))
                        .kv("cost", ctx);
                    self.emit(ev);
                    ctx
                } else {
                    0
                };
                let begin = now + cost;
                let j = &self.active[&job];
                let exec = self.exec_time(j);
                let version = self.ts.version(j.version.expect("dispatched")).desc.name.clone();
                let claimed = j.claimed.clone();
                self.remaining.insert(job, exec);
                self.emit(
                    TraceEvent::new(begin, EventKind::JobStart)
                        .job(job)
                        .worker(w)
                        .kv("version", version),
                );
                for &(ch, n) in &claimed {
                    self.tokens.pop_reserved(ch, n);
                }
                self.run_on(w, job, begin);
                if !claimed.is_empty() {
                    self.unblock_producers()?;
                }
            }
            Next::Resume(job) => {
                self.emit(TraceEvent::new(now, EventKind::Resume).job(job).worker(w).kv("cost", ctx));
                self.run_on(w, job, now + ctx);
            }
            Next::Continue(job) => self.run_on(w, job, now),
            Next::Idle => self.workers[w].state = WState::Idle,
        }
        Ok(())
    }

    fn outputs_fit(&self, job: JobId) -> bool {
        self.ts
            .task(job.task)
            .outputs
            .iter()
            .all(|&(ch, n)| self.tokens.space(ch) >= n as usize)
    }

    fn try_finish(&mut self, w: WorkerId, job: JobId) -> Result<()> {
        if !self.outputs_fit(job) {
            self.workers[w].state = WState::BlockedPush { job };
            return Ok(());
        }
        let deadline = self.active[&job].deadline;
        for &(ch, n) in &self.ts.task(job.task).outputs {
            self.tokens.push(ch, n, deadline);
        }
        self.finish(w, job)
    }

    fn unblock_producers(&mut self) -> Result<()> {
        for w in 0..self.workers.len() {
            if let WState::BlockedPush { job } = self.workers[w].state {
                if self.outputs_fit(job) {
                    self.try_finish(w, job)?;
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self, w: WorkerId, id: JobId) -> Result<()> {
        let now = self.now();
        let job = self.active.remove(&id).expect("finished job is active");
        self.remaining.remove(&id);
        self.fraction.remove(&id);
        self.emit(
            TraceEvent::new(now, EventKind::JobComplete)
                .job(id)
                .worker(w)
                .kv("response", now - job.arrival),
        );
        if now > job.deadline {
            let ev = TraceEvent::new(now, EventKind::DeadlineMiss)
                .job(id)
                .worker(w)
                .kv("deadline", job.deadline)
                .kv("lateness", now - job.deadline);
            self.emit(ev);
        }
        let (freed, woken) = self.registry.release(id);
        for a in freed {
            let ev = TraceEvent::new(now, EventKind::AccelRelease)
                .job(id)
                .worker(w)
                .kv("accel", &self.ts.accelerators[a.index()].name);
            self.emit(ev);
        }
        let mut touched = Vec::new();
        for j in woken {
            let job = self.parked.remove(&j).expect("woken job is parked");
            let q = self.ts.queue_of(j.task);
            self.queues.insert(q, job);
            self.queues.sort(q);
            if !touched.contains(&q) {
                touched.push(q);
            }
        }
        self.workers[w].state = WState::Locking {
            why: Why::Complete,
            paused: None,
        };
        let q = queue_of_worker(self.ts.config.mapping_scheme, w);
        self.request_lock(q, Actor::Worker(w))?;
        if !touched.is_empty() {
            self.notify(&touched);
        }
        Ok(())
    }

    // ---- table dispatcher ----

    fn on_table_start(&mut self, core: WorkerId, slot: Slot) -> Result<()> {
        let now = self.now();
        let task = slot.entry.task;
        let seq = self.book.next_seq(task);
        let mut job = make_job(self.ts, task, seq, slot.planned, None)?;
        job.version = Some(slot.entry.version);
        job.worker = Some(core);
        job.state = JobState::Running;
        let f = match self.model.exec {
            ExecModel::Fixed => 1.0,
            ExecModel::Uniform { min_fraction } => self.rng.gen_range(min_fraction..=1.0),
        };
        self.fraction.insert(job.id, f);
        let version = &self.ts.version(slot.entry.version).desc.name;
        let ev = TraceEvent::new(slot.planned, EventKind::ReleaseTheoretical)
            .job(job.id)
            .kv("deadline", job.deadline)
            .kv("version", version);
        self.trace.push(ev);
        self.emit(TraceEvent::new(slot.planned, EventKind::ReleaseEffective).job(job.id));
        if slot.overrun() > 0 {
            self.emit(
                TraceEvent::new(now, EventKind::Overrun)
                    .job(job.id)
                    .worker(core)
                    .kv("late", slot.overrun()),
            );
        }
        let ev = TraceEvent::new(now, EventKind::JobStart)
            .job(job.id)
            .worker(core)
            .kv("version", version);
        self.trace.push(ev);
        let exec = self.exec_time(&job);
        let id = job.id;
        self.active.insert(id, job);
        self.schedule(now + exec, Ev::TableComplete { core, job: id });
        Ok(())
    }

    fn on_table_complete(&mut self, core: WorkerId, id: JobId) -> Result<()> {
        let now = self.now();
        let job = self.active.remove(&id).expect("table job is active");
        self.fraction.remove(&id);
        self.emit(
            TraceEvent::new(now, EventKind::JobComplete)
                .job(id)
                .worker(core)
                .kv("response", now - job.arrival),
        );
        if now > job.deadline {
            let ev = TraceEvent::new(now, EventKind::DeadlineMiss)
                .job(id)
                .worker(core)
                .kv("deadline", job.deadline)
                .kv("lateness", now - job.deadline);
            self.emit(ev);
        }
        if let Some(slot) = self.cursors[core].next_slot(now, self.horizon) {
            self.schedule(slot.start, Ev::TableStart { core, slot });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::middleware::Middleware;
    use crate::model::{PolicyConfig, PriorityAssignment, TaskDescriptor, VSelect, VersionDescriptor};
    use crate::offline::{ScheduleTable, TableEntry};
    use crate::time::ms;

    fn single(wcet: Nanos, mapping: MappingScheme) -> Middleware {
        let mut mw = Middleware::init(PolicyConfig::new(mapping, PriorityAssignment::Edf, 1)).unwrap();
        let t = mw.task_decl(TaskDescriptor::periodic("t", ms(10)).on_core(0)).unwrap();
        mw.version_decl(t, VersionDescriptor::new("v", wcet, VSelect::Unspecified)).unwrap();
        mw
    }

    #[test]
    fn trivially_schedulable() {
        let out = single(ms(4), MappingScheme::Global)
            .simulate(&SimJobModel::zero(), Some(Horizon::Nanos(ms(30))), 1)
            .unwrap();
        let t = out.report.task("t").unwrap();
        assert_eq!((t.released, t.completed, t.misses), (3, 3, 0));
        assert_eq!((t.response.min, t.response.max), (ms(4), ms(4)));
        assert_eq!(out.report.overheads.get_task.total, 0);
        assert_eq!(out.report.overheads.release.max, 0);
        assert_eq!(out.report.overheads.scheduling.max, 0);
    }

    #[test]
    fn overloaded_task_misses_every_job() {
        let out = single(ms(12), MappingScheme::Partitioned)
            .simulate(&SimJobModel::zero(), Some(Horizon::Nanos(ms(30))), 1)
            .unwrap();
        let t = out.report.task("t").unwrap();
        assert_eq!(t.misses, 3);
        assert_eq!(t.completed, 3, "released jobs drain after the horizon");
    }

    #[test]
    fn same_seed_same_trace() {
        let mut mw = single(ms(4), MappingScheme::Global);
        let t2 = mw.task_decl(TaskDescriptor::periodic("u", ms(15))).unwrap();
        mw.version_decl(t2, VersionDescriptor::new("v", ms(6), VSelect::Unspecified)).unwrap();
        let model = SimJobModel {
            get_task_cost: 1_000,
            sched_scan_cost_per_task: 500,
            exec: ExecModel::Uniform { min_fraction: 0.5 },
            ..Default::default()
        };
        let a = mw.simulate(&model, Some(Horizon::Hyperperiods(2)), 9).unwrap();
        let b = mw.simulate(&model, Some(Horizon::Hyperperiods(2)), 9).unwrap();
        assert_eq!(a.trace.to_csv_string(), b.trace.to_csv_string());
        let c = mw.simulate(&model, Some(Horizon::Hyperperiods(2)), 10).unwrap();
        assert_ne!(a.trace.to_csv_string(), c.trace.to_csv_string());
    }

    #[test]
    fn horizon_overflow_requires_explicit_value() {
        let mut mw = Middleware::init(PolicyConfig::new(MappingScheme::Global, PriorityAssignment::Edf, 1)).unwrap();
        for (i, p) in [u64::MAX - 1, u64::MAX - 2].into_iter().enumerate() {
            let t = mw.task_decl(TaskDescriptor::periodic(&format!("t{i}"), p)).unwrap();
            mw.version_decl(t, VersionDescriptor::new("v", 1, VSelect::Unspecified)).unwrap();
        }
        assert!(matches!(
            mw.simulate(&SimJobModel::zero(), None, 0),
            Err(Error::HorizonRequired)
        ));
        assert!(mw.simulate(&SimJobModel::zero(), Some(Horizon::Nanos(ms(1))), 0).is_ok());
    }

    #[test]
    fn table_entry_overrun_starts_late() {
        let mut mw = Middleware::init(PolicyConfig::new(MappingScheme::Offline, PriorityAssignment::Edf, 1)).unwrap();
        let a = mw.task_decl(TaskDescriptor::periodic("A", ms(20)).on_core(0)).unwrap();
        let va = mw
            .version_decl(a, VersionDescriptor::new("v", ms(8), VSelect::Unspecified).with_exec_time(ms(13)))
            .unwrap();
        let b = mw.task_decl(TaskDescriptor::periodic("B", ms(20)).on_core(0)).unwrap();
        let vb = mw.version_decl(b, VersionDescriptor::new("v", ms(5), VSelect::Unspecified)).unwrap();
        mw.set_table(ScheduleTable {
            period: ms(20),
            cores: vec![vec![
                TableEntry { task: a, version: va, offset: 0 },
                TableEntry { task: b, version: vb, offset: ms(10) },
            ]],
        })
        .unwrap();
        let out = mw.simulate(&SimJobModel::zero(), Some(Horizon::Nanos(ms(20))), 0).unwrap();
        let over: Vec<_> = out.trace.of_kind(EventKind::Overrun).collect();
        assert_eq!(over.len(), 1);
        assert_eq!(over[0].t, ms(13));
        assert_eq!(over[0].get_u64("late"), Some(ms(3)));
    }

    #[test]
    fn preempted_job_resumes_on_its_worker() {
        let mut mw = Middleware::init(PolicyConfig::new(MappingScheme::Global, PriorityAssignment::Edf, 1)).unwrap();
        let lo = mw.task_decl(TaskDescriptor::periodic("lo", ms(20))).unwrap();
        mw.version_decl(lo, VersionDescriptor::new("v", ms(15), VSelect::Unspecified)).unwrap();
        let hi = mw
            .task_decl(TaskDescriptor::periodic("hi", ms(10)).with_deadline(ms(5)))
            .unwrap();
        mw.version_decl(hi, VersionDescriptor::new("v", ms(1), VSelect::Unspecified)).unwrap();
        let model = SimJobModel {
            context_switch_cost: 100,
            ..Default::default()
        };
        let out = mw.simulate(&model, Some(Horizon::Nanos(ms(20))), 0).unwrap();
        assert_eq!(out.trace.count(EventKind::Preempt), 1);
        assert_eq!(out.trace.count(EventKind::Resume), 1);
        assert_eq!(out.report.overheads.preemption_overhead, 200);
        assert_eq!(out.report.misses, 0);
        // lo: 1..10, preempted, hi 10.0001..11.0001, lo resumes at 11.0002
        assert_eq!(out.report.task("lo").unwrap().response.max, ms(17) + 200);
    }
}
