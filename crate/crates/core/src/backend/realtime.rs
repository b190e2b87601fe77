//! Threaded backend: one scheduler thread plus one thread per worker, each
//! pinned to its own processor when the host allows it.
//!
//! Preemption is cooperative. The scheduler raises a flag on the target
//! worker; the running body notices it at its next yield point (every
//! channel operation, every explicit `yield_point`, and periodically inside
//! synthetic busy-work) and the higher-priority job runs nested on the same
//! thread. The preempted job resumes when the nested one completes and no
//! better job is queued, which gives the same stack discipline as the
//! simulator.

use std::any::Any;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::warn;

use super::clock::{Clock, MonotonicClock};
use super::lock::FifoLock;
use super::report::{build_report, RunReport};
use super::trace::{EventKind, Trace, TraceEvent};
use crate::error::{Error, Result};
use crate::graph::{Channel, JobScope, Token};
use crate::middleware::TaskSet;
use crate::model::{
    ChannelId, JobBody, JobId, MappingScheme, SelectionSettings, StaticArgs, TaskId, VersionId,
    WaitingStrategy, WorkerId,
};
use crate::offline::RowCursor;
use crate::online::{
    activate_graph_nodes, dispatch_job, idle_to_notify, make_job, preemption_targets,
    queue_of_worker, tentative_version, DispatchOutcome, Job, ReleaseBook,
};
use crate::priority::{sort_ready, PriorityKey};
use crate::select::AccelRegistry;
use crate::time::{Nanos, NS_PER_MS, NS_PER_US};

/// Host-facing knobs of the threaded backend.
#[derive(Clone, Debug)]
pub struct RealtimeOptions {
    /// Run even when the host has fewer processors than contexts.
    pub oversubscribe: bool,
    pub pin_threads: bool,
    pub lock_memory: bool,
    /// No job is released at or after this instant.
    pub release_until: Option<Nanos>,
    /// How long `stop` waits for in-flight jobs before closing channels.
    pub drain_timeout: Duration,
}

impl Default for RealtimeOptions {
    fn default() -> Self {
        RealtimeOptions {
            oversubscribe: false,
            pin_threads: true,
            lock_memory: true,
            release_until: None,
            drain_timeout: Duration::from_secs(10),
        }
    }
}

/// Host facts relevant to shielded real-time execution.
#[derive(Clone, Debug, Default)]
pub struct Preflight {
    pub cpus: Vec<usize>,
    /// Content of `/sys/devices/system/cpu/isolated`.
    pub isolated: Option<String>,
    pub rt_runtime_us: Option<i64>,
    pub warnings: Vec<String>,
}

/// Inspects the host without changing anything.
pub fn preflight() -> Preflight {
    let mut p = Preflight {
        cpus: allowed_cpus(),
        ..Default::default()
    };
    p.isolated = std::fs::read_to_string("/sys/devices/system/cpu/isolated")
        .ok()
        .map(|s| s.trim().to_string());
    if p.isolated.as_deref().unwrap_or("").is_empty() {
        p.warnings
            .push("no isolated processors (isolcpus); workers share cores with the system".into());
    }
    p.rt_runtime_us = std::fs::read_to_string("/proc/sys/kernel/sched_rt_runtime_us")
        .ok()
        .and_then(|s| s.trim().parse().ok());
    if let Some(us) = p.rt_runtime_us {
        if us >= 0 {
            p.warnings.push(format!(
                "sched_rt_runtime_us={us}: real-time throttling is active"
            ));
        }
    }
    p
}

/// Processors this process may run on.
pub fn allowed_cpus() -> Vec<usize> {
    // SAFETY: an all-zero cpu_set_t is a valid empty set and the kernel only
    // writes within the size passed.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if libc::sched_getaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &mut set) != 0 {
            let n = std::thread::available_parallelism().map_or(1, |n| n.get());
            return (0..n).collect();
        }
        (0..libc::CPU_SETSIZE as usize)
            .filter(|&c| libc::CPU_ISSET(c, &set))
            .collect()
    }
}

fn pin_current_thread(cpu: usize) -> std::io::Result<()> {
    // SAFETY: `set` is a valid cpu_set_t; pid 0 designates the calling thread.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(std::io::Error::last_os_error());
        }
    }
    Ok(())
}

fn lock_all_memory() -> std::io::Result<()> {
    // SAFETY: mlockall has no memory-safety preconditions.
    if unsafe { libc::mlockall(libc::MCL_CURRENT | libc::MCL_FUTURE) } != 0 {
        return Err(std::io::Error::last_os_error());
    }
    Ok(())
}

fn unlock_all_memory() {
    // SAFETY: munlockall has no preconditions.
    unsafe { libc::munlockall() };
}

struct Flags {
    idle: bool,
    wake: bool,
}

struct Notifier {
    flags: Mutex<Flags>,
    cv: Condvar,
    preempt: AtomicBool,
}

impl Notifier {
    fn new() -> Self {
        Notifier {
            flags: Mutex::new(Flags {
                idle: false,
                wake: false,
            }),
            cv: Condvar::new(),
            preempt: AtomicBool::new(false),
        }
    }

    fn flags(&self) -> MutexGuard<'_, Flags> {
        self.flags.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn wake(&self) {
        let mut f = self.flags();
        f.wake = true;
        f.idle = false;
        drop(f);
        self.cv.notify_all();
    }
}

/// State guarded by a plain mutex, always taken after a queue lock.
struct Registry {
    accel: AccelRegistry,
    settings: SelectionSettings,
    /// Innermost running job per worker.
    running: Vec<Option<JobId>>,
    keys: BTreeMap<JobId, PriorityKey>,
    parked: BTreeMap<JobId, Job>,
}

impl Registry {
    fn effective(&self, job: JobId) -> Option<PriorityKey> {
        self.keys.get(&job).map(|k| self.accel.effective_key(job, *k))
    }
}

struct Shared {
    ts: Arc<TaskSet>,
    clock: MonotonicClock,
    queues: Vec<FifoLock<Vec<Job>>>,
    registry: Mutex<Registry>,
    channels: Vec<Channel>,
    notifiers: Vec<Notifier>,
    activations: Mutex<Vec<(TaskId, Nanos)>>,
    stop: AtomicBool,
    sched_done: AtomicBool,
    in_flight: AtomicUsize,
    warnings: Mutex<Vec<String>>,
    stop_at: Option<Nanos>,
    pin_threads: bool,
}

impl Shared {
    fn registry(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn warn(&self, msg: String) {
        warn!("{msg}");
        self.warnings.lock().unwrap_or_else(|e| e.into_inner()).push(msg);
    }

    fn waiting(&self) -> WaitingStrategy {
        self.ts.config.waiting_strategy
    }

    fn drained(&self) -> bool {
        self.sched_done.load(Ordering::Acquire) && self.in_flight.load(Ordering::Acquire) == 0
    }

    /// Sleeps until `t` unless a stop request arrives first; `false` on stop.
    fn wait_until_or_stop(&self, t: Nanos) -> bool {
        loop {
            if self.stop.load(Ordering::Acquire) {
                return false;
            }
            let now = self.clock.now();
            if now >= t {
                return true;
            }
            self.clock.wait_until(t.min(now + NS_PER_MS), self.waiting());
        }
    }

    /// Wakes idle workers for the jobs in `touched` queues and raises the
    /// preemption flag of workers running lower-priority jobs.
    fn notify(&self, touched: &[(usize, usize, Option<PriorityKey>)]) {
        let mapping = self.ts.config.mapping_scheme;
        let qc = self.queues.len();
        let mut lens = vec![0; qc];
        let mut heads = vec![None; qc];
        for &(q, len, head) in touched {
            lens[q] = len;
            heads[q] = head;
        }
        let idle: Vec<bool> = self.notifiers.iter().map(|n| n.flags().idle).collect();
        for w in idle_to_notify(mapping, &lens, &idle) {
            self.notifiers[w].wake();
        }
        if self.ts.config.preemptive {
            let running: Vec<Option<PriorityKey>> = {
                let reg = self.registry();
                reg.running.iter().map(|r| r.and_then(|j| reg.effective(j))).collect()
            };
            for w in preemption_targets(mapping, &heads, &running) {
                self.notifiers[w].preempt.store(true, Ordering::Release);
            }
        }
    }

    fn wake_all(&self) {
        for n in &self.notifiers {
            n.wake();
        }
    }
}

/// Handle given to job bodies.
pub struct JobContext<'a> {
    worker: &'a mut WorkerCtx,
    job: JobId,
    version: VersionId,
    deadline: Nanos,
    static_args: Option<StaticArgs>,
}

impl JobContext<'_> {
    /// Nanoseconds since the run started.
    pub fn now(&self) -> Nanos {
        self.worker.shared.clock.now()
    }

    pub fn job(&self) -> JobId {
        self.job
    }

    pub fn version(&self) -> VersionId {
        self.version
    }

    pub fn worker(&self) -> WorkerId {
        self.worker.id
    }

    pub fn deadline(&self) -> Nanos {
        self.deadline
    }

    pub fn static_args<T: Any>(&self) -> Option<&T> {
        self.static_args.as_ref()?.downcast_ref::<T>()
    }

    /// Pushes one element, blocking while the channel is full.
    pub fn push(&mut self, ch: ChannelId, payload: Vec<u8>) -> Result<()> {
        self.yield_point();
        let shared = Arc::clone(&self.worker.shared);
        let c = shared
            .channels
            .get(ch.index())
            .ok_or_else(|| Error::unknown("channel", ch))?;
        c.push(payload, self.deadline)?;
        self.yield_point();
        Ok(())
    }

    /// Pops one element, blocking while the channel is empty.
    pub fn pop(&mut self, ch: ChannelId) -> Result<Vec<u8>> {
        self.yield_point();
        let shared = Arc::clone(&self.worker.shared);
        let c = shared
            .channels
            .get(ch.index())
            .ok_or_else(|| Error::unknown("channel", ch))?;
        let tok = c.pop()?;
        self.yield_point();
        Ok(tok.payload)
    }

    /// Safe point: lets a pending preemption run the higher-priority job.
    pub fn yield_point(&mut self) {
        if self.worker.shared.notifiers[self.worker.id]
            .preempt
            .swap(false, Ordering::AcqRel)
        {
            if let Err(e) = self.worker.dispatch_loop(Some(self.job)) {
                self.worker.shared.warn(format!("preemption handling failed: {e}"));
            }
        }
    }

    pub fn set_execution_mode(&mut self, mode: u64) {
        self.worker.shared.registry().settings.execution_mode = mode;
    }

    pub fn set_permission_mask(&mut self, mask: u64) {
        self.worker.shared.registry().settings.permission_mask = mask;
    }

    /// Busy-works for `d` ns of own execution; time spent in nested jobs is
    /// not counted.
    pub fn spin_for(&mut self, d: Nanos) {
        const SLICE: Nanos = 20 * NS_PER_US;
        let mut left = d;
        while left > 0 {
            let step = left.min(SLICE);
            let t0 = self.now();
            while self.now() - t0 < step {
                std::hint::spin_loop();
            }
            left -= step;
            self.yield_point();
        }
    }
}

struct WorkerCtx {
    id: WorkerId,
    shared: Arc<Shared>,
    trace: Vec<TraceEvent>,
}

impl WorkerCtx {
    fn queue(&self) -> usize {
        queue_of_worker(self.shared.ts.config.mapping_scheme, self.id)
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.trace.push(ev.worker(self.id));
    }

    /// One get-task critical section: takes the queue head if it outranks
    /// `current` (or if nothing runs), dispatching past jobs blocked on
    /// accelerators.
    fn get_task(&mut self, current: Option<JobId>) -> Result<Option<Job>> {
        let shared = Arc::clone(&self.shared);
        let q = self.queue();
        let (mut queue, waited) = shared.queues[q].lock_timed()?;
        let t0 = shared.clock.now();
        let mut blocked = Vec::new();
        let picked = loop {
            let Some(head) = queue.first().map(|j| j.key) else {
                break None;
            };
            let mut reg = shared.registry();
            let outranks = match current.and_then(|c| reg.effective(c)) {
                Some(k) => head.higher_than(&k),
                None => true,
            };
            if !outranks {
                break None;
            }
            let mut job = queue.remove(0);
            let settings = reg.settings.clone();
            match dispatch_job(&shared.ts, &job, &mut reg.accel, &settings, t0)? {
                DispatchOutcome::Run(v) => {
                    job.version = Some(v);
                    job.worker = Some(self.id);
                    reg.keys.insert(job.id, job.key);
                    reg.running[self.id] = Some(job.id);
                    break Some(job);
                }
                DispatchOutcome::Blocked {
                    accel,
                    holder,
                    inherited,
                    ..
                } => {
                    reg.accel.add_waiter(accel, job.id);
                    blocked.push((job.id, accel, holder, inherited));
                    reg.parked.insert(job.id, job);
                }
            }
        };
        drop(queue);
        let t1 = shared.clock.now();
        self.emit(
            TraceEvent::new(t0, EventKind::LockWait)
                .kv("lock", q)
                .kv("dur", waited.as_nanos() as Nanos),
        );
        for (job, accel, holder, inherited) in blocked {
            let name = &shared.ts.accelerators[accel.index()].name;
            let holder = format!("{}#{}", shared.ts.task(holder.task).name(), holder.seq);
            self.emit(
                TraceEvent::new(t0, EventKind::AccelBlock)
                    .job(job)
                    .kv("accel", name)
                    .kv("holder", holder)
                    .kv("inherited", inherited),
            );
        }
        if let Some(job) = &picked {
            for a in &shared.ts.version(job.version.expect("dispatched")).accelerators {
                let ev = TraceEvent::new(t0, EventKind::AccelAcquire)
                    .job(job.id)
                    .kv("accel", &shared.ts.accelerators[a.index()].name);
                self.emit(ev);
            }
        }
        let outcome = match (&picked, current) {
            (Some(_), Some(_)) => "preempt",
            (Some(_), None) => "start",
            (None, Some(_)) => "continue",
            (None, None) => "idle",
        };
        self.emit(
            TraceEvent::new(t0, EventKind::GetTask)
                .kv("dur", t1 - t0)
                .kv("outcome", outcome),
        );
        Ok(picked)
    }

    /// Runs queued work until nothing outranks `current`. With `current`
    /// set this is a preemption point of that job.
    fn dispatch_loop(&mut self, current: Option<JobId>) -> Result<()> {
        let mut preempted = false;
        let mut since = self.shared.clock.now();
        while let Some(job) = self.get_task(current)? {
            if let Some(c) = current {
                let by = format!("{}#{}", self.shared.ts.task(job.id.task).name(), job.id.seq);
                let cost = self.shared.clock.now() - since;
                self.emit(
                    TraceEvent::new(self.shared.clock.now(), EventKind::Preempt)
                        .job(c)
                        .kv("by", by)
                        .kv("cost", cost),
                );
                preempted = true;
            }
            self.run_job(job)?;
            since = self.shared.clock.now();
        }
        if let Some(c) = current {
            self.shared.registry().running[self.id] = Some(c);
            if preempted {
                let now = self.shared.clock.now();
                self.emit(TraceEvent::new(now, EventKind::Resume).job(c).kv("cost", now - since));
            }
        }
        Ok(())
    }

    fn run_job(&mut self, job: Job) -> Result<()> {
        let shared = Arc::clone(&self.shared);
        let ts = &shared.ts;
        let vid = job.version.expect("dispatched");
        let version = ts.version(vid);
        let start = shared.clock.now();
        self.emit(
            TraceEvent::new(start, EventKind::JobStart)
                .job(job.id)
                .kv("version", &version.desc.name),
        );
        let synthetic = matches!(version.desc.entry, JobBody::Synthetic);
        {
            let _scope = JobScope::enter();
            if synthetic {
                for &(ch, n) in &job.claimed {
                    for _ in 0..n {
                        let _ = shared.channels[ch.index()].pop_blocking();
                    }
                }
            }
            let mut ctx = JobContext {
                worker: self,
                job: job.id,
                version: vid,
                deadline: job.deadline,
                static_args: version.desc.static_args.clone(),
            };
            match &version.desc.entry {
                JobBody::Synthetic => ctx.spin_for(version.exec_time()),
                JobBody::Func(f) => {
                    if catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).is_err() {
                        shared.warn(format!("body of {} panicked", job.id));
                    }
                }
            }
            if synthetic {
                for &(ch, n) in &ts.task(job.id.task).outputs {
                    let c = &shared.channels[ch.index()];
                    for _ in 0..n {
                        let tok = Token {
                            payload: vec![0; c.descriptor().element_size],
                            stamp: job.deadline,
                        };
                        let _ = c.push_blocking(tok);
                    }
                }
            }
        }
        let end = shared.clock.now();
        self.emit(
            TraceEvent::new(end, EventKind::JobComplete)
                .job(job.id)
                .kv("response", end.saturating_sub(job.arrival)),
        );
        if end > job.deadline {
            self.emit(
                TraceEvent::new(end, EventKind::DeadlineMiss)
                    .job(job.id)
                    .kv("deadline", job.deadline)
                    .kv("lateness", end - job.deadline),
            );
        }
        let (freed, woken) = {
            let mut reg = shared.registry();
            reg.keys.remove(&job.id);
            reg.running[self.id] = None;
            let (freed, woken) = reg.accel.release(job.id);
            let woken: Vec<Job> = woken.iter().filter_map(|j| reg.parked.remove(j)).collect();
            (freed, woken)
        };
        for a in freed {
            self.emit(
                TraceEvent::new(end, EventKind::AccelRelease)
                    .job(job.id)
                    .kv("accel", &ts.accelerators[a.index()].name),
            );
        }
        let mut touched = Vec::new();
        for j in woken {
            let q = ts.queue_of(j.id.task);
            let mut queue = shared.queues[q].lock()?;
            queue.push(j);
            sort_ready(&mut queue);
            touched.retain(|t: &(usize, usize, Option<PriorityKey>)| t.0 != q);
            touched.push((q, queue.len(), queue.first().map(|j| j.key)));
        }
        if !touched.is_empty() {
            shared.notify(&touched);
        }
        if shared.in_flight.fetch_sub(1, Ordering::AcqRel) == 1 && shared.sched_done.load(Ordering::Acquire) {
            shared.wake_all();
        }
        Ok(())
    }

    fn main_loop(&mut self) -> Result<()> {
        let shared = Arc::clone(&self.shared);
        let me = &shared.notifiers[self.id];
        loop {
            self.dispatch_loop(None)?;
            me.preempt.store(false, Ordering::Release);
            match shared.waiting() {
                WaitingStrategy::Sleep => {
                    let mut f = me.flags();
                    f.idle = true;
                    while !f.wake && !shared.drained() {
                        f = me
                            .cv
                            .wait_timeout(f, Duration::from_millis(10))
                            .unwrap_or_else(|e| e.into_inner())
                            .0;
                    }
                    f.wake = false;
                    f.idle = false;
                }
                WaitingStrategy::Spin => {
                    me.flags().idle = true;
                    loop {
                        let mut f = me.flags();
                        if f.wake || shared.drained() {
                            f.wake = false;
                            f.idle = false;
                            break;
                        }
                        drop(f);
                        std::thread::yield_now();
                    }
                }
            }
            if shared.drained() && self.queue_empty()? {
                return Ok(());
            }
        }
    }

    fn queue_empty(&self) -> Result<bool> {
        Ok(self.shared.queues[self.queue()].lock()?.is_empty())
    }

    /// OFFLINE: replays this core's table row until stopped.
    fn table_loop(&mut self) -> Result<()> {
        let shared = Arc::clone(&self.shared);
        let ts = &shared.ts;
        let table = ts.table.as_ref().ok_or_else(|| Error::Internal("OFFLINE without table".into()))?;
        let until = shared.release_until();
        let mut cursor = RowCursor::new(table, self.id);
        let mut seqs: BTreeMap<TaskId, u64> = BTreeMap::new();
        let mut free_at = 0;
        while let Some(slot) = cursor.next_slot(free_at, until) {
            if !shared.wait_until_or_stop(slot.planned) {
                break;
            }
            let seq = seqs.entry(slot.entry.task).or_default();
            let mut job = make_job(ts, slot.entry.task, *seq, slot.planned, None)?;
            *seq += 1;
            job.version = Some(slot.entry.version);
            let now = shared.clock.now();
            self.emit(
                TraceEvent::new(slot.planned, EventKind::ReleaseTheoretical)
                    .job(job.id)
                    .kv("deadline", job.deadline)
                    .kv("version", &ts.version(slot.entry.version).desc.name),
            );
            self.emit(TraceEvent::new(now, EventKind::ReleaseEffective).job(job.id));
            if free_at > slot.planned {
                self.emit(
                    TraceEvent::new(now, EventKind::Overrun)
                        .job(job.id)
                        .kv("late", now - slot.planned),
                );
            }
            shared.in_flight.fetch_add(1, Ordering::AcqRel);
            self.run_job(job)?;
            free_at = shared.clock.now();
        }
        Ok(())
    }
}

impl Shared {
    fn release_until(&self) -> Nanos {
        self.stop_at.unwrap_or(Nanos::MAX)
    }
}

struct SchedCtx {
    shared: Arc<Shared>,
    book: ReleaseBook,
    trace: Vec<TraceEvent>,
}

impl SchedCtx {
    fn collect(&mut self, t: Nanos) -> Result<Vec<Job>> {
        let shared = Arc::clone(&self.shared);
        let ts = &shared.ts;
        let requests: Vec<(TaskId, Nanos)> =
            std::mem::take(&mut *shared.activations.lock().unwrap_or_else(|e| e.into_inner()));
        for (task, at) in requests {
            let arrival = self.book.activate(ts, task, at);
            if arrival > at {
                shared.warn(format!(
                    "sporadic task {} activated early at {at}; release delayed to {arrival}",
                    ts.task(task).name()
                ));
            }
        }
        let mut jobs = Vec::new();
        for (task, arrival) in self.book.due(t) {
            let seq = self.book.next_seq(task);
            jobs.push(make_job(ts, task, seq, arrival, None)?);
        }
        let mut source: &[Channel] = &shared.channels;
        jobs.extend(activate_graph_nodes(ts, &mut source, &mut self.book, t)?);
        let now = shared.clock.now();
        let reg = shared.registry();
        for job in &mut jobs {
            let v = tentative_version(ts, job.id.task, &reg.accel, &reg.settings, now)?;
            job.version = Some(v);
            self.trace.push(
                TraceEvent::new(job.arrival, EventKind::ReleaseTheoretical)
                    .job(job.id)
                    .kv("deadline", job.deadline)
                    .kv("version", &ts.version(v).desc.name),
            );
        }
        drop(reg);
        shared.in_flight.fetch_add(jobs.len(), Ordering::AcqRel);
        Ok(jobs)
    }

    /// Inserts `jobs` into queue `q` under its lock; returns what `notify`
    /// needs.
    fn insert(&mut self, q: usize, jobs: Vec<Job>) -> Result<(usize, usize, Option<PriorityKey>)> {
        let shared = Arc::clone(&self.shared);
        let (mut queue, waited) = shared.queues[q].lock_timed()?;
        let ids: Vec<JobId> = jobs.iter().map(|j| j.id).collect();
        queue.extend(jobs);
        sort_ready(&mut queue);
        let touched = (q, queue.len(), queue.first().map(|j| j.key));
        drop(queue);
        let now = shared.clock.now();
        self.trace.push(
            TraceEvent::new(now, EventKind::LockWait)
                .kv("lock", q)
                .kv("dur", waited.as_nanos() as Nanos),
        );
        for id in ids {
            self.trace.push(TraceEvent::new(now, EventKind::ReleaseEffective).job(id));
        }
        Ok(touched)
    }

    fn run(&mut self) -> Result<()> {
        let shared = Arc::clone(&self.shared);
        let ts = &shared.ts;
        let tick = ts.tick.ok_or_else(|| Error::Internal("on-line mapping without tick".into()))?;
        let until = shared.release_until();
        let mut k: u64 = 0;
        loop {
            let t = k.saturating_mul(tick);
            if t >= until || !shared.wait_until_or_stop(t) {
                break;
            }
            let began = shared.clock.now();
            self.trace.push(TraceEvent::new(began, EventKind::TickBegin).kv("tick", k));
            let mut waited = 0;
            let jobs = self.collect(t)?;
            let released = jobs.len();
            let mut touched = Vec::new();
            match ts.config.mapping_scheme {
                MappingScheme::Global => touched.push(self.insert(0, jobs)?),
                _ => {
                    let mut by_queue: BTreeMap<usize, Vec<Job>> = BTreeMap::new();
                    for j in jobs {
                        by_queue.entry(ts.queue_of(j.id.task)).or_default().push(j);
                    }
                    for (q, jobs) in by_queue {
                        touched.push(self.insert(q, jobs)?);
                    }
                }
            }
            for e in self.trace.iter().rev().take_while(|e| e.kind != EventKind::TickBegin) {
                if e.kind == EventKind::LockWait {
                    waited += e.get_u64("dur").unwrap_or(0);
                }
            }
            let end = shared.clock.now();
            self.trace.push(
                TraceEvent::new(end, EventKind::TickEnd)
                    .kv("released", released)
                    .kv("sched", (end - began).saturating_sub(waited))
                    .kv("wait", waited),
            );
            shared.notify(&touched);
            k += 1;
            let behind = end / tick;
            if behind >= k && (k * tick) < until {
                self.trace.push(TraceEvent::new(end, EventKind::Overrun).kv("tick", k));
                k = behind;
            }
        }
        self.book.stop();
        Ok(())
    }
}

/// A running threaded execution.
pub struct RealtimeRun {
    shared: Arc<Shared>,
    scheduler: Option<JoinHandle<Result<Vec<TraceEvent>>>>,
    workers: Vec<JoinHandle<Result<Vec<TraceEvent>>>>,
    options: RealtimeOptions,
    locked: bool,
}

impl RealtimeRun {
    /// Checks the host, spawns the contexts and captures time 0.
    pub fn launch(ts: Arc<TaskSet>, options: RealtimeOptions) -> Result<RealtimeRun> {
        let pf = preflight();
        let online = ts.config.is_online();
        let workers = ts.config.worker_count;
        let needed = workers + usize::from(online);
        if pf.cpus.len() < needed && !options.oversubscribe {
            return Err(Error::Config(format!(
                "{} needs {needed} processors ({workers} workers{}), host provides {}",
                ts.config.policy_label(),
                if online { " + scheduler" } else { "" },
                pf.cpus.len()
            )));
        }
        let mut warnings = pf.warnings.clone();
        if pf.cpus.len() < needed {
            warnings.push(format!(
                "oversubscribed: {needed} contexts share {} processors",
                pf.cpus.len()
            ));
        }
        let mut locked = false;
        if options.lock_memory {
            match lock_all_memory() {
                Ok(()) => locked = true,
                Err(e) => warnings.push(format!("memory locking denied: {e}")),
            }
        }
        for w in &warnings {
            warn!("{w}");
        }
        let registry = Registry {
            accel: AccelRegistry::new(ts.accelerators.len()),
            settings: ts.selection.clone(),
            running: vec![None; workers],
            keys: BTreeMap::new(),
            parked: BTreeMap::new(),
        };
        let channels = ts
            .channels
            .iter()
            .map(|c| Channel::new(c.clone(), ts.config.waiting_strategy))
            .collect();
        let shared = Arc::new(Shared {
            queues: (0..ts.queue_count())
                .map(|_| FifoLock::new(Vec::new(), ts.config.locking_strategy))
                .collect(),
            registry: Mutex::new(registry),
            channels,
            notifiers: (0..workers).map(|_| Notifier::new()).collect(),
            activations: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
            sched_done: AtomicBool::new(!online),
            in_flight: AtomicUsize::new(0),
            warnings: Mutex::new(warnings),
            stop_at: options.release_until,
            pin_threads: options.pin_threads,
            clock: MonotonicClock::start(),
            ts,
        });
        let cpus = pf.cpus;
        let pin = move |shared: &Shared, slot: usize| {
            if !shared.pin_threads || cpus.is_empty() {
                return;
            }
            let cpu = cpus[slot % cpus.len()];
            if let Err(e) = pin_current_thread(cpu) {
                shared.warn(format!("pinning to processor {cpu} denied: {e}"));
            }
        };
        let pin = Arc::new(pin);
        let mut handles = Vec::new();
        for w in 0..workers {
            let shared = Arc::clone(&shared);
            let pin = Arc::clone(&pin);
            let h = std::thread::Builder::new()
                .name(format!("rt-worker-{w}"))
                .spawn(move || {
                    pin(&shared, w + usize::from(online));
                    let mut ctx = WorkerCtx {
                        id: w,
                        shared: Arc::clone(&shared),
                        trace: Vec::new(),
                    };
                    let r = if online { ctx.main_loop() } else { ctx.table_loop() };
                    r.map(|()| ctx.trace)
                })?;
            handles.push(h);
        }
        let scheduler = if online {
            let shared = Arc::clone(&shared);
            let pin = Arc::clone(&pin);
            Some(
                std::thread::Builder::new()
                    .name("rt-scheduler".into())
                    .spawn(move || {
                        pin(&shared, 0);
                        let mut ctx = SchedCtx {
                            book: ReleaseBook::new(&shared.ts),
                            shared: Arc::clone(&shared),
                            trace: Vec::new(),
                        };
                        let r = ctx.run();
                        shared.sched_done.store(true, Ordering::Release);
                        shared.wake_all();
                        r.map(|()| ctx.trace)
                    })?,
            )
        } else {
            None
        };
        Ok(RealtimeRun {
            shared,
            scheduler,
            workers: handles,
            options,
            locked,
        })
    }

    pub fn now(&self) -> Nanos {
        self.shared.clock.now()
    }

    /// Requests one job of a sporadic or aperiodic task; picked up at the
    /// next scheduler tick.
    pub fn activate(&self, task: TaskId) -> Result<()> {
        if self.shared.stop.load(Ordering::Acquire) {
            return Err(Error::Usage("activation after stop".into()));
        }
        let now = self.shared.clock.now();
        self.shared
            .activations
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push((task, now));
        Ok(())
    }

    /// Stops releasing jobs, lets every released job finish and returns the
    /// merged trace and its report.
    pub fn stop(mut self) -> Result<(Trace, RunReport)> {
        self.shared.stop.store(true, Ordering::Release);
        let mut events = Vec::new();
        let mut first_err = None;
        if let Some(h) = self.scheduler.take() {
            match h.join() {
                Ok(Ok(ev)) => events.extend(ev),
                Ok(Err(e)) => first_err = Some(e),
                Err(_) => first_err = Some(Error::Internal("scheduler thread panicked".into())),
            }
        }
        self.shared.sched_done.store(true, Ordering::Release);
        self.shared.wake_all();
        let deadline = Instant::now() + self.options.drain_timeout;
        while self.workers.iter().any(|h| !h.is_finished()) {
            if Instant::now() >= deadline {
                self.shared
                    .warn("drain timed out; closing channels to release blocked jobs".into());
                for c in &self.shared.channels {
                    c.close();
                }
                break;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
        for h in self.workers.drain(..) {
            match h.join() {
                Ok(Ok(ev)) => events.extend(ev),
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(Error::Internal("worker thread panicked".into()));
                }
            }
        }
        if self.locked {
            unlock_all_memory();
            self.locked = false;
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        let ts = &self.shared.ts;
        let mut trace = Trace::new(ts.tasks.iter().map(|t| t.desc.name.clone()).collect());
        trace.events = events;
        trace.finish();
        let mut report = build_report(&trace)?;
        report.backend = "realtime".into();
        report.policy = ts.config.policy_label();
        report.preemptive = ts.config.preemptive;
        report.version_filter = ts.config.version_filter.label().into();
        report.workers = ts.config.worker_count;
        report.horizon_ns = self.options.release_until.unwrap_or(report.end_ns);
        report.warnings = ts
            .warnings
            .iter()
            .cloned()
            .chain(self.shared.warnings.lock().unwrap_or_else(|e| e.into_inner()).drain(..))
            .collect();
        Ok((trace, report))
    }
}

impl Drop for RealtimeRun {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        self.shared.sched_done.store(true, Ordering::Release);
        self.shared.wake_all();
        for c in &self.shared.channels {
            c.close();
        }
        if self.locked {
            unlock_all_memory();
        }
    }
}

/// Runs `ts` for `duration`: jobs are released during `duration` and every
/// released job completes before this returns.
pub fn run_realtime(ts: Arc<TaskSet>, duration: Nanos, mut options: RealtimeOptions) -> Result<(Trace, RunReport)> {
    options.release_until = Some(duration);
    let run = RealtimeRun::launch(ts, options)?;
    let shared = Arc::clone(&run.shared);
    shared.wait_until_or_stop(duration);
    run.stop()
}
