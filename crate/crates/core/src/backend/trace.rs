//! Scheduling trace events and their CSV form.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{JobId, TaskId, WorkerId};
use crate::time::Nanos;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ReleaseTheoretical,
    ReleaseEffective,
    JobStart,
    Preempt,
    Resume,
    JobComplete,
    DeadlineMiss,
    LockWait,
    TickBegin,
    TickEnd,
    AccelAcquire,
    AccelRelease,
    /// A dispatch found the selected version's accelerator busy.
    AccelBlock,
    /// One worker critical section on a ready queue.
    GetTask,
    Overrun,
}

impl EventKind {
    pub const ALL: [EventKind; 15] = [
        EventKind::ReleaseTheoretical,
        EventKind::ReleaseEffective,
        EventKind::JobStart,
        EventKind::Preempt,
        EventKind::Resume,
        EventKind::JobComplete,
        EventKind::DeadlineMiss,
        EventKind::LockWait,
        EventKind::TickBegin,
        EventKind::TickEnd,
        EventKind::AccelAcquire,
        EventKind::AccelRelease,
        EventKind::AccelBlock,
        EventKind::GetTask,
        EventKind::Overrun,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ReleaseTheoretical => "release_theoretical",
            EventKind::ReleaseEffective => "release_effective",
            EventKind::JobStart => "job_start",
            EventKind::Preempt => "preempt",
            EventKind::Resume => "resume",
            EventKind::JobComplete => "job_complete",
            EventKind::DeadlineMiss => "deadline_miss",
            EventKind::LockWait => "lock_wait",
            EventKind::TickBegin => "tick_begin",
            EventKind::TickEnd => "tick_end",
            EventKind::AccelAcquire => "accel_acquire",
            EventKind::AccelRelease => "accel_release",
            EventKind::AccelBlock => "accel_block",
            EventKind::GetTask => "get_task",
            EventKind::Overrun => "overrun",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Integrity(format!("unknown event kind `{s}`")))
    }
}

/// One trace record. `worker = None` denotes the scheduler context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub t: Nanos,
    pub kind: EventKind,
    pub job: Option<JobId>,
    pub worker: Option<WorkerId>,
    /// `key=value` pairs separated by `;`.
    pub payload: String,
}

impl TraceEvent {
    pub fn new(t: Nanos, kind: EventKind) -> Self {
        TraceEvent {
            t,
            kind,
            job: None,
            worker: None,
            payload: String::new(),
        }
    }

    pub fn job(mut self, job: JobId) -> Self {
        self.job = Some(job);
        self
    }

    pub fn worker(mut self, w: WorkerId) -> Self {
        self.worker = Some(w);
        self
    }

    pub fn on(self, w: Option<WorkerId>) -> Self {
        TraceEvent { worker: w, ..self }
    }

    pub fn kv(mut self, key: &str, value: impl fmt::Display) -> Self {
        if !self.payload.is_empty() {
            self.payload.push(';');
        }
        use fmt::Write;
        let _ = write!(self.payload, "{key}={value}");
        self
    }

    /// Value of `key` in the payload.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.payload.split(';').find_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            (k == key).then_some(v)
        })
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.get(key)?.parse().ok()
    }
}

/// A run's events in timestamp order plus the task names needed to render
/// them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub task_names: Vec<String>,
}

const HEADER: [&str; 6] = ["timestamp_ns", "kind", "task", "job_seq", "worker", "payload"];

impl Trace {
    pub fn new(task_names: Vec<String>) -> Self {
        Trace {
            events: Vec::new(),
            task_names,
        }
    }

    pub fn push(&mut self, ev: TraceEvent) {
        self.events.push(ev);
    }

    /// Stable sort by timestamp; per-context order is kept.
    pub fn finish(&mut self) {
        self.events.sort_by_key(|e| e.t);
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.of_kind(kind).count()
    }

    pub fn task_name(&self, id: TaskId) -> &str {
        self.task_names.get(id.index()).map_or("?", String::as_str)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        w.write_record(HEADER)?;
        for e in &self.events {
            let t = e.t.to_string();
            let (task, seq) = match e.job {
                Some(j) => (self.task_name(j.task).to_string(), j.seq.to_string()),
                None => (String::new(), String::new()),
            };
            let worker = e.worker.map(|w| w.to_string()).unwrap_or_default();
            w.write_record([t.as_str(), e.kind.as_str(), &task, &seq, &worker, &e.payload])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8")
    }

    /// Parses a CSV written by [`Trace::write_csv`]. Task names are resolved
    /// against `task_names`.
    pub fn read_csv<R: Read>(input: R, task_names: Vec<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut trace = Trace::new(task_names);
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |what: &str| Error::Integrity(format!("bad {what} in trace row {:?}", rec));
            let t = field(0).parse().map_err(|_| bad("timestamp"))?;
            let kind = field(1).parse()?;
            let job = if field(2).is_empty() {
                None
            } else {
                let task = trace
                    .task_names
                    .iter()
                    .position(|n| n == field(2))
                    .ok_or_else(|| bad("task"))?;
                let seq = field(3).parse().map_err(|_| bad("job_seq"))?;
                Some(JobId {
                    task: TaskId(task as u32),
                    seq,
                })
            };
            let worker = if field(4).is_empty() {
                None
            } else {
                Some(field(4).parse().map_err(|_| bad("worker"))?)
            };
            trace.push(TraceEvent {
                t,
                kind,
                job,
                worker,
                payload: field(5).to_string(),
            });
        }
        Ok(trace)
    }
}
