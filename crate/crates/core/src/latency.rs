//! Wake-up latency harness on the threaded backend: `threads` periodic tasks
//! with the same interval, measured from theoretical release to job start.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::backend::realtime::{run_realtime, RealtimeOptions};
use crate::backend::trace::{EventKind, Trace};
use crate::error::{Error, Result};
use crate::middleware::Middleware;
use crate::model::{JobId, MappingScheme, PolicyConfig, PriorityAssignment, TaskDescriptor, VSelect, VersionDescriptor};
use crate::time::{Nanos, NS_PER_US};

#[derive(Clone, Debug)]
pub struct LatencySpec {
    pub threads: usize,
    pub interval_us: u64,
    pub loops: u64,
    pub mapping: MappingScheme,
    pub priority: PriorityAssignment,
    pub preemptive: bool,
    /// Busy-work per activation.
    pub body_ns: Nanos,
    pub options: RealtimeOptions,
}

impl LatencySpec {
    pub fn new(threads: usize, interval_us: u64, loops: u64) -> Self {
        LatencySpec {
            threads,
            interval_us,
            loops,
            mapping: MappingScheme::Partitioned,
            priority: PriorityAssignment::Edf,
            preemptive: true,
            body_ns: NS_PER_US,
            options: RealtimeOptions::default(),
        }
    }
}

/// `⟨min, max, avg⟩` in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Triple {
    pub samples: u64,
    pub min_us: u64,
    pub max_us: u64,
    pub avg_us: u64,
}

impl Triple {
    fn of(ns: &[Nanos]) -> Triple {
        if ns.is_empty() {
            return Triple::default();
        }
        let total: u128 = ns.iter().map(|&v| v as u128).sum();
        let us = |v: u128| ((v + NS_PER_US as u128 / 2) / NS_PER_US as u128) as u64;
        Triple {
            samples: ns.len() as u64,
            min_us: us(*ns.iter().min().expect("non-empty") as u128),
            max_us: us(*ns.iter().max().expect("non-empty") as u128),
            avg_us: us(total / ns.len() as u128),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "⟨{}, {}, {}⟩", self.min_us, self.max_us, self.avg_us)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub threads: Vec<(String, Triple)>,
    pub pooled: Triple,
    pub warnings: Vec<String>,
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, t) in &self.threads {
            writeln!(f, "{name:<8} {t} us ({} samples)", t.samples)?;
        }
        write!(f, "{:<8} {} us ({} samples)", "pooled", self.pooled, self.pooled.samples)
    }
}

/// Wake-up latencies (job start minus theoretical release) per task name.
pub fn wakeup_latencies(trace: &Trace) -> BTreeMap<String, Vec<Nanos>> {
    let mut released: BTreeMap<JobId, Nanos> = BTreeMap::new();
    let mut out: BTreeMap<String, Vec<Nanos>> = BTreeMap::new();
    for ev in &trace.events {
        let Some(job) = ev.job else { continue };
        match ev.kind {
            EventKind::ReleaseTheoretical => {
                released.insert(job, ev.t);
            }
            EventKind::JobStart => {
                if let Some(r) = released.remove(&job) {
                    out.entry(trace.task_name(job.task).to_string())
                        .or_default()
                        .push(ev.t.saturating_sub(r));
                }
            }
            _ => {}
        }
    }
    out
}

pub fn run_latency(spec: &LatencySpec) -> Result<LatencyReport> {
    if spec.loops == 0 {
        return Err(Error::Usage("loops must be positive".into()));
    }
    if spec.threads == 0 {
        return Err(Error::Usage("threads must be positive".into()));
    }
    if spec.interval_us == 0 {
        return Err(Error::Usage("interval must be positive".into()));
    }
    let interval = spec.interval_us * NS_PER_US;
    let config = PolicyConfig::new(spec.mapping, spec.priority, spec.threads).preemptive(spec.preemptive);
    let mut mw = Middleware::init(config)?;
    for i in 0..spec.threads {
        let mut desc = TaskDescriptor::periodic(&format!("t{i}"), interval);
        if spec.mapping != MappingScheme::Global {
            desc = desc.on_core(i);
        }
        if spec.priority == PriorityAssignment::User {
            desc = desc.with_priority(i as u64);
        }
        let t = mw.task_decl(desc)?;
        mw.version_decl(t, VersionDescriptor::new("spin", spec.body_ns.max(1), VSelect::Unspecified))?;
    }
    let ts = Arc::new(mw.compile()?);
    let duration = interval
        .checked_mul(spec.loops)
        .ok_or_else(|| Error::Usage("interval × loops overflows".into()))?;
    let (trace, report) = run_realtime(ts, duration, spec.options.clone())?;
    let per_task = wakeup_latencies(&trace);
    let pooled: Vec<Nanos> = per_task.values().flatten().copied().collect();
    let mut threads: Vec<(String, Triple)> = per_task.iter().map(|(n, v)| (n.clone(), Triple::of(v))).collect();
    threads.sort_by_key(|(n, _)| n[1..].parse::<usize>().unwrap_or(usize::MAX));
    Ok(LatencyReport {
        threads,
        pooled: Triple::of(&pooled),
        warnings: report.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_loops_is_rejected() {
        let err = run_latency(&LatencySpec::new(2, 10_000, 0)).unwrap_err();
        assert!(err.to_string().contains("loops must be positive"), "{err}");
    }

    #[test]
    fn triple_rounds_to_microseconds() {
        let t = Triple::of(&[90_400, 1_481_000, 500_000]);
        assert_eq!((t.min_us, t.max_us, t.avg_us), (90, 1481, 690));
        assert_eq!(t.to_string(), "⟨90, 1481, 690⟩");
    }

    #[test]
    fn short_oversubscribed_run_reports_every_thread() {
        let mut spec = LatencySpec::new(2, 2_000, 10);
        spec.options.oversubscribe = true;
        spec.options.lock_memory = false;
        let r = run_latency(&spec).unwrap();
        assert_eq!(r.threads.len(), 2);
        assert_eq!(r.pooled.samples, 20);
    }
}
