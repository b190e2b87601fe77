//! Off-line time-table dispatching.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Task, TaskId, Version, VersionId, WorkerId};
use crate::time::{format_duration, Nanos};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TableEntry {
    pub task: TaskId,
    pub version: VersionId,
    pub offset: Nanos,
}

/// Per-core entry rows repeated every `period`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ScheduleTable {
    pub period: Nanos,
    pub cores: Vec<Vec<TableEntry>>,
}

/// Checks ordering and references. Returns overlap warnings; estimates may be
/// pessimistic so overlaps never fail validation.
pub fn validate_table(
    table: &ScheduleTable,
    tasks: &[Task],
    versions: &[Version],
    worker_count: usize,
) -> Result<Vec<String>> {
    if table.period == 0 {
        return Err(Error::Table("table period must be positive".into()));
    }
    if table.cores.len() > worker_count {
        return Err(Error::Table(format!(
            "table has {} core rows but only {worker_count} workers",
            table.cores.len()
        )));
    }
    let mut warnings = Vec::new();
    for (core, row) in table.cores.iter().enumerate() {
        for (i, e) in row.iter().enumerate() {
            let task = tasks
                .get(e.task.index())
                .ok_or_else(|| Error::Table(format!("core {core} entry {i}: unknown task {}", e.task)))?;
            let version = versions
                .get(e.version.index())
                .filter(|v| v.task == e.task)
                .ok_or_else(|| {
                    Error::Table(format!(
                        "core {core} entry {i}: version {} is not a version of {}",
                        e.version,
                        task.name()
                    ))
                })?;
            if task.is_data_driven() {
                return Err(Error::Table(format!(
                    "core {core} entry {i}: data-driven graph node {} cannot be table-dispatched",
                    task.name()
                )));
            }
            if e.offset >= table.period {
                return Err(Error::Table(format!(
                    "core {core} entry {i}: offset {} not below table period {}",
                    format_duration(e.offset),
                    format_duration(table.period)
                )));
            }
            if let Some(prev) = i.checked_sub(1).map(|p| row[p]) {
                if e.offset < prev.offset {
                    return Err(Error::Table(format!(
                        "core {core}: entry {i} at {} precedes entry {} at {}",
                        format_duration(e.offset),
                        i - 1,
                        format_duration(prev.offset)
                    )));
                }
            }
            let end = e.offset + version.desc.wcet;
            let next_start = match row.get(i + 1) {
                Some(n) => n.offset,
                None => table.period + row[0].offset,
            };
            if end > next_start {
                warnings.push(format!(
                    "core {core}: {} (wcet {}) at {} overlaps the next entry at {}",
                    task.name(),
                    format_duration(version.desc.wcet),
                    format_duration(e.offset),
                    format_duration(next_start)
                ));
            }
        }
    }
    Ok(warnings)
}

/// One planned entry execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub entry: TableEntry,
    pub iteration: u64,
    /// `iteration * period + offset`.
    pub planned: Nanos,
    pub start: Nanos,
}

impl Slot {
    pub fn overrun(&self) -> Nanos {
        self.start - self.planned
    }
}

/// Walks one core row: entries start at their planned instant or when the
/// previous entry finishes, whichever is later. Entries are never skipped.
#[derive(Clone, Debug)]
pub struct RowCursor<'a> {
    row: &'a [TableEntry],
    period: Nanos,
    pub core: WorkerId,
    iteration: u64,
    idx: usize,
}

impl<'a> RowCursor<'a> {
    pub fn new(table: &'a ScheduleTable, core: WorkerId) -> Self {
        RowCursor {
            row: table.cores.get(core).map(Vec::as_slice).unwrap_or(&[]),
            period: table.period,
            core,
            iteration: 0,
            idx: 0,
        }
    }

    /// The next slot given when the core became free, or `None` once the
    /// planned instant reaches `until`.
    pub fn next_slot(&mut self, free_at: Nanos, until: Nanos) -> Option<Slot> {
        let entry = *self.row.get(self.idx)?;
        let planned = self.iteration * self.period + entry.offset;
        if planned >= until {
            return None;
        }
        let slot = Slot {
            entry,
            iteration: self.iteration,
            planned,
            start: planned.max(free_at),
        };
        self.idx += 1;
        if self.idx == self.row.len() {
            self.idx = 0;
            self.iteration += 1;
        }
        Some(slot)
    }
}
