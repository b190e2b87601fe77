//! Priority assignment and ready-queue ordering.
//!
//! Convention used throughout the crate: a *smaller* [`PriorityKey`] is a
//! *higher* priority. RM keys are the task period, DM keys the relative
//! deadline, EDF keys the absolute deadline of the job and USER keys the user
//! priority, so no key is ever negated.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{PriorityAssignment, TaskId};
use crate::time::Nanos;

/// Jobs of aperiodic tasks always rank below every recurring job.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum JobClass {
    Recurring = 0,
    Aperiodic = 1,
}

/// Total order over jobs: class, then primary ordinal, then task id, then
/// job sequence number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PriorityKey {
    pub class: JobClass,
    pub primary: u64,
    pub task: TaskId,
    pub seq: u64,
}

impl PriorityKey {
    /// `true` when `self` outranks `other`.
    pub fn higher_than(&self, other: &PriorityKey) -> bool {
        self < other
    }
}

/// Static per-task inputs of the priority assignment. Graph nodes carry the
/// values of their graph root.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StaticPriority {
    pub period: Option<Nanos>,
    pub deadline: Option<Nanos>,
    pub user: Option<u64>,
}

/// Computes the key of job `seq` of `task`.
pub fn assign_priority(
    policy: PriorityAssignment,
    task: TaskId,
    params: &StaticPriority,
    class: JobClass,
    abs_release: Nanos,
    abs_deadline: Nanos,
    seq: u64,
) -> Result<PriorityKey> {
    let primary = if class == JobClass::Aperiodic {
        // ties among aperiodic jobs go by activation time
        abs_release
    } else {
        match policy {
            PriorityAssignment::Rm => params.period.ok_or_else(|| missing(task, "period"))?,
            PriorityAssignment::Dm => params.deadline.ok_or_else(|| missing(task, "deadline"))?,
            PriorityAssignment::Edf => abs_deadline,
            PriorityAssignment::User => params.user.ok_or_else(|| missing(task, "user_priority"))?,
        }
    };
    Ok(PriorityKey {
        class,
        primary,
        task,
        seq,
    })
}

fn missing(task: TaskId, field: &'static str) -> Error {
    Error::MissingField {
        task: task.to_string(),
        field,
    }
}

/// Anything that sits in a ready queue.
pub trait Prioritized {
    fn priority(&self) -> PriorityKey;
}

impl Prioritized for PriorityKey {
    fn priority(&self) -> PriorityKey {
        *self
    }
}

/// Sorts a ready queue so that its head is the highest-priority entry.
/// Returns how many entries changed position (0 for an already sorted queue).
pub fn sort_ready<T: Prioritized>(queue: &mut [T]) -> usize {
    if queue.windows(2).all(|w| w[0].priority() <= w[1].priority()) {
        return 0;
    }
    let before: Vec<PriorityKey> = queue.iter().map(Prioritized::priority).collect();
    queue.sort_by_key(Prioritized::priority);
    before
        .iter()
        .zip(queue.iter())
        .filter(|(b, a)| **b != a.priority())
        .count()
}
