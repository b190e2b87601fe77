//! Version selection and accelerator arbitration with priority inheritance.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{
    AccelId, JobId, SelectRequest, SelectionSettings, Task, VSelect, Version, VersionId,
    VersionSelection,
};
use crate::priority::PriorityKey;
use crate::time::Nanos;

/// Inputs of one selection decision.
pub struct SelectionContext<'a> {
    pub now: Nanos,
    pub settings: &'a SelectionSettings,
    pub registry: &'a AccelRegistry,
}

/// Candidates whose accelerators are all free, in declaration order.
pub fn eligible_versions(
    candidates: &[VersionId],
    versions: &[Version],
    registry: &AccelRegistry,
) -> Vec<VersionId> {
    candidates
        .iter()
        .copied()
        .filter(|v| {
            versions[v.index()]
                .accelerators
                .iter()
                .all(|a| !registry.is_busy(*a))
        })
        .collect()
}

fn selection_error(task: &Task, reason: impl Into<String>) -> Error {
    Error::Selection {
        task: task.desc.name.clone(),
        reason: reason.into(),
    }
}

/// Picks one version out of `eligible` according to `method`.
pub fn select_version(
    method: VersionSelection,
    task: &Task,
    versions: &[Version],
    eligible: &[VersionId],
    ctx: &SelectionContext<'_>,
) -> Result<VersionId> {
    if eligible.is_empty() {
        return Err(selection_error(task, "no eligible version"));
    }
    let ver = |id: &VersionId| &versions[id.index()];
    match method {
        VersionSelection::Preselected => Ok(eligible[0]),
        VersionSelection::Energy => {
            let battery = eligible
                .iter()
                .find_map(|id| match &ver(id).desc.select {
                    VSelect::Energy {
                        battery: Some(probe),
                        ..
                    } => Some(probe()),
                    _ => None,
                })
                .unwrap_or(ctx.settings.battery_level);
            let budget = |id: &VersionId| match ver(id).desc.select {
                VSelect::Energy { energy_budget, .. } => energy_budget,
                _ => u64::MAX,
            };
            let fitting = eligible
                .iter()
                .filter(|id| budget(id) <= battery)
                .min_by_key(|id| ver(id).desc.wcet);
            Ok(*fitting.unwrap_or_else(|| {
                eligible.iter().min_by_key(|id| budget(id)).expect("non-empty")
            }))
        }
        VersionSelection::EnergyTime => {
            let props = |id: &VersionId| match ver(id).desc.select {
                VSelect::EnergyTime {
                    energy_cost,
                    exec_time,
                } => (exec_time as f64, energy_cost as f64),
                _ => (f64::MAX, f64::MAX),
            };
            let max_t = task.versions.iter().map(|v| props(v).0).fold(0.0, f64::max);
            let max_e = task.versions.iter().map(|v| props(v).1).fold(0.0, f64::max);
            let norm = |x: f64, m: f64| if m > 0.0 { x / m } else { 0.0 };
            let alpha = ctx.settings.alpha;
            let score = |id: &VersionId| {
                let (t, e) = props(id);
                alpha * norm(t, max_t) + (1.0 - alpha) * norm(e, max_e)
            };
            let mut best = eligible[0];
            for id in &eligible[1..] {
                if score(id) < score(&best) {
                    best = *id;
                }
            }
            Ok(best)
        }
        VersionSelection::Mode | VersionSelection::Bitmask => {
            let wanted = if method == VersionSelection::Mode {
                ctx.settings.execution_mode
            } else {
                ctx.settings.permission_mask
            };
            eligible
                .iter()
                .copied()
                .find(|id| match ver(id).desc.select {
                    VSelect::Mode { mode_mask } => mode_mask & wanted != 0,
                    VSelect::Bitmask { permission_mask } => permission_mask & wanted != 0,
                    _ => false,
                })
                .ok_or_else(|| {
                    selection_error(task, format!("no version matches mask {wanted:#x}"))
                })
        }
        VersionSelection::User => {
            let selector = task
                .versions
                .iter()
                .find_map(|id| match &ver(id).desc.select {
                    VSelect::User { selector: Some(f) } => Some(f.clone()),
                    _ => None,
                })
                .ok_or_else(|| selection_error(task, "no user selector registered"))?;
            let chosen = selector(&SelectRequest {
                task: task.id,
                now: ctx.now,
                eligible,
            });
            if eligible.contains(&chosen) {
                Ok(chosen)
            } else {
                Err(Error::Contract {
                    task: task.desc.name.clone(),
                    version: chosen.to_string(),
                })
            }
        }
    }
}

/// Result of an accelerator acquisition attempt.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcquireOutcome {
    Acquired,
    Blocked {
        accel: AccelId,
        holder: JobId,
        /// The holder's effective priority was raised to the requester's.
        inherited: bool,
    },
}

/// Occupancy of single-unit accelerators plus inherited priorities and
/// per-accelerator wait lists.
#[derive(Clone, Debug, Default)]
pub struct AccelRegistry {
    /// Holder and its base key.
    holders: Vec<Option<(JobId, PriorityKey)>>,
    boosts: BTreeMap<JobId, PriorityKey>,
    waiters: Vec<Vec<JobId>>,
}

impl AccelRegistry {
    pub fn new(accelerators: usize) -> Self {
        AccelRegistry {
            holders: vec![None; accelerators],
            boosts: BTreeMap::new(),
            waiters: vec![Vec::new(); accelerators],
        }
    }

    pub fn is_busy(&self, accel: AccelId) -> bool {
        self.holders[accel.index()].is_some()
    }

    pub fn holder(&self, accel: AccelId) -> Option<JobId> {
        self.holders[accel.index()].map(|(j, _)| j)
    }

    fn holds(&self, i: usize, job: JobId) -> bool {
        matches!(self.holders[i], Some((j, _)) if j == job)
    }

    /// The key used for ordering: the base key or an inherited one, whichever
    /// ranks higher.
    pub fn effective_key(&self, job: JobId, base: PriorityKey) -> PriorityKey {
        match self.boosts.get(&job) {
            Some(b) if b.higher_than(&base) => *b,
            _ => base,
        }
    }

    /// Takes every accelerator in `accels` or none of them.
    pub fn acquire(
        &mut self,
        job: JobId,
        key: PriorityKey,
        accels: &BTreeSet<AccelId>,
        inherit: bool,
    ) -> Result<AcquireOutcome> {
        if accels.iter().any(|a| self.holds(a.index(), job)) {
            return Err(Error::Internal(format!("job {job} acquires an accelerator twice")));
        }
        if let Some(&accel) = accels.iter().find(|a| self.is_busy(**a)) {
            let (holder, base) = self.holders[accel.index()].expect("busy");
            let mut inherited = false;
            if inherit && key.higher_than(&self.effective_key(holder, base)) {
                self.boosts.insert(holder, key);
                inherited = true;
            }
            return Ok(AcquireOutcome::Blocked {
                accel,
                holder,
                inherited,
            });
        }
        for a in accels {
            self.holders[a.index()] = Some((job, key));
        }
        Ok(AcquireOutcome::Acquired)
    }

    pub fn add_waiter(&mut self, accel: AccelId, job: JobId) {
        self.waiters[accel.index()].push(job);
    }

    /// Frees everything `job` holds and drops its inherited priority.
    /// Returns the waiters of the freed accelerators in blocking order.
    pub fn release(&mut self, job: JobId) -> (Vec<AccelId>, Vec<JobId>) {
        self.boosts.remove(&job);
        let mut freed = Vec::new();
        let mut woken = Vec::new();
        for (i, h) in self.holders.iter_mut().enumerate() {
            if matches!(h, Some((j, _)) if *j == job) {
                *h = None;
                freed.push(AccelId(i as u32));
                woken.append(&mut self.waiters[i]);
            }
        }
        (freed, woken)
    }

    pub fn held_by(&self, job: JobId) -> Vec<AccelId> {
        self.holders
            .iter()
            .enumerate()
            .filter(|(_, h)| matches!(h, Some((j, _)) if *j == job))
            .map(|(i, _)| AccelId(i as u32))
            .collect()
    }
}
