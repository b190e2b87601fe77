//! Task, version and accelerator data model plus the policy configuration.

use std::any::Any;
use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::realtime::JobContext;
use crate::error::{Error, Result};
use crate::time::Nanos;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(
    /// Dense task identifier, issued in declaration order.
    TaskId,
    "T"
);
id_type!(
    /// Dense version identifier, issued in declaration order across all tasks.
    VersionId,
    "V"
);
id_type!(AccelId, "H");
id_type!(ChannelId, "C");

/// Virtual core (worker) index.
pub type WorkerId = usize;

/// One job: the `seq`-th release of `task`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId {
    pub task: TaskId,
    pub seq: u64,
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.task, self.seq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Periodic,
    Sporadic,
    Aperiodic,
    GraphNode,
}

/// Declaration record of a task (the `TData` of the programmatic API).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDescriptor {
    pub name: String,
    pub kind: TaskKind,
    /// Period, or minimum inter-arrival time for sporadic tasks.
    pub period: Option<Nanos>,
    /// Relative deadline; `None` means implicit (equal to the period).
    pub deadline: Option<Nanos>,
    pub release_offset: Nanos,
    pub virt_core_id: Option<WorkerId>,
    pub user_priority: Option<u64>,
}

impl TaskDescriptor {
    fn base(name: &str, kind: TaskKind) -> Self {
        TaskDescriptor {
            name: name.to_string(),
            kind,
            period: None,
            deadline: None,
            release_offset: 0,
            virt_core_id: None,
            user_priority: None,
        }
    }

    pub fn periodic(name: &str, period: Nanos) -> Self {
        TaskDescriptor {
            period: Some(period),
            ..Self::base(name, TaskKind::Periodic)
        }
    }

    pub fn sporadic(name: &str, min_inter_arrival: Nanos) -> Self {
        TaskDescriptor {
            period: Some(min_inter_arrival),
            ..Self::base(name, TaskKind::Sporadic)
        }
    }

    pub fn aperiodic(name: &str, deadline: Nanos) -> Self {
        TaskDescriptor {
            deadline: Some(deadline),
            ..Self::base(name, TaskKind::Aperiodic)
        }
    }

    pub fn graph_node(name: &str) -> Self {
        Self::base(name, TaskKind::GraphNode)
    }

    pub fn with_deadline(mut self, deadline: Nanos) -> Self {
        self.deadline = Some(deadline);
        self
    }

    pub fn with_offset(mut self, offset: Nanos) -> Self {
        self.release_offset = offset;
        self
    }

    pub fn with_period(mut self, period: Nanos) -> Self {
        self.period = Some(period);
        self
    }

    pub fn on_core(mut self, core: WorkerId) -> Self {
        self.virt_core_id = Some(core);
        self
    }

    pub fn with_priority(mut self, priority: u64) -> Self {
        self.user_priority = Some(priority);
        self
    }

    /// Deadline after applying the implicit-deadline default.
    pub fn relative_deadline(&self) -> Option<Nanos> {
        self.deadline.or(self.period)
    }
}

/// Returns the current battery level in the same abstract units as `energy_budget`.
pub type BatteryProbe = Arc<dyn Fn() -> u64 + Send + Sync>;

/// What a user-defined selector sees when asked to pick a version.
pub struct SelectRequest<'a> {
    pub task: TaskId,
    pub now: Nanos,
    pub eligible: &'a [VersionId],
}

pub type UserSelector = Arc<dyn Fn(&SelectRequest<'_>) -> VersionId + Send + Sync>;

/// Per-version selection properties; the populated variant must match the
/// configured [`VersionSelection`] method.
#[derive(Clone)]
pub enum VSelect {
    Energy {
        energy_budget: u64,
        battery: Option<BatteryProbe>,
    },
    EnergyTime {
        energy_cost: u64,
        exec_time: Nanos,
    },
    Mode {
        mode_mask: u64,
    },
    Bitmask {
        permission_mask: u64,
    },
    User {
        selector: Option<UserSelector>,
    },
    /// No properties; only valid under `PRESELECTED`.
    Unspecified,
}

impl VSelect {
    pub fn energy(energy_budget: u64) -> Self {
        VSelect::Energy {
            energy_budget,
            battery: None,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            VSelect::Energy { .. } => "energy",
            VSelect::EnergyTime { .. } => "energy_time",
            VSelect::Mode { .. } => "mode",
            VSelect::Bitmask { .. } => "bitmask",
            VSelect::User { .. } => "user",
            VSelect::Unspecified => "unspecified",
        }
    }
}

impl fmt::Debug for VSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VSelect::Energy {
                energy_budget,
                battery,
            } => f
                .debug_struct("Energy")
                .field("energy_budget", energy_budget)
                .field("battery", &battery.as_ref().map(|_| "<fn>"))
                .finish(),
            VSelect::EnergyTime {
                energy_cost,
                exec_time,
            } => f
                .debug_struct("EnergyTime")
                .field("energy_cost", energy_cost)
                .field("exec_time", exec_time)
                .finish(),
            VSelect::Mode { mode_mask } => write!(f, "Mode({mode_mask:#x})"),
            VSelect::Bitmask { permission_mask } => write!(f, "Bitmask({permission_mask:#x})"),
            VSelect::User { selector } => {
                write!(f, "User({})", if selector.is_some() { "<fn>" } else { "-" })
            }
            VSelect::Unspecified => f.write_str("Unspecified"),
        }
    }
}

pub type BodyFn = Arc<dyn Fn(&mut JobContext<'_>) + Send + Sync>;

/// Executable body of a version. `Synthetic` bodies busy-work for the
/// version's execution time on the real backend.
#[derive(Clone, Default)]
pub enum JobBody {
    #[default]
    Synthetic,
    Func(BodyFn),
}

impl fmt::Debug for JobBody {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JobBody::Synthetic => f.write_str("Synthetic"),
            JobBody::Func(_) => f.write_str("Func(<fn>)"),
        }
    }
}

pub type StaticArgs = Arc<dyn Any + Send + Sync>;

#[derive(Clone)]
pub struct VersionDescriptor {
    pub name: String,
    pub entry: JobBody,
    pub static_args: Option<StaticArgs>,
    pub wcet: Nanos,
    pub select: VSelect,
    /// Actual execution time used by the simulator and synthetic bodies;
    /// defaults to `wcet`.
    pub exec_time: Option<Nanos>,
}

impl VersionDescriptor {
    pub fn new(name: &str, wcet: Nanos, select: VSelect) -> Self {
        VersionDescriptor {
            name: name.to_string(),
            entry: JobBody::Synthetic,
            static_args: None,
            wcet,
            select,
            exec_time: None,
        }
    }

    pub fn with_body(mut self, body: BodyFn) -> Self {
        self.entry = JobBody::Func(body);
        self
    }

    pub fn with_static_args(mut self, args: StaticArgs) -> Self {
        self.static_args = Some(args);
        self
    }

    pub fn with_exec_time(mut self, exec: Nanos) -> Self {
        self.exec_time = Some(exec);
        self
    }
}

impl fmt::Debug for VersionDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VersionDescriptor")
            .field("name", &self.name)
            .field("entry", &self.entry)
            .field("wcet", &self.wcet)
            .field("select", &self.select)
            .field("exec_time", &self.exec_time)
            .finish()
    }
}

/// A registered task.
#[derive(Clone, Debug)]
pub struct Task {
    pub id: TaskId,
    pub desc: TaskDescriptor,
    pub versions: Vec<VersionId>,
    /// Input channels with the number of tokens one job consumes.
    pub inputs: Vec<(ChannelId, u32)>,
    /// Output channels with the number of tokens one job produces.
    pub outputs: Vec<(ChannelId, u32)>,
}

impl Task {
    pub fn name(&self) -> &str {
        &self.desc.name
    }

    /// Released by the scheduler on a timer: periodic tasks and graph roots
    /// carrying a period.
    pub fn is_periodic_release(&self) -> bool {
        match self.desc.kind {
            TaskKind::Periodic => true,
            TaskKind::GraphNode => self.desc.period.is_some() && self.inputs.is_empty(),
            _ => false,
        }
    }

    /// Contributes to the scheduler tick.
    pub fn is_recurring(&self) -> bool {
        self.is_periodic_release() || self.desc.kind == TaskKind::Sporadic
    }

    pub fn is_data_driven(&self) -> bool {
        self.desc.kind == TaskKind::GraphNode && !self.inputs.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Version {
    pub id: VersionId,
    pub task: TaskId,
    pub desc: VersionDescriptor,
    pub accelerators: BTreeSet<AccelId>,
}

impl Version {
    pub fn exec_time(&self) -> Nanos {
        self.desc.exec_time.unwrap_or(self.desc.wcet)
    }

    pub fn uses_accelerator(&self) -> bool {
        !self.accelerators.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcceleratorDescriptor {
    pub id: AccelId,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappingScheme {
    #[serde(rename = "GLOBAL")]
    Global,
    #[serde(rename = "PARTITIONED")]
    Partitioned,
    #[serde(rename = "OFFLINE")]
    Offline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorityAssignment {
    #[serde(rename = "RM")]
    Rm,
    #[serde(rename = "DM")]
    Dm,
    #[serde(rename = "EDF")]
    Edf,
    #[serde(rename = "USER")]
    User,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VersionSelection {
    #[serde(rename = "ENERGY")]
    Energy,
    #[serde(rename = "ENERGY_TIME")]
    EnergyTime,
    #[serde(rename = "MODE")]
    Mode,
    #[serde(rename = "BITMASK")]
    Bitmask,
    #[serde(rename = "USER")]
    User,
    /// Declaration order (on-line) or table-given (off-line).
    #[default]
    #[serde(rename = "PRESELECTED")]
    Preselected,
}

impl VersionSelection {
    pub fn variant_name(self) -> &'static str {
        match self {
            VersionSelection::Energy => "energy",
            VersionSelection::EnergyTime => "energy_time",
            VersionSelection::Mode => "mode",
            VersionSelection::Bitmask => "bitmask",
            VersionSelection::User => "user",
            VersionSelection::Preselected => "any",
        }
    }

    pub fn accepts(self, props: &VSelect) -> bool {
        matches!(
            (self, props),
            (VersionSelection::Preselected, _)
                | (VersionSelection::Energy, VSelect::Energy { .. })
                | (VersionSelection::EnergyTime, VSelect::EnergyTime { .. })
                | (VersionSelection::Mode, VSelect::Mode { .. })
                | (VersionSelection::Bitmask, VSelect::Bitmask { .. })
                | (VersionSelection::User, VSelect::User { .. })
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaitingStrategy {
    #[default]
    Sleep,
    Spin,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LockingStrategy {
    #[default]
    OsLock,
    LockFree,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockSource {
    #[default]
    Monotonic,
    Virtual,
}

/// Restricts which versions of multi-version tasks may be selected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionFilter {
    CpuOnly,
    AccelOnly,
    #[default]
    Both,
}

impl VersionFilter {
    pub fn label(self) -> &'static str {
        match self {
            VersionFilter::CpuOnly => "cpu",
            VersionFilter::AccelOnly => "gpu",
            VersionFilter::Both => "both",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "cpu" | "cpu_only" | "cpu-only" => Some(VersionFilter::CpuOnly),
            "gpu" | "accel" | "gpu_only" | "gpu-only" | "accel_only" => {
                Some(VersionFilter::AccelOnly)
            }
            "both" => Some(VersionFilter::Both),
            _ => None,
        }
    }

    fn admits(self, v: &Version) -> bool {
        match self {
            VersionFilter::CpuOnly => !v.uses_accelerator(),
            VersionFilter::AccelOnly => v.uses_accelerator(),
            VersionFilter::Both => true,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_workers() -> usize {
    1
}

/// One scheduling configuration, fixed for the lifetime of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub mapping_scheme: MappingScheme,
    pub priority_assignment: PriorityAssignment,
    #[serde(default = "default_true")]
    pub preemptive: bool,
    #[serde(default)]
    pub version_selection: VersionSelection,
    #[serde(default)]
    pub waiting_strategy: WaitingStrategy,
    #[serde(default)]
    pub locking_strategy: LockingStrategy,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    #[serde(default)]
    pub clock_source: ClockSource,
    #[serde(default = "default_true")]
    pub priority_inheritance: bool,
    #[serde(default)]
    pub version_filter: VersionFilter,
    /// Scheduler period override; must divide the gcd of the periods.
    #[serde(default, with = "crate::time::serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub scheduler_tick: Option<Nanos>,
}

impl PolicyConfig {
    pub fn new(mapping: MappingScheme, priority: PriorityAssignment, workers: usize) -> Self {
        PolicyConfig {
            mapping_scheme: mapping,
            priority_assignment: priority,
            preemptive: mapping != MappingScheme::Offline,
            version_selection: VersionSelection::Preselected,
            waiting_strategy: WaitingStrategy::Sleep,
            locking_strategy: LockingStrategy::OsLock,
            worker_count: workers,
            clock_source: ClockSource::Monotonic,
            priority_inheritance: true,
            version_filter: VersionFilter::Both,
            scheduler_tick: None,
        }
    }

    pub fn preemptive(mut self, on: bool) -> Self {
        self.preemptive = on;
        self
    }

    pub fn selection(mut self, method: VersionSelection) -> Self {
        self.version_selection = method;
        self
    }

    pub fn is_online(&self) -> bool {
        self.mapping_scheme != MappingScheme::Offline
    }

    /// Short policy label such as `G-EDF` or `P-DM`.
    pub fn policy_label(&self) -> String {
        let m = match self.mapping_scheme {
            MappingScheme::Global => "G",
            MappingScheme::Partitioned => "P",
            MappingScheme::Offline => "OFF",
        };
        let p = match self.priority_assignment {
            PriorityAssignment::Rm => "RM",
            PriorityAssignment::Dm => "DM",
            PriorityAssignment::Edf => "EDF",
            PriorityAssignment::User => "USER",
        };
        format!("{m}-{p}")
    }

    pub fn validate(&self) -> Result<()> {
        if self.worker_count == 0 {
            return Err(Error::Config("worker_count must be positive".into()));
        }
        if self.mapping_scheme == MappingScheme::Offline {
            if self.preemptive {
                return Err(Error::Config(
                    "mapping_scheme=OFFLINE conflicts with preemptive=true: OFFLINE forbids preemption"
                        .into(),
                ));
            }
            if self.version_selection != VersionSelection::Preselected {
                return Err(Error::Config(format!(
                    "mapping_scheme=OFFLINE conflicts with version_selection={:?}: OFFLINE requires PRESELECTED",
                    self.version_selection
                )));
            }
        }
        Ok(())
    }

    /// Applies the version filter: if no version of the task passes, all of
    /// them stay candidates (single-flavour tasks are never starved).
    pub fn filter_versions<'a>(&self, versions: impl Iterator<Item = &'a Version> + Clone) -> Vec<VersionId> {
        let kept: Vec<VersionId> = versions
            .clone()
            .filter(|v| self.version_filter.admits(v))
            .map(|v| v.id)
            .collect();
        if kept.is_empty() {
            versions.map(|v| v.id).collect()
        } else {
            kept
        }
    }
}

/// Global inputs of version selection that are not per-version properties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSettings {
    pub execution_mode: u64,
    pub permission_mask: u64,
    pub battery_level: u64,
    /// Weight of normalized time against normalized energy (ENERGY_TIME).
    pub alpha: f64,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings {
            execution_mode: 1,
            permission_mask: u64::MAX,
            battery_level: u64::MAX,
            alpha: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    Initialized,
    Running,
    Stopped,
    Cleaned,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Created => "created",
            Phase::Initialized => "initialized",
            Phase::Running => "running",
            Phase::Stopped => "stopped",
            Phase::Cleaned => "cleaned",
        };
        f.write_str(s)
    }
}
