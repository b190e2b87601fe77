//! Declaration-phase API and the compiled, immutable task set handed to the
//! backends.

use std::collections::BTreeSet;
use std::sync::Arc;

use log::warn;

use crate::backend::realtime::{RealtimeOptions, RealtimeRun};
use crate::backend::report::RunReport;
use crate::backend::sim::{run_simulation, Horizon, SimJobModel, SimOutcome};
use crate::backend::trace::Trace;
use crate::error::{Error, Result};
use crate::graph::{check_acyclic, ChannelDescriptor};
use crate::model::{
    AccelId, AcceleratorDescriptor, ChannelId, MappingScheme, Phase, PolicyConfig,
    PriorityAssignment, SelectionSettings, Task, TaskDescriptor, TaskId, TaskKind, VSelect,
    Version, VersionDescriptor, VersionId, VersionSelection,
};
use crate::offline::{validate_table, ScheduleTable};
use crate::priority::StaticPriority;
use crate::time::{checked_lcm, format_duration, gcd, Nanos};

/// Release instant of a sporadic activation requested at `now`: never
/// earlier than one minimum inter-arrival time after the previous release.
pub fn sporadic_release(now: Nanos, last_release: Option<Nanos>, period: Nanos) -> Nanos {
    match last_release {
        Some(last) => now.max(last + period),
        None => now,
    }
}

/// A validated task set. Everything the backends need, immutable for a run.
#[derive(Clone, Debug)]
pub struct TaskSet {
    pub config: PolicyConfig,
    pub selection: SelectionSettings,
    pub tasks: Vec<Task>,
    pub versions: Vec<Version>,
    pub accelerators: Vec<AcceleratorDescriptor>,
    pub channels: Vec<ChannelDescriptor>,
    pub table: Option<ScheduleTable>,
    /// Per task: priority inputs (graph nodes carry their root's values).
    pub statics: Vec<StaticPriority>,
    /// Per task: relative deadline of its jobs (graph deadline for nodes).
    pub deadlines: Vec<Option<Nanos>>,
    /// Per task: versions admitted by the version filter.
    pub candidates: Vec<Vec<VersionId>>,
    /// Scheduler tick; `None` for off-line mapping.
    pub tick: Option<Nanos>,
    /// `None` when the lcm overflows.
    pub hyperperiod: Option<Nanos>,
    pub warnings: Vec<String>,
}

impl TaskSet {
    pub fn task(&self, id: TaskId) -> &Task {
        &self.tasks[id.index()]
    }

    pub fn version(&self, id: VersionId) -> &Version {
        &self.versions[id.index()]
    }

    pub fn task_by_name(&self, name: &str) -> Option<TaskId> {
        self.tasks.iter().find(|t| t.desc.name == name).map(|t| t.id)
    }

    /// Number of ready queues: one shared queue or one per worker.
    pub fn queue_count(&self) -> usize {
        match self.config.mapping_scheme {
            MappingScheme::Global => 1,
            _ => self.config.worker_count,
        }
    }

    /// Queue a task's jobs are inserted into.
    pub fn queue_of(&self, task: TaskId) -> usize {
        match self.config.mapping_scheme {
            MappingScheme::Global => 0,
            _ => self.tasks[task.index()].desc.virt_core_id.unwrap_or(0),
        }
    }
}

/// Scheduler period: gcd of every recurring period.
pub fn scheduler_tick_period(tasks: &[Task]) -> Result<Nanos> {
    tasks
        .iter()
        .filter(|t| t.is_recurring())
        .filter_map(|t| t.desc.period)
        .reduce(gcd)
        .ok_or_else(|| Error::Config("on-line mapping needs at least one recurring task".into()))
}

/// Middleware instance following the init → declare → start ⇄ stop →
/// cleanup life cycle.
pub struct Middleware {
    phase: Phase,
    config: PolicyConfig,
    selection: SelectionSettings,
    tasks: Vec<Task>,
    versions: Vec<Version>,
    accelerators: Vec<AcceleratorDescriptor>,
    channels: Vec<ChannelDescriptor>,
    table: Option<ScheduleTable>,
    realtime: RealtimeOptions,
    run: Option<RealtimeRun>,
    last: Option<(Trace, RunReport)>,
}

impl Middleware {
    pub fn init(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        Ok(Middleware {
            phase: Phase::Initialized,
            config,
            selection: SelectionSettings::default(),
            tasks: Vec::new(),
            versions: Vec::new(),
            accelerators: Vec::new(),
            channels: Vec::new(),
            table: None,
            realtime: RealtimeOptions::default(),
            run: None,
            last: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn versions(&self) -> &[Version] {
        &self.versions
    }

    pub fn channels(&self) -> &[ChannelDescriptor] {
        &self.channels
    }

    pub fn accelerators(&self) -> &[AcceleratorDescriptor] {
        &self.accelerators
    }

    pub fn table(&self) -> Option<&ScheduleTable> {
        self.table.as_ref()
    }

    pub fn selection_settings(&self) -> &SelectionSettings {
        &self.selection
    }

    fn declaring(&self, op: &'static str) -> Result<()> {
        match self.phase {
            Phase::Initialized | Phase::Stopped => Ok(()),
            phase => Err(Error::Phase { op, phase }),
        }
    }

    fn task_mut(&mut self, id: TaskId) -> Result<&mut Task> {
        self.tasks
            .get_mut(id.index())
            .ok_or_else(|| Error::unknown("task", id))
    }

    pub fn task_decl(&mut self, desc: TaskDescriptor) -> Result<TaskId> {
        self.declaring("task_decl")?;
        let missing = |field| Error::MissingField {
            task: desc.name.clone(),
            field,
        };
        if self.tasks.iter().any(|t| t.desc.name == desc.name) {
            return Err(Error::Config(format!("duplicate task name {}", desc.name)));
        }
        match desc.kind {
            TaskKind::Periodic | TaskKind::Sporadic => {
                if desc.period.unwrap_or(0) == 0 {
                    return Err(missing("period"));
                }
            }
            TaskKind::Aperiodic => {
                if desc.period.is_some() {
                    return Err(Error::Config(format!(
                        "aperiodic task {} must not carry a period",
                        desc.name
                    )));
                }
                if desc.deadline.is_none() {
                    return Err(missing("deadline"));
                }
            }
            TaskKind::GraphNode => {
                if desc.period == Some(0) {
                    return Err(missing("period"));
                }
            }
        }
        if desc.deadline == Some(0) {
            return Err(Error::Config(format!("task {}: deadline must be positive", desc.name)));
        }
        if self.config.mapping_scheme == MappingScheme::Partitioned {
            let core = desc.virt_core_id.ok_or_else(|| missing("virt_core_id"))?;
            if core >= self.config.worker_count {
                return Err(Error::Config(format!(
                    "task {}: virt_core_id {core} out of range (worker_count {})",
                    desc.name, self.config.worker_count
                )));
            }
        }
        let id = TaskId(self.tasks.len() as u32);
        self.tasks.push(Task {
            id,
            desc,
            versions: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        });
        Ok(id)
    }

    pub fn version_decl(&mut self, task: TaskId, desc: VersionDescriptor) -> Result<VersionId> {
        self.declaring("version_decl")?;
        let method = self.config.version_selection;
        if !method.accepts(&desc.select) {
            return Err(Error::VariantMismatch {
                expected: method.variant_name(),
                got: desc.select.variant_name(),
            });
        }
        if desc.wcet == 0 {
            return Err(Error::Config(format!("version {}: wcet must be positive", desc.name)));
        }
        let id = VersionId(self.versions.len() as u32);
        let versions = &self.versions;
        let t = self
            .tasks
            .get_mut(task.index())
            .ok_or_else(|| Error::unknown("task", task))?;
        if let Some(first) = t.versions.first() {
            let kind = versions[first.index()].desc.select.variant_name();
            if method != VersionSelection::Preselected && kind != desc.select.variant_name() {
                return Err(Error::VariantMismatch {
                    expected: kind,
                    got: desc.select.variant_name(),
                });
            }
        }
        t.versions.push(id);
        self.versions.push(Version {
            id,
            task,
            desc,
            accelerators: BTreeSet::new(),
        });
        Ok(id)
    }

    pub fn hwaccel_decl(&mut self, name: &str) -> Result<AccelId> {
        self.declaring("hwaccel_decl")?;
        let id = AccelId(self.accelerators.len() as u32);
        self.accelerators.push(AcceleratorDescriptor {
            id,
            name: name.to_string(),
        });
        Ok(id)
    }

    pub fn hwaccel_use(&mut self, task: TaskId, version: VersionId, accel: AccelId) -> Result<()> {
        self.declaring("hwaccel_use")?;
        if accel.index() >= self.accelerators.len() {
            return Err(Error::unknown("accelerator", accel));
        }
        let v = self
            .versions
            .get_mut(version.index())
            .filter(|v| v.task == task)
            .ok_or_else(|| Error::unknown("version", format!("{version} of {task}")))?;
        v.accelerators.insert(accel);
        Ok(())
    }

    /// Declares a channel of `capacity` elements of `element_size` bytes;
    /// capacity 0 is a precedence-only edge.
    pub fn channel_decl(&mut self, name: &str, element_size: usize, capacity: usize) -> Result<ChannelId> {
        self.declaring("channel_decl")?;
        let id = ChannelId(self.channels.len() as u32);
        self.channels.push(ChannelDescriptor {
            id,
            name: name.to_string(),
            element_size: if capacity == 0 { 0 } else { element_size },
            capacity,
            src: None,
            dst: None,
            produce: 1,
            consume: 1,
        });
        Ok(id)
    }

    pub fn channel_connect(&mut self, src: TaskId, dst: TaskId, ch: ChannelId) -> Result<()> {
        self.declaring("channel_connect")?;
        for t in [src, dst] {
            if t.index() >= self.tasks.len() {
                return Err(Error::unknown("task", t));
            }
        }
        let c = self
            .channels
            .get_mut(ch.index())
            .ok_or_else(|| Error::unknown("channel", ch))?;
        if c.is_connected() {
            return Err(Error::ChannelConnected(c.name.clone()));
        }
        c.src = Some(src);
        c.dst = Some(dst);
        let (p, k) = (c.produce, c.consume);
        self.tasks[src.index()].outputs.push((ch, p));
        self.tasks[dst.index()].inputs.push((ch, k));
        Ok(())
    }

    /// Tokens pushed per producer job and required per consumer job.
    pub fn channel_rates(&mut self, ch: ChannelId, produce: u32, consume: u32) -> Result<()> {
        self.declaring("channel_rates")?;
        if produce == 0 || consume == 0 {
            return Err(Error::Config("channel rates must be at least 1".into()));
        }
        let c = self
            .channels
            .get_mut(ch.index())
            .ok_or_else(|| Error::unknown("channel", ch))?;
        c.produce = produce;
        c.consume = consume;
        let (src, dst) = (c.src, c.dst);
        if let Some(s) = src {
            for o in &mut self.task_mut(s)?.outputs {
                if o.0 == ch {
                    o.1 = produce;
                }
            }
        }
        if let Some(d) = dst {
            for i in &mut self.task_mut(d)?.inputs {
                if i.0 == ch {
                    i.1 = consume;
                }
            }
        }
        Ok(())
    }

    pub fn set_table(&mut self, table: ScheduleTable) -> Result<()> {
        self.declaring("set_table")?;
        self.table = Some(table);
        Ok(())
    }

    pub fn set_selection(&mut self, settings: SelectionSettings) -> Result<()> {
        self.declaring("set_selection")?;
        if !(0.0..=1.0).contains(&settings.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", settings.alpha)));
        }
        self.selection = settings;
        Ok(())
    }

    pub fn set_realtime_options(&mut self, options: RealtimeOptions) {
        self.realtime = options;
    }

    /// Runs every start-time check and freezes the task set.
    pub fn compile(&self) -> Result<TaskSet> {
        compile(
            &self.config,
            &self.selection,
            &self.tasks,
            &self.versions,
            &self.accelerators,
            &self.channels,
            self.table.as_ref(),
        )
    }

    /// Runs the task set on the virtual-time simulator. Allowed whenever the
    /// real backend is not running.
    pub fn simulate(&self, model: &SimJobModel, horizon: Option<Horizon>, seed: u64) -> Result<SimOutcome> {
        self.declaring("simulate")?;
        run_simulation(&self.compile()?, model, horizon, seed)
    }

    /// Starts the threaded backend; time 0 is captured here.
    pub fn start(&mut self) -> Result<()> {
        match self.phase {
            Phase::Initialized | Phase::Stopped => {}
            phase => return Err(Error::Phase { op: "start", phase }),
        }
        let ts = Arc::new(self.compile()?);
        self.run = Some(RealtimeRun::launch(ts, self.realtime.clone())?);
        self.phase = Phase::Running;
        Ok(())
    }

    /// Requests one job of a sporadic or aperiodic task.
    pub fn task_activate(&self, task: TaskId) -> Result<()> {
        if self.phase != Phase::Running {
            return Err(Error::Phase {
                op: "task_activate",
                phase: self.phase,
            });
        }
        let t = self
            .tasks
            .get(task.index())
            .ok_or_else(|| Error::unknown("task", task))?;
        if !matches!(t.desc.kind, TaskKind::Sporadic | TaskKind::Aperiodic) {
            return Err(Error::Usage(format!(
                "task_activate on {} task {}",
                match t.desc.kind {
                    TaskKind::Periodic => "periodic",
                    _ => "graph_node",
                },
                t.desc.name
            )));
        }
        self.run.as_ref().expect("running").activate(task)
    }

    /// Stops releasing jobs, drains the ready queues and returns the run's
    /// report.
    pub fn stop(&mut self) -> Result<&RunReport> {
        if self.phase != Phase::Running {
            return Err(Error::Phase {
                op: "stop",
                phase: self.phase,
            });
        }
        let run = self.run.take().expect("running");
        self.phase = Phase::Stopped;
        let outcome = run.stop()?;
        self.last = Some(outcome);
        Ok(&self.last.as_ref().expect("just set").1)
    }

    /// Trace and report of the last real-backend run.
    pub fn last_run(&self) -> Option<&(Trace, RunReport)> {
        self.last.as_ref()
    }

    pub fn cleanup(&mut self) -> Result<()> {
        if self.phase != Phase::Stopped {
            return Err(Error::Phase {
                op: "cleanup",
                phase: self.phase,
            });
        }
        self.phase = Phase::Cleaned;
        Ok(())
    }
}

impl Drop for Middleware {
    fn drop(&mut self) {
        if let Some(run) = self.run.take() {
            let _ = run.stop();
        }
    }
}

/// Start-time validation shared by the API and the document loader.
pub fn compile(
    config: &PolicyConfig,
    selection: &SelectionSettings,
    tasks: &[Task],
    versions: &[Version],
    accelerators: &[AcceleratorDescriptor],
    channels: &[ChannelDescriptor],
    table: Option<&ScheduleTable>,
) -> Result<TaskSet> {
    config.validate()?;
    let mut warnings = Vec::new();
    for t in tasks {
        if t.versions.is_empty() {
            return Err(Error::MissingField {
                task: t.desc.name.clone(),
                field: "versions",
            });
        }
        if config.priority_assignment == PriorityAssignment::User && t.desc.user_priority.is_none() {
            return Err(Error::MissingField {
                task: t.desc.name.clone(),
                field: "user_priority",
            });
        }
        if config.priority_assignment != PriorityAssignment::User && t.desc.user_priority.is_some() {
            warnings.push(format!(
                "task {}: user_priority ignored under {:?}",
                t.desc.name, config.priority_assignment
            ));
        }
        if t.desc.kind == TaskKind::GraphNode && !t.inputs.is_empty() && t.desc.period.is_some() {
            return Err(Error::Config(format!(
                "graph node {} has input channels and must not carry a period",
                t.desc.name
            )));
        }
        if t.desc.kind == TaskKind::GraphNode && t.inputs.is_empty() && t.desc.period.is_none() {
            warnings.push(format!(
                "graph node {} has no inputs and no period; it never activates",
                t.desc.name
            ));
        }
        if config.version_selection == VersionSelection::User
            && !t.versions.iter().any(|v| {
                matches!(versions[v.index()].desc.select, VSelect::User { selector: Some(_) })
            })
        {
            return Err(Error::Selection {
                task: t.desc.name.clone(),
                reason: "USER selection without a selector callback".into(),
            });
        }
    }
    for c in channels {
        if !c.is_connected() {
            return Err(Error::Config(format!("channel {} ({}) is not connected", c.name, c.id)));
        }
        if c.consume as usize > c.token_capacity() {
            return Err(Error::Config(format!(
                "channel {}: consumer needs {} tokens but capacity is {}",
                c.name,
                c.consume,
                c.token_capacity()
            )));
        }
    }
    check_acyclic(tasks, channels)?;

    let roots = graph_roots(tasks, channels);
    let mut statics = Vec::with_capacity(tasks.len());
    let mut deadlines = Vec::with_capacity(tasks.len());
    for t in tasks {
        let src = roots[t.id.index()].map(|r| &tasks[r.index()]).unwrap_or(t);
        statics.push(StaticPriority {
            period: src.desc.period,
            deadline: src.desc.relative_deadline(),
            user: t.desc.user_priority,
        });
        deadlines.push(src.desc.relative_deadline());
        if config.priority_assignment != PriorityAssignment::Edf
            && config.is_online()
            && t.is_data_driven()
            && roots[t.id.index()].is_none()
        {
            return Err(Error::MissingField {
                task: t.desc.name.clone(),
                field: "period (of a graph root)",
            });
        }
    }
    let candidates = tasks
        .iter()
        .map(|t| config.filter_versions(t.versions.iter().map(|v| &versions[v.index()])))
        .collect();

    let (tick, hyperperiod) = if config.is_online() {
        let mut tick = scheduler_tick_period(tasks)?;
        if let Some(t) = config.scheduler_tick {
            if t == 0 || tick % t != 0 {
                return Err(Error::Config(format!(
                    "scheduler_tick {} does not divide the period gcd {}",
                    format_duration(t),
                    format_duration(tick)
                )));
            }
            tick = t;
        }
        let hyper = tasks
            .iter()
            .filter(|t| t.is_recurring())
            .filter_map(|t| t.desc.period)
            .try_fold(1u64, checked_lcm);
        (Some(tick), hyper)
    } else {
        let table = table.ok_or_else(|| Error::Config("OFFLINE mapping requires a schedule table".into()))?;
        warnings.extend(validate_table(table, tasks, versions, config.worker_count)?);
        let listed: BTreeSet<TaskId> = table.cores.iter().flatten().map(|e| e.task).collect();
        for t in tasks.iter().filter(|t| !listed.contains(&t.id)) {
            warnings.push(format!("task {} is not in the schedule table and never runs", t.desc.name));
        }
        (None, Some(table.period))
    };
    if config.is_online() && table.is_some() {
        warnings.push("schedule table ignored under on-line mapping".into());
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(TaskSet {
        config: config.clone(),
        selection: selection.clone(),
        tasks: tasks.to_vec(),
        versions: versions.to_vec(),
        accelerators: accelerators.to_vec(),
        channels: channels.to_vec(),
        table: table.cloned(),
        statics,
        deadlines,
        candidates,
        tick,
        hyperperiod,
        warnings,
    })
}

/// For every data-driven node, the lowest-id timer-released ancestor.
fn graph_roots(tasks: &[Task], channels: &[ChannelDescriptor]) -> Vec<Option<TaskId>> {
    let preds = |t: TaskId| {
        channels
            .iter()
            .filter(move |c| c.dst == Some(t))
            .filter_map(|c| c.src)
    };
    tasks
        .iter()
        .map(|t| {
            if !t.is_data_driven() {
                return None;
            }
            let mut seen = BTreeSet::new();
            let mut stack: Vec<TaskId> = preds(t.id).collect();
            let mut best: Option<TaskId> = None;
            while let Some(p) = stack.pop() {
                if !seen.insert(p) {
                    continue;
                }
                if tasks[p.index()].is_periodic_release() {
                    best = Some(best.map_or(p, |b| b.min(p)));
                }
                stack.extend(preds(p));
            }
            best
        })
        .collect()
}
