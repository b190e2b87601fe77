//! JSON task-set documents: the file-driven equivalent of the declaration
//! API. Unknown keys are rejected at every level.
//!
//! Durations accept either an integer number of nanoseconds or a string with
//! a unit (`"10ms"`); serialization always writes nanoseconds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::sim::SimJobModel;
use crate::error::{Error, Result};
use crate::graph::sdf::{expand_sdf, Expansion, SdfGraph};
use crate::middleware::{Middleware, TaskSet};
use crate::model::{
    PolicyConfig, SelectionSettings, TaskDescriptor, TaskKind, VSelect, VersionDescriptor,
};
use crate::offline::{ScheduleTable, TableEntry};
use crate::time::{serde_duration, serde_opt_duration, Nanos};

fn is_default<T: Default + PartialEq>(v: &T) -> bool {
    *v == T::default()
}

fn one() -> u32 {
    1
}

fn is_one(v: &u32) -> bool {
    *v == 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSetDocument {
    pub config: PolicyConfig,
    #[serde(default, skip_serializing_if = "is_default")]
    pub selection: SelectionSettings,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accelerators: Vec<String>,
    pub tasks: Vec<TaskDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channels: Vec<ChannelDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub connections: Vec<ConnectionDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sdf: Option<SdfGraph>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<TableDoc>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub sim_model: SimJobModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDoc {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default, with = "serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub period: Option<Nanos>,
    #[serde(default, with = "serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub deadline: Option<Nanos>,
    #[serde(default, with = "serde_duration", skip_serializing_if = "is_default")]
    pub release_offset: Nanos,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub virt_core_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_priority: Option<u64>,
    pub versions: Vec<VersionDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VersionDoc {
    pub name: String,
    #[serde(with = "serde_duration")]
    pub wcet: Nanos,
    /// Actual execution time; defaults to `wcet`.
    #[serde(default, with = "serde_opt_duration", skip_serializing_if = "Option::is_none")]
    pub exec_time: Option<Nanos>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accelerators: Vec<String>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub select: SelectDoc,
}

/// Selection properties. User callbacks cannot be expressed in a file.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectDoc {
    Energy {
        energy_budget: u64,
    },
    EnergyTime {
        energy_cost: u64,
        #[serde(with = "serde_duration")]
        exec_time: Nanos,
    },
    Mode {
        mode_mask: u64,
    },
    Bitmask {
        permission_mask: u64,
    },
    #[default]
    Unspecified,
}

impl SelectDoc {
    fn to_model(&self) -> VSelect {
        match *self {
            SelectDoc::Energy { energy_budget } => VSelect::energy(energy_budget),
            SelectDoc::EnergyTime {
                energy_cost,
                exec_time,
            } => VSelect::EnergyTime {
                energy_cost,
                exec_time,
            },
            SelectDoc::Mode { mode_mask } => VSelect::Mode { mode_mask },
            SelectDoc::Bitmask { permission_mask } => VSelect::Bitmask { permission_mask },
            SelectDoc::Unspecified => VSelect::Unspecified,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "is_default")]
    pub element_size: usize,
    /// Elements; 0 declares a precedence-only edge.
    #[serde(default)]
    pub capacity: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub produce: u32,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub consume: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionDoc {
    pub src: String,
    pub dst: String,
    pub channel: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableDoc {
    #[serde(with = "serde_duration")]
    pub period: Nanos,
    /// One row per core.
    pub cores: Vec<Vec<EntryDoc>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryDoc {
    pub task: String,
    pub version: String,
    #[serde(with = "serde_duration")]
    pub offset: Nanos,
}

impl TaskSetDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The document with its `sdf` section expanded, or a copy of itself.
    pub fn resolved(&self) -> Result<TaskSetDocument> {
        match &self.sdf {
            Some(_) => Ok(self.expand_sdf()?.0),
            None => Ok(self.clone()),
        }
    }

    /// Declares everything through the middleware API.
    pub fn to_middleware(&self) -> Result<Middleware> {
        if self.sdf.is_some() {
            return self.resolved()?.to_middleware();
        }
        let mut mw = Middleware::init(self.config.clone())?;
        mw.set_selection(self.selection.clone())?;
        let mut accels = BTreeMap::new();
        for name in &self.accelerators {
            if accels.contains_key(name.as_str()) {
                return Err(Error::Config(format!("duplicate accelerator {name}")));
            }
            accels.insert(name.as_str(), mw.hwaccel_decl(name)?);
        }
        let mut tasks = BTreeMap::new();
        let mut versions = BTreeMap::new();
        for t in &self.tasks {
            let id = mw.task_decl(t.descriptor())?;
            tasks.insert(t.name.as_str(), id);
            for v in &t.versions {
                let mut desc = VersionDescriptor::new(&v.name, v.wcet, v.select.to_model());
                desc.exec_time = v.exec_time;
                let vid = mw.version_decl(id, desc)?;
                if versions.insert((t.name.as_str(), v.name.as_str()), vid).is_some() {
                    return Err(Error::Config(format!(
                        "task {}: duplicate version name {}",
                        t.name, v.name
                    )));
                }
                for a in &v.accelerators {
                    let aid = *accels
                        .get(a.as_str())
                        .ok_or_else(|| Error::unknown("accelerator", a))?;
                    mw.hwaccel_use(id, vid, aid)?;
                }
            }
        }
        let mut channels = BTreeMap::new();
        for c in &self.channels {
            if channels.contains_key(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate channel {}", c.name)));
            }
            let id = mw.channel_decl(&c.name, c.element_size, c.capacity)?;
            mw.channel_rates(id, c.produce, c.consume)?;
            channels.insert(c.name.as_str(), id);
        }
        for (i, c) in self.connections.iter().enumerate() {
            let lookup = |name: &str| {
                tasks.get(name).copied().ok_or_else(|| {
                    Error::unknown("task", format!("{name} (connection {i})"))
                })
            };
            let ch = *channels
                .get(c.channel.as_str())
                .ok_or_else(|| Error::unknown("channel", format!("{} (connection {i})", c.channel)))?;
            mw.channel_connect(lookup(&c.src)?, lookup(&c.dst)?, ch)?;
        }
        if let Some(table) = &self.table {
            let mut cores = Vec::with_capacity(table.cores.len());
            for row in &table.cores {
                let mut entries = Vec::with_capacity(row.len());
                for e in row {
                    let task = *tasks
                        .get(e.task.as_str())
                        .ok_or_else(|| Error::unknown("task", &e.task))?;
                    let version = *versions
                        .get(&(e.task.as_str(), e.version.as_str()))
                        .ok_or_else(|| Error::unknown("version", format!("{}/{}", e.task, e.version)))?;
                    entries.push(TableEntry {
                        task,
                        version,
                        offset: e.offset,
                    });
                }
                cores.push(entries);
            }
            mw.set_table(ScheduleTable {
                period: table.period,
                cores,
            })?;
        }
        Ok(mw)
    }

    /// Full validation; the returned task set is ready for a backend.
    pub fn compile(&self) -> Result<TaskSet> {
        self.to_middleware()?.compile()
    }

    /// Replaces the SDF actors by the nodes of one expanded iteration.
    ///
    /// Each actor needs a task of the same name acting as template: every
    /// copy inherits its versions, core and priority. Copies without an
    /// expanded predecessor are roots and inherit the template's period and
    /// deadline. Expanded edges become precedence-only channels.
    pub fn expand_sdf(&self) -> Result<(TaskSetDocument, Expansion)> {
        let sdf = self
            .sdf
            .as_ref()
            .ok_or_else(|| Error::Config("document has no sdf section".into()))?;
        let exp = expand_sdf(sdf)?;
        let templates: BTreeMap<&str, &TaskDoc> = sdf
            .actors
            .iter()
            .map(|a| {
                self.tasks
                    .iter()
                    .find(|t| t.name == a.name)
                    .map(|t| (a.name.as_str(), t))
                    .ok_or_else(|| {
                        Error::Config(format!("SDF actor {} has no task to copy versions from", a.name))
                    })
            })
            .collect::<Result<_>>()?;
        for c in &self.connections {
            for end in [&c.src, &c.dst] {
                if templates.contains_key(end.as_str()) {
                    return Err(Error::Config(format!(
                        "connection on channel {} uses SDF actor {end}; actors connect through the sdf section",
                        c.channel
                    )));
                }
            }
        }
        let mut has_pred = vec![false; exp.nodes.len()];
        for e in &exp.edges {
            has_pred[e.dst] = true;
        }
        let mut out = self.clone();
        out.sdf = None;
        out.tasks.retain(|t| !templates.contains_key(t.name.as_str()));
        for (i, node) in exp.nodes.iter().enumerate() {
            let tpl = templates[sdf.actors[node.actor].name.as_str()];
            let root = !has_pred[i];
            if root && tpl.period.is_none() {
                return Err(Error::MissingField {
                    task: tpl.name.clone(),
                    field: "period",
                });
            }
            out.tasks.push(TaskDoc {
                name: node.name.clone(),
                kind: TaskKind::GraphNode,
                period: if root { tpl.period } else { None },
                deadline: if root { tpl.deadline } else { None },
                release_offset: if root { tpl.release_offset } else { 0 },
                virt_core_id: tpl.virt_core_id,
                user_priority: tpl.user_priority,
                versions: tpl.versions.clone(),
            });
        }
        for e in &exp.edges {
            let (src, dst) = (&exp.nodes[e.src].name, &exp.nodes[e.dst].name);
            let name = format!("{src}->{dst}");
            out.channels.push(ChannelDoc {
                name: name.clone(),
                element_size: 0,
                capacity: 0,
                produce: 1,
                consume: 1,
            });
            out.connections.push(ConnectionDoc {
                src: src.clone(),
                dst: dst.clone(),
                channel: name,
            });
        }
        Ok((out, exp))
    }

    /// One-line validation summary, e.g. `OK, 4 tasks, 4 channels, 2
    /// versions on task left`.
    pub fn summary(ts: &TaskSet) -> String {
        let mut s = format!("OK, {} tasks, {} channels", ts.tasks.len(), ts.channels.len());
        for t in &ts.tasks {
            if t.versions.len() > 1 {
                s.push_str(&format!(", {} versions on task {}", t.versions.len(), t.name()));
            }
        }
        s
    }
}

impl TaskDoc {
    fn descriptor(&self) -> TaskDescriptor {
        TaskDescriptor {
            name: self.name.clone(),
            kind: self.kind,
            period: self.period,
            deadline: self.deadline,
            release_offset: self.release_offset,
            virt_core_id: self.virt_core_id,
            user_priority: self.user_priority,
        }
    }
}
