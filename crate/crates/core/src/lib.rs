//! Real-time middleware model: task sets with multi-version tasks, data-flow
//! graphs and hardware accelerators, scheduled on-line (GLOBAL or
//! PARTITIONED) or from a static table, either in a discrete-event simulator
//! or on real threads.

pub mod backend;
pub mod document;
pub mod error;
pub mod explore;
pub mod graph;
pub mod latency;
pub mod middleware;
pub mod model;
pub mod offline;
pub mod online;
pub mod priority;
pub mod select;
pub mod time;

pub use backend::realtime::{run_realtime, JobContext, RealtimeOptions, RealtimeRun};
pub use backend::report::{Overheads, RunReport, Stats, TaskStats};
pub use backend::sim::{run_simulation, ExecModel, Horizon, ModeSwitch, ScriptedActivation, SimJobModel, SimOutcome};
pub use backend::trace::{EventKind, Trace, TraceEvent};
pub use document::TaskSetDocument;
pub use error::{Error, Result};
pub use explore::{run_sweep, SweepSpec};
pub use graph::sdf::{expand_sdf, repetition_vector, SdfGraph};
pub use graph::ChannelDescriptor;
pub use latency::{run_latency, LatencyReport, LatencySpec};
pub use middleware::{Middleware, TaskSet};
pub use model::*;
pub use offline::{ScheduleTable, TableEntry};
pub use priority::{JobClass, PriorityKey};
pub use time::{ms, us, Nanos};
