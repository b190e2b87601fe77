//! DAG task graphs: bounded FIFO channels, data-driven activation and SDF
//! expansion.

mod channel;
pub mod sdf;

use std::collections::VecDeque;

pub use channel::{in_job, Channel, JobScope, Token};
pub use sdf::{expand_sdf, repetition_vector, Expansion, SdfActor, SdfEdge, SdfGraph};

use crate::error::{Error, Result};
use crate::model::{ChannelId, Task, TaskId};
use crate::time::Nanos;

/// A declared channel. Capacity is counted in elements; a capacity of 0 is a
/// precedence-only edge that still holds one virtual token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelDescriptor {
    pub id: ChannelId,
    pub name: String,
    pub element_size: usize,
    pub capacity: usize,
    pub src: Option<TaskId>,
    pub dst: Option<TaskId>,
    /// Tokens pushed by one job of `src`.
    pub produce: u32,
    /// Tokens required (and popped) by one job of `dst`.
    pub consume: u32,
}

impl ChannelDescriptor {
    pub fn is_connected(&self) -> bool {
        self.src.is_some() && self.dst.is_some()
    }

    pub fn is_precedence_only(&self) -> bool {
        self.capacity == 0
    }

    /// Token capacity used for occupancy accounting.
    pub fn token_capacity(&self) -> usize {
        self.capacity.max(1).max(self.produce as usize)
    }
}

/// Read access to channel occupancy for activation decisions.
pub trait TokenView {
    /// Tokens present and not yet reserved by an activated job.
    fn available(&self, ch: ChannelId) -> u32;
}

/// Token storage the scheduler can claim tokens from when it activates a
/// graph node.
pub trait TokenSource: TokenView {
    /// Claims the oldest `n` unclaimed tokens and returns their stamps.
    fn reserve(&mut self, ch: ChannelId, n: u32) -> Vec<Nanos>;
}

/// `true` iff every input channel of `task` holds at least the required
/// number of unreserved tokens. A node without inputs only "activates" when
/// it is a timer-released root.
pub fn check_activation(task: &Task, view: &impl TokenView) -> bool {
    if task.inputs.is_empty() {
        return task.is_periodic_release();
    }
    task.inputs
        .iter()
        .all(|&(ch, need)| view.available(ch) >= need)
}

/// Rejects directed cycles among the channel connections.
pub fn check_acyclic(tasks: &[Task], channels: &[ChannelDescriptor]) -> Result<()> {
    let n = tasks.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for c in channels {
        if let (Some(s), Some(d)) = (c.src, c.dst) {
            succ[s.index()].push(d.index());
            indegree[d.index()] += 1;
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop_front() {
        seen += 1;
        for &j in &succ[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push_back(j);
            }
        }
    }
    if seen == n {
        Ok(())
    } else {
        let culprit = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
        Err(Error::Cycle(tasks[culprit].desc.name.clone()))
    }
}

/// Token bookkeeping for the simulator: per channel a FIFO of stamps (the
/// absolute deadline of the graph iteration that produced the token).
#[derive(Clone, Debug, Default)]
pub struct TokenLedger {
    fifo: Vec<VecDeque<Nanos>>,
    reserved: Vec<u32>,
    capacity: Vec<usize>,
    pushes: Vec<u64>,
    pops: Vec<u64>,
}

impl TokenLedger {
    pub fn new(channels: &[ChannelDescriptor]) -> Self {
        TokenLedger {
            fifo: vec![VecDeque::new(); channels.len()],
            reserved: vec![0; channels.len()],
            capacity: channels.iter().map(ChannelDescriptor::token_capacity).collect(),
            pushes: vec![0; channels.len()],
            pops: vec![0; channels.len()],
        }
    }

    pub fn occupancy(&self, ch: ChannelId) -> usize {
        self.fifo[ch.index()].len()
    }

    pub fn space(&self, ch: ChannelId) -> usize {
        self.capacity[ch.index()] - self.occupancy(ch)
    }

    pub fn pushes(&self, ch: ChannelId) -> u64 {
        self.pushes[ch.index()]
    }

    pub fn pops(&self, ch: ChannelId) -> u64 {
        self.pops[ch.index()]
    }

    /// Pushes `n` tokens; fails without side effects when they do not fit.
    pub fn push(&mut self, ch: ChannelId, n: u32, stamp: Nanos) -> bool {
        if self.space(ch) < n as usize {
            return false;
        }
        let q = &mut self.fifo[ch.index()];
        q.extend(std::iter::repeat_n(stamp, n as usize));
        self.pushes[ch.index()] += u64::from(n);
        true
    }

    /// Reserves the oldest `n` unreserved tokens, returning their stamps.
    pub fn reserve(&mut self, ch: ChannelId, n: u32) -> Vec<Nanos> {
        let i = ch.index();
        let start = self.reserved[i] as usize;
        let stamps = self.fifo[i]
            .iter()
            .skip(start)
            .take(n as usize)
            .copied()
            .collect();
        self.reserved[i] += n;
        stamps
    }

    /// Pops `n` previously reserved tokens.
    pub fn pop_reserved(&mut self, ch: ChannelId, n: u32) -> Vec<Nanos> {
        let i = ch.index();
        debug_assert!(self.reserved[i] >= n, "popping unreserved tokens");
        self.reserved[i] -= n;
        self.pops[i] += u64::from(n);
        self.fifo[i].drain(..n as usize).collect()
    }
}

impl TokenSource for TokenLedger {
    fn reserve(&mut self, ch: ChannelId, n: u32) -> Vec<Nanos> {
        TokenLedger::reserve(self, ch, n)
    }
}

impl TokenView for TokenLedger {
    fn available(&self, ch: ChannelId) -> u32 {
        self.fifo[ch.index()].len() as u32 - self.reserved[ch.index()]
    }
}
