//! Runtime channels shared between job bodies on the threaded backend.

use std::cell::Cell;
use std::collections::VecDeque;
use std::sync::{Condvar, Mutex, MutexGuard};

use super::{ChannelDescriptor, TokenSource, TokenView};
use crate::error::{Error, Result};
use crate::model::{ChannelId, WaitingStrategy};
use crate::time::Nanos;

thread_local! {
    static IN_JOB: Cell<bool> = const { Cell::new(false) };
}

/// `true` while the current thread executes a job body.
pub fn in_job() -> bool {
    IN_JOB.with(Cell::get)
}

/// Marks the current thread as running a job body until dropped.
pub struct JobScope {
    prev: bool,
}

impl JobScope {
    pub fn enter() -> Self {
        let prev = IN_JOB.with(|c| c.replace(true));
        JobScope { prev }
    }
}

impl Drop for JobScope {
    fn drop(&mut self) {
        IN_JOB.with(|c| c.set(self.prev));
    }
}

/// One element in flight. `stamp` is the absolute deadline of the graph
/// iteration that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub payload: Vec<u8>,
    pub stamp: Nanos,
}

#[derive(Default)]
struct State {
    items: VecDeque<Token>,
    reserved: u32,
    pushes: u64,
    pops: u64,
    closed: bool,
}

/// Bounded single-producer single-consumer FIFO. Push on a full channel and
/// pop on an empty one block according to the waiting strategy.
pub struct Channel {
    desc: ChannelDescriptor,
    waiting: WaitingStrategy,
    state: Mutex<State>,
    changed: Condvar,
}

impl Channel {
    pub fn new(desc: ChannelDescriptor, waiting: WaitingStrategy) -> Self {
        Channel {
            desc,
            waiting,
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
        }
    }

    pub fn descriptor(&self) -> &ChannelDescriptor {
        &self.desc
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn check_payload(&self, payload: &[u8]) -> Result<()> {
        if self.desc.is_precedence_only() {
            if !payload.is_empty() {
                return Err(Error::Usage(format!(
                    "channel {} is precedence-only; push carries no payload",
                    self.desc.name
                )));
            }
        } else if payload.len() != self.desc.element_size {
            return Err(Error::Usage(format!(
                "channel {}: element is {} bytes, got {}",
                self.desc.name,
                self.desc.element_size,
                payload.len()
            )));
        }
        Ok(())
    }

    fn require_job(&self, op: &str) -> Result<()> {
        if in_job() {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "channel_{op} on {} outside a running job",
                self.desc.name
            )))
        }
    }

    /// Non-blocking push; hands the token back when the channel is full.
    pub fn try_push(&self, token: Token) -> Result<Option<Token>> {
        self.check_payload(&token.payload)?;
        let mut st = self.lock();
        if st.items.len() >= self.desc.token_capacity() {
            return Ok(Some(token));
        }
        st.items.push_back(token);
        st.pushes += 1;
        drop(st);
        self.changed.notify_all();
        Ok(None)
    }

    /// Non-blocking pop.
    pub fn try_pop(&self) -> Option<Token> {
        let mut st = self.lock();
        let tok = st.items.pop_front()?;
        st.pops += 1;
        st.reserved = st.reserved.saturating_sub(1);
        drop(st);
        self.changed.notify_all();
        Some(tok)
    }

    /// Blocking push from inside a job body.
    pub fn push(&self, payload: Vec<u8>, stamp: Nanos) -> Result<()> {
        self.require_job("push")?;
        self.check_payload(&payload)?;
        self.push_blocking(Token { payload, stamp })
    }

    /// Blocking pop from inside a job body.
    pub fn pop(&self) -> Result<Token> {
        self.require_job("pop")?;
        self.pop_blocking()
    }

    pub(crate) fn push_blocking(&self, token: Token) -> Result<()> {
        let cap = self.desc.token_capacity();
        let mut st = self.wait_for(|st| st.items.len() < cap)?;
        st.items.push_back(token);
        st.pushes += 1;
        drop(st);
        self.changed.notify_all();
        Ok(())
    }

    pub(crate) fn pop_blocking(&self) -> Result<Token> {
        let mut st = self.wait_for(|st| !st.items.is_empty())?;
        let tok = st.items.pop_front().expect("non-empty");
        st.pops += 1;
        st.reserved = st.reserved.saturating_sub(1);
        drop(st);
        self.changed.notify_all();
        Ok(tok)
    }

    fn wait_for(&self, ready: impl Fn(&State) -> bool) -> Result<MutexGuard<'_, State>> {
        let mut st = self.lock();
        loop {
            if ready(&st) {
                return Ok(st);
            }
            if st.closed {
                return Err(Error::Usage(format!("channel {} closed", self.desc.name)));
            }
            match self.waiting {
                WaitingStrategy::Sleep => {
                    st = self.changed.wait(st).unwrap_or_else(|e| e.into_inner());
                }
                WaitingStrategy::Spin => {
                    drop(st);
                    std::hint::spin_loop();
                    std::thread::yield_now();
                    st = self.lock();
                }
            }
        }
    }

    /// Unblocks every waiter with an error; used at shutdown.
    pub fn close(&self) {
        self.lock().closed = true;
        self.changed.notify_all();
    }

    /// Claims `n` tokens for an activated job, returning their stamps.
    pub fn reserve(&self, n: u32) -> Vec<Nanos> {
        let mut st = self.lock();
        let start = st.reserved as usize;
        let stamps = st.items.iter().skip(start).take(n as usize).map(|t| t.stamp).collect();
        st.reserved += n;
        stamps
    }

    pub fn occupancy(&self) -> usize {
        self.lock().items.len()
    }

    /// (pushes, pops) since creation.
    pub fn counters(&self) -> (u64, u64) {
        let st = self.lock();
        (st.pushes, st.pops)
    }

    pub fn id(&self) -> ChannelId {
        self.desc.id
    }
}

impl TokenSource for &[Channel] {
    fn reserve(&mut self, ch: ChannelId, n: u32) -> Vec<Nanos> {
        self[ch.index()].reserve(n)
    }
}

impl TokenView for &[Channel] {
    fn available(&self, ch: ChannelId) -> u32 {
        (**self).available(ch)
    }
}

impl TokenView for [Channel] {
    fn available(&self, ch: ChannelId) -> u32 {
        let st = self[ch.index()].lock();
        (st.items.len() as u32).saturating_sub(st.reserved)
    }
}
