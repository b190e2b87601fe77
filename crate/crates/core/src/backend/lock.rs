//! FIFO-fair, non-reentrant lock used for the shared scheduling state.
//!
//! Admission is a ticket counter in both strategies, so grants follow request
//! order. The strategies differ only in how a waiter passes time: parking on
//! a condition variable (`os_lock`) or polling the counter (`lock_free`).

use std::cell::Cell;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::model::LockingStrategy;

static NEXT_THREAD_TOKEN: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static THREAD_TOKEN: Cell<u64> = const { Cell::new(0) };
}

fn thread_token() -> u64 {
    THREAD_TOKEN.with(|t| {
        if t.get() == 0 {
            t.set(NEXT_THREAD_TOKEN.fetch_add(1, Ordering::Relaxed));
        }
        t.get()
    })
}

pub struct FifoLock<T> {
    strategy: LockingStrategy,
    next_ticket: AtomicU64,
    serving: AtomicU64,
    owner: AtomicU64,
    park: Mutex<()>,
    wake: Condvar,
    data: Mutex<T>,
}

pub struct FifoGuard<'a, T> {
    lock: &'a FifoLock<T>,
    data: Option<MutexGuard<'a, T>>,
}

impl<T> FifoLock<T> {
    pub fn new(value: T, strategy: LockingStrategy) -> Self {
        FifoLock {
            strategy,
            next_ticket: AtomicU64::new(0),
            serving: AtomicU64::new(0),
            owner: AtomicU64::new(0),
            park: Mutex::new(()),
            wake: Condvar::new(),
            data: Mutex::new(value),
        }
    }

    pub fn strategy(&self) -> LockingStrategy {
        self.strategy
    }

    pub fn lock(&self) -> Result<FifoGuard<'_, T>> {
        self.lock_timed().map(|(g, _)| g)
    }

    /// Acquires the lock and reports how long the caller waited.
    pub fn lock_timed(&self) -> Result<(FifoGuard<'_, T>, Duration)> {
        let me = thread_token();
        if self.owner.load(Ordering::Acquire) == me {
            return Err(Error::Reentrant);
        }
        let asked = Instant::now();
        let ticket = self.next_ticket.fetch_add(1, Ordering::AcqRel);
        match self.strategy {
            LockingStrategy::LockFree => {
                let mut spins = 0u32;
                while self.serving.load(Ordering::Acquire) != ticket {
                    std::hint::spin_loop();
                    spins += 1;
                    if spins.is_multiple_of(64) {
                        std::thread::yield_now();
                    }
                }
            }
            LockingStrategy::OsLock => {
                let mut g = self.park.lock().unwrap_or_else(|e| e.into_inner());
                while self.serving.load(Ordering::Acquire) != ticket {
                    g = self.wake.wait(g).unwrap_or_else(|e| e.into_inner());
                }
            }
        }
        let waited = asked.elapsed();
        self.owner.store(me, Ordering::Release);
        let data = self
            .data
            .try_lock()
            .map_err(|_| Error::Internal("FIFO lock data contended".into()))?;
        Ok((
            FifoGuard {
                lock: self,
                data: Some(data),
            },
            waited,
        ))
    }

    fn unlock(&self) {
        self.owner.store(0, Ordering::Release);
        self.serving.fetch_add(1, Ordering::AcqRel);
        if self.strategy == LockingStrategy::OsLock {
            let _g = self.park.lock().unwrap_or_else(|e| e.into_inner());
            self.wake.notify_all();
        }
    }
}

impl<T> Deref for FifoGuard<'_, T> {
    type Target = T;

    fn deref(&self) -> &T {
        self.data.as_ref().expect("guard alive")
    }
}

impl<T> DerefMut for FifoGuard<'_, T> {
    fn deref_mut(&mut self) -> &mut T {
        self.data.as_mut().expect("guard alive")
    }
}

impl<T> Drop for FifoGuard<'_, T> {
    fn drop(&mut self) {
        self.data.take();
        self.lock.unlock();
    }
}

/// Virtual-time model of the same lock for the simulator: grants in request
/// order and reports each requester's wait.
#[derive(Clone, Debug)]
pub struct SimLock<A> {
    held: bool,
    queue: std::collections::VecDeque<(A, crate::time::Nanos)>,
}

impl<A> Default for SimLock<A> {
    fn default() -> Self {
        SimLock {
            held: false,
            queue: std::collections::VecDeque::new(),
        }
    }
}

impl<A: Copy> SimLock<A> {
    /// `true` when granted immediately; otherwise the actor is queued.
    pub fn request(&mut self, actor: A, now: crate::time::Nanos) -> bool {
        if self.held {
            self.queue.push_back((actor, now));
            false
        } else {
            self.held = true;
            true
        }
    }

    /// Hands the lock to the next queued actor, returning it and its request
    /// time.
    pub fn release(&mut self) -> Option<(A, crate::time::Nanos)> {
        debug_assert!(self.held, "release of a free lock");
        let next = self.queue.pop_front();
        self.held = next.is_some();
        next
    }

    pub fn is_held(&self) -> bool {
        self.held
    }
}
