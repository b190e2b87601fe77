//! Clocks relative to the start instant, and waiting strategies.

use crate::model::WaitingStrategy;
use crate::time::{Nanos, NS_PER_S};

pub trait Clock {
    /// Nanoseconds since the start instant.
    fn now(&self) -> Nanos;
}

/// Virtual time; advances only when told to.
#[derive(Clone, Debug, Default)]
pub struct VirtualClock {
    now: Nanos,
}

impl VirtualClock {
    pub fn advance_to(&mut self, t: Nanos) {
        debug_assert!(t >= self.now, "virtual time went backwards");
        self.now = self.now.max(t);
    }

    /// Waiting is instantaneous in virtual time, whatever the strategy.
    pub fn wait_until(&mut self, t: Nanos, _strategy: WaitingStrategy) {
        self.advance_to(t);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Nanos {
        self.now
    }
}

fn raw_monotonic() -> Nanos {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid out-pointer; CLOCK_MONOTONIC always exists on Linux.
    unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    ts.tv_sec as Nanos * NS_PER_S + ts.tv_nsec as Nanos
}

/// `CLOCK_MONOTONIC` shifted so that construction is time 0.
#[derive(Clone, Copy, Debug)]
pub struct MonotonicClock {
    origin: Nanos,
}

impl MonotonicClock {
    pub fn start() -> Self {
        MonotonicClock {
            origin: raw_monotonic(),
        }
    }

    /// Blocks until `t` (relative). `Sleep` uses an absolute
    /// `clock_nanosleep`; `Spin` polls the clock.
    pub fn wait_until(&self, t: Nanos, strategy: WaitingStrategy) {
        match strategy {
            WaitingStrategy::Sleep => {
                let abs = self.origin + t;
                let ts = libc::timespec {
                    tv_sec: (abs / NS_PER_S) as libc::time_t,
                    tv_nsec: (abs % NS_PER_S) as libc::c_long,
                };
                // EINTR just restarts the wait
                // SAFETY: valid timespec pointer; null remainder is allowed with TIMER_ABSTIME.
                while unsafe {
                    libc::clock_nanosleep(
                        libc::CLOCK_MONOTONIC,
                        libc::TIMER_ABSTIME,
                        &ts,
                        std::ptr::null_mut(),
                    )
                } == libc::EINTR
                {}
            }
            WaitingStrategy::Spin => {
                while self.now() < t {
                    std::hint::spin_loop();
                }
            }
        }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Nanos {
        raw_monotonic().saturating_sub(self.origin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::ms;

    #[test]
    fn virtual_wait_advances_exactly() {
        let mut c = VirtualClock::default();
        c.advance_to(ms(5));
        c.wait_until(c.now() + ms(1), WaitingStrategy::Spin);
        assert_eq!(c.now(), ms(6));
        c.wait_until(ms(7), WaitingStrategy::Sleep);
        assert_eq!(c.now(), ms(7));
    }

    #[test]
    fn monotonic_is_non_decreasing_and_waits() {
        let c = MonotonicClock::start();
        let a = c.now();
        c.wait_until(a + ms(2), WaitingStrategy::Sleep);
        let b = c.now();
        assert!(b >= a + ms(2));
        c.wait_until(b + ms(1), WaitingStrategy::Spin);
        assert!(c.now() >= b + ms(1));
    }
}
