//! Execution backends and their shared output types.

pub mod clock;
pub mod lock;
pub mod realtime;
pub mod report;
pub mod sim;
pub mod trace;
