//! Per-thread counter of forward-layer evaluations.
//!
//! Lets tests confirm that the reverse pass reads the tape instead of
//! re-running forward layers.

use std::cell::Cell;

thread_local! {
    static FORWARD_OPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn tick() {
    FORWARD_OPS.with(|c| c.set(c.get() + 1));
}

/// Number of forward layer evaluations performed on this thread so far.
pub fn forward_ops() -> u64 {
    FORWARD_OPS.with(|c| c.get())
}
