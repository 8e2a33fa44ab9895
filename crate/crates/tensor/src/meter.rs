//! Per-thread accounting of live tensor buffer bytes.
//!
//! All tensor storage on a thread is charged here; `peak` is a high-water
//! mark that callers reset at stage boundaries. An optional byte limit turns
//! the meter into a budget: an allocation that would cross it is still
//! served (this is a CPU) but the overflow is latched so that the caller can
//! fail at the next checkpoint with a diagnostic.

use std::cell::RefCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overflow {
    pub requested: usize,
    pub in_use: usize,
    pub limit: usize,
}

#[derive(Debug, Default)]
struct State {
    current: usize,
    peak: usize,
    limit: Option<usize>,
    overflow: Option<Overflow>,
}

thread_local! {
    static METER: RefCell<State> = RefCell::new(State::default());
}

pub(crate) fn charge(bytes: usize) {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        if let Some(limit) = m.limit {
            if m.current + bytes > limit && m.overflow.is_none() {
                m.overflow = Some(Overflow {
                    requested: bytes,
                    in_use: m.current,
                    limit,
                });
            }
        }
        m.current += bytes;
        if m.current > m.peak {
            m.peak = m.current;
        }
    });
}

pub(crate) fn release(bytes: usize) {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        m.current = m.current.saturating_sub(bytes);
    });
}

/// Bytes held by live tensors on this thread.
pub fn current() -> usize {
    METER.with(|m| m.borrow().current)
}

/// High-water mark since the last [`reset_peak`].
pub fn peak() -> usize {
    METER.with(|m| m.borrow().peak)
}

/// Restart the high-water mark from the current usage.
pub fn reset_peak() {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        m.peak = m.current;
    });
}

/// Install (or clear) the byte budget. Clears any latched overflow.
pub fn set_limit(limit: Option<usize>) {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        m.limit = limit;
        m.overflow = None;
    });
}

pub fn limit() -> Option<usize> {
    METER.with(|m| m.borrow().limit)
}

/// Take the latched overflow, if any allocation crossed the budget.
pub fn take_overflow() -> Option<Overflow> {
    METER.with(|m| m.borrow_mut().overflow.take())
}

/// Runs `f` with a byte budget, restoring the previous budget afterwards.
pub fn with_limit<R>(limit: Option<usize>, f: impl FnOnce() -> R) -> R {
    let prev = self::limit();
    set_limit(limit);
    let out = f();
    set_limit(prev);
    out
}
