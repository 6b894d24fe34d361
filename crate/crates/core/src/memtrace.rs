//! Allocation accounting for the memory-efficiency claims.
//!
//! The local-training hot path must never materialize a full
//! `rows x cols` gradient. Matrix buffers allocated inside that path are
//! reported here; tests open a scope around an iteration and assert that the
//! largest recorded buffer stays below the weight size. Tracing is a
//! thread-local flag and costs one branch per recorded allocation when off.

use std::cell::Cell;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static MAX_ELEMS: Cell<usize> = const { Cell::new(0) };
    static TOTAL_ELEMS: Cell<usize> = const { Cell::new(0) };
    static COUNT: Cell<usize> = const { Cell::new(0) };
}

/// Record a matrix allocation of `elems` elements. No-op outside a scope.
#[inline]
pub fn record(elems: usize) {
    ACTIVE.with(|a| {
        if a.get() {
            MAX_ELEMS.with(|m| m.set(m.get().max(elems)));
            TOTAL_ELEMS.with(|t| t.set(t.get() + elems));
            COUNT.with(|c| c.set(c.get() + 1));
        }
    });
}

/// Summary of allocations observed inside a tracing scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceReport {
    /// Largest single buffer, in elements.
    pub max_single_elems: usize,
    /// Sum of all recorded buffer sizes, in elements.
    pub total_elems: usize,
    /// Number of recorded allocations.
    pub allocations: usize,
}

/// Run `f` with allocation tracing enabled on this thread and report what
/// was recorded. Scopes do not nest.
pub fn traced<T>(f: impl FnOnce() -> T) -> (T, TraceReport) {
    ACTIVE.with(|a| a.set(true));
    MAX_ELEMS.with(|m| m.set(0));
    TOTAL_ELEMS.with(|t| t.set(0));
    COUNT.with(|c| c.set(0));
    let out = f();
    ACTIVE.with(|a| a.set(false));
    let report = TraceReport {
        max_single_elems: MAX_ELEMS.with(|m| m.get()),
        total_elems: TOTAL_ELEMS.with(|t| t.get()),
        allocations: COUNT.with(|c| c.get()),
    };
    (out, report)
}
