//! Operation counters for the performance contracts of the encoder and the tree search.
//!
//! Counting is compiled in only with debug assertions; in release builds every
//! counter reads zero. Counters are thread-local so parallel tests don't interfere.

#[cfg(debug_assertions)]
use std::cell::Cell;

#[cfg(debug_assertions)]
thread_local! {
    static VECTOR_OPS: Cell<u64> = const { Cell::new(0) };
    static TABLE_LOOKUPS: Cell<u64> = const { Cell::new(0) };
}

/// Whether the counters are live in this build.
pub const ENABLED: bool = cfg!(debug_assertions);

#[inline(always)]
pub(crate) fn count_vector_op() {
    #[cfg(debug_assertions)]
    VECTOR_OPS.with(|c| c.set(c.get() + 1));
}

#[inline(always)]
pub(crate) fn count_table_lookup() {
    #[cfg(debug_assertions)]
    TABLE_LOOKUPS.with(|c| c.set(c.get() + 1));
}

/// Number of d-dimensional kernel evaluations (dot products, squared distances)
/// on this thread since the last [`reset`].
pub fn vector_ops() -> u64 {
    #[cfg(debug_assertions)]
    {
        VECTOR_OPS.with(|c| c.get())
    }
    #[cfg(not(debug_assertions))]
    {
        0
    }
}

/// Number of ADC table lookups on this thread since the last [`reset`].
pub fn table_lookups() -> u64 {
    #[cfg(debug_assertions)]
    {
        TABLE_LOOKUPS.with(|c| c.get())
    }
    #[cfg(not(debug_assertions))]
    {
        0
    }
}

pub fn reset() {
    #[cfg(debug_assertions)]
    {
        VECTOR_OPS.with(|c| c.set(0));
        TABLE_LOOKUPS.with(|c| c.set(0));
    }
}
