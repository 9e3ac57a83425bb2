//! Thread-local instrumentation: the multiply-accumulate counter, the
//! storage precision switch and the finite-value verification switch.
//!
//! All three are off by default so ordinary training pays nothing for them.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

thread_local! {
    static MACS: Cell<Option<u64>> = const { Cell::new(None) };
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
    static VERIFY: Cell<bool> = const { Cell::new(false) };
    static COUNT_ONLY: Cell<bool> = const { Cell::new(false) };
}

/// Counts multiply-accumulates performed by matrix products on this thread
/// while alive. Nested counters are not supported; starting a new one
/// resets the count.
pub struct MacCounter {
    previous: Option<u64>,
    previous_count_only: bool,
}

impl MacCounter {
    pub fn start() -> Self {
        let previous = MACS.with(|m| m.replace(Some(0)));
        MacCounter {
            previous,
            previous_count_only: COUNT_ONLY.with(Cell::get),
        }
    }

    /// Like [`MacCounter::start`], but matrix and attention products are
    /// counted without being computed and yield zeros. Exact for models
    /// whose weights are all zero, where every such product is zero anyway.
    pub fn start_count_only() -> Self {
        let c = Self::start();
        COUNT_ONLY.with(|f| f.set(true));
        c
    }

    pub fn total(&self) -> u64 {
        MACS.with(|m| m.get().unwrap_or(0))
    }
}

impl Drop for MacCounter {
    fn drop(&mut self) {
        MACS.with(|m| m.set(self.previous));
        COUNT_ONLY.with(|f| f.set(self.previous_count_only));
    }
}

#[inline]
pub(crate) fn count_only() -> bool {
    COUNT_ONLY.with(Cell::get)
}

#[inline]
pub(crate) fn record_macs(n: u64) {
    MACS.with(|m| {
        if let Some(c) = m.get() {
            m.set(Some(c + n));
        }
    });
}

/// Storage precision for values produced by tape operations.
///
/// Arithmetic always runs in `f64`; in `F32` mode every stored value is
/// rounded through `f32`, which reproduces single-precision storage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn current() -> Precision {
        PRECISION.with(Cell::get)
    }

    /// Sets the precision for this thread and returns the previous one.
    pub fn set(p: Precision) -> Precision {
        PRECISION.with(|c| c.replace(p))
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }
}

#[inline]
pub(crate) fn round_storage(data: &mut [f64]) {
    if Precision::current() == Precision::F32 {
        for v in data {
            *v = *v as f32 as f64;
        }
    }
}

/// Enables NaN/Inf detection on every operation output for this thread.
pub fn set_verify(on: bool) -> bool {
    VERIFY.with(|c| c.replace(on))
}

pub(crate) fn verify_enabled() -> bool {
    VERIFY.with(Cell::get)
}
