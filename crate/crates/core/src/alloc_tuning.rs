//! Process-wide malloc tuning for the tensor workload.
//!
//! The graphs allocate and free tens of ~80 KB buffers per training step.
//! Once the heap holds a few long-lived blocks, glibc starts serving these
//! mid-size requests with mmap/munmap, and the page-fault churn slows the
//! step loop by an order of magnitude. Raising the mmap and trim thresholds
//! keeps the buffers in the arena, where free/alloc cycles are cheap.
//!
//! Applied once per process the first time a graph is created; a no-op on
//! non-glibc targets.

use std::sync::Once;

static TUNE: Once = Once::new();

#[cfg(target_os = "linux")]
fn apply() {
    const M_TRIM_THRESHOLD: i32 = -1;
    const M_MMAP_THRESHOLD: i32 = -3;
    extern "C" {
        fn mallopt(param: i32, value: i32) -> i32;
    }
    unsafe {
        mallopt(M_MMAP_THRESHOLD, 64 << 20);
        mallopt(M_TRIM_THRESHOLD, 64 << 20);
    }
}

#[cfg(not(target_os = "linux"))]
fn apply() {}

/// Idempotent; safe to call from any thread.
pub fn tune_for_tensor_churn() {
    TUNE.call_once(apply);
}
