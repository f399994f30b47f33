//! Counting global allocator.
//!
//! Install it in a binary or test target with
//! `#[global_allocator] static A: CountingAlloc = CountingAlloc;`. It tracks
//! process-wide live and peak bytes, the largest single allocation, and a
//! per-thread live/peak pair used to measure the transient memory of one job.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering::Relaxed};

pub struct CountingAlloc;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);
static ACTIVE: AtomicBool = AtomicBool::new(false);

thread_local! {
    static T_LIVE: Cell<isize> = const { Cell::new(0) };
    static T_PEAK: Cell<isize> = const { Cell::new(0) };
}

fn on_alloc(size: usize) {
    let live = LIVE.fetch_add(size, Relaxed) + size;
    PEAK.fetch_max(live, Relaxed);
    LARGEST.fetch_max(size, Relaxed);
    let _ = T_LIVE.try_with(|l| {
        let v = l.get() + size as isize;
        l.set(v);
        let _ = T_PEAK.try_with(|p| {
            if v > p.get() {
                p.set(v);
            }
        });
    });
}

fn on_dealloc(size: usize) {
    LIVE.fetch_sub(size, Relaxed);
    let _ = T_LIVE.try_with(|l| l.set(l.get() - size as isize));
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        on_dealloc(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            on_dealloc(layout.size());
            on_alloc(new_size);
        }
        p
    }
}

impl CountingAlloc {
    /// Marks the allocator as installed. Call once from the binary that
    /// declares it as the global allocator.
    pub fn activate() {
        ACTIVE.store(true, Relaxed);
    }
}

/// True once [`CountingAlloc::activate`] has been called.
pub fn is_active() -> bool {
    ACTIVE.load(Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AllocStats {
    pub live: usize,
    pub peak: usize,
    pub largest: usize,
}

pub fn stats() -> AllocStats {
    AllocStats {
        live: LIVE.load(Relaxed),
        peak: PEAK.load(Relaxed),
        largest: LARGEST.load(Relaxed),
    }
}

/// Resets the process peak to the current live size and the largest
/// allocation to zero.
pub fn reset() {
    PEAK.store(LIVE.load(Relaxed), Relaxed);
    LARGEST.store(0, Relaxed);
}

/// Net bytes allocated by this thread.
pub fn thread_live() -> isize {
    T_LIVE.try_with(Cell::get).unwrap_or(0)
}

pub fn thread_peak() -> isize {
    T_PEAK.try_with(Cell::get).unwrap_or(0)
}

/// Sets this thread's peak to its current live size.
pub fn thread_reset_peak() {
    let live = thread_live();
    let _ = T_PEAK.try_with(|p| p.set(live));
}

/// Runs `f` and returns its result with the peak bytes it allocated on this
/// thread above the starting point.
pub fn measure_thread<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let start = thread_live();
    thread_reset_peak();
    let r = f();
    let peak = (thread_peak() - start).max(0) as usize;
    (r, peak)
}
