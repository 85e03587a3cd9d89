//! Per-thread matmul FLOP counter.
//!
//! Only matrix products are counted, at 2 FLOPs per multiply-accumulate.
//! Softmax, normalisation and activations are free.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    FLOPS.with(|f| f.set(f.get() + n));
}

/// Current value of this thread's counter.
pub fn read() -> u64 {
    FLOPS.with(Cell::get)
}

pub fn reset() {
    FLOPS.with(|f| f.set(0));
}

/// Runs `f` and returns the FLOPs it spent along with its result.
///
/// The outer counter keeps accumulating, so measurements nest.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
