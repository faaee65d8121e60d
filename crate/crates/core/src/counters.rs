//! Per-thread operation counters.
//!
//! Every 2D transform and every counted pixel-wise pass bumps a thread-local
//! tally. A solver run is single-threaded, so a snapshot taken before and
//! after a call gives exactly the work performed by that call, even when
//! other threads (parallel tests, scans) are busy elsewhere.

use std::cell::Cell;
use std::ops::Sub;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub fft2: u64,
    pub ifft2: u64,
    pub mults: u64,
    pub adds: u64,
}

impl Sub for OpCounts {
    type Output = OpCounts;

    fn sub(self, rhs: OpCounts) -> OpCounts {
        OpCounts {
            fft2: self.fft2 - rhs.fft2,
            ifft2: self.ifft2 - rhs.ifft2,
            mults: self.mults - rhs.mults,
            adds: self.adds - rhs.adds,
        }
    }
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { fft2: 0, ifft2: 0, mults: 0, adds: 0 }) };
}

pub fn snapshot() -> OpCounts {
    COUNTS.with(Cell::get)
}

/// Runs `f` and returns its result together with the operations it performed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, OpCounts) {
    let before = snapshot();
    let out = f();
    (out, snapshot() - before)
}

fn bump(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

pub(crate) fn fft2() {
    bump(|c| c.fft2 += 1);
}

pub(crate) fn ifft2() {
    bump(|c| c.ifft2 += 1);
}

pub(crate) fn mults(n: u64) {
    bump(|c| c.mults += n);
}

pub(crate) fn adds(n: u64) {
    bump(|c| c.adds += n);
}
