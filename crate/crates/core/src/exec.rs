//! Data-parallel execution helpers.
//!
//! Every parallel loop in the crate goes through [`map_indexed`], which
//! returns results in index order regardless of the execution mode. Reductions
//! over those results are done sequentially by the caller, so parallel and
//! sequential runs produce bit-identical outputs.
//!
//! With the `parallel` feature disabled the crate has no rayon dependency and
//! every call runs sequentially.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

const AUTO: u8 = 0;
const SEQ: u8 = 1;
const PAR: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(AUTO);

/// Current execution mode. Defaults to parallel when the feature is on.
pub fn mode() -> Mode {
    match MODE.load(Ordering::Relaxed) {
        SEQ => Mode::Sequential,
        PAR if cfg!(feature = "parallel") => Mode::Parallel,
        AUTO if cfg!(feature = "parallel") => Mode::Parallel,
        _ => Mode::Sequential,
    }
}

/// Process-wide override, used by benchmarks and the CLI `--sequential` flag.
pub fn set_mode(mode: Mode) {
    let v = match mode {
        Mode::Sequential => SEQ,
        Mode::Parallel => PAR,
    };
    MODE.store(v, Ordering::Relaxed);
}

/// Runs `f` under `mode`, restoring the previous setting afterwards.
pub fn with_mode<R>(mode: Mode, f: impl FnOnce() -> R) -> R {
    let prev = MODE.swap(
        match mode {
            Mode::Sequential => SEQ,
            Mode::Parallel => PAR,
        },
        Ordering::Relaxed,
    );
    let out = f();
    MODE.store(prev, Ordering::Relaxed);
    out
}

/// `(0..n).map(f).collect()`, parallel when enabled.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode() == Mode::Parallel && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// `items.iter().map(f).collect()`, parallel when enabled.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

/// Sums per-item gradient vectors in index order.
pub fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for p in parts {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}
