//! Scans of the first-order linear recurrence `h_t = a_t · h_{t-1} + u_t`.
//!
//! Each step is the affine map `h ↦ a·h + u`, stored as the pair `(a, u)`.
//! Composition of such maps is associative, which is what makes the
//! two-sweep parallel schedule valid.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel,
}

pub const IDENTITY: (f64, f64) = (1.0, 0.0);

/// Applies `first`, then `second`: `(a₁a₂, a₂u₁ + u₂)`.
#[inline]
pub fn scan_compose(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// Writes `h_t` into `h` for a zero initial state.
pub fn scan_sequential(a: &[f64], u: &[f64], h: &mut [f64]) {
    let mut state = 0.0;
    for t in 0..a.len() {
        state = a[t] * state + u[t];
        h[t] = state;
    }
}

/// Work-efficient (up-sweep / down-sweep) inclusive scan. Every level of
/// both sweeps consists of independent compositions. `work` is scratch
/// space, resized as needed.
pub fn scan_parallel(a: &[f64], u: &[f64], h: &mut [f64], work: &mut Vec<(f64, f64)>) {
    let n = a.len();
    if n == 0 {
        return;
    }
    let m = n.next_power_of_two();
    work.clear();
    work.extend(a.iter().zip(u).map(|(&a, &u)| (a, u)));
    work.resize(m, IDENTITY);

    let mut d = 1;
    while d < m {
        for i in (2 * d - 1..m).step_by(2 * d) {
            work[i] = scan_compose(work[i - d], work[i]);
        }
        d *= 2;
    }
    work[m - 1] = IDENTITY;
    let mut d = m / 2;
    while d >= 1 {
        for i in (2 * d - 1..m).step_by(2 * d) {
            let left = work[i - d];
            work[i - d] = work[i];
            work[i] = scan_compose(work[i], left);
        }
        d /= 2;
    }
    // work now holds exclusive prefixes; fold in each element's own step.
    for t in 0..n {
        h[t] = scan_compose(work[t], (a[t], u[t])).1;
    }
}

pub fn scan(mode: ScanMode, a: &[f64], u: &[f64], h: &mut [f64], work: &mut Vec<(f64, f64)>) {
    match mode {
        ScanMode::Sequential => scan_sequential(a, u, h),
        ScanMode::Parallel => scan_parallel(a, u, h, work),
    }
}
