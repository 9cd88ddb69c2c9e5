//! Deterministic, embarrassingly parallel compute kernel used by the
//! benchmark workloads as a stand-in for planning or inference.
//!
//! The result is a wrapping sum of per-item values, so it is identical for
//! any partitioning of the item range.

use alloc::vec::Vec;
use core::ops::Range;

pub const DEFAULT_SEED: u64 = 0x5eed_0f06_b00c;
/// Mixing rounds per item.
pub const ROUNDS_PER_ITEM: u32 = 64;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
pub fn kernel_item(seed: u64, i: u64) -> u64 {
    let mut x = seed ^ i.wrapping_mul(0x2545_f491_4f6c_dd1d);
    for _ in 0..ROUNDS_PER_ITEM {
        x = splitmix64(x);
    }
    x
}

pub fn kernel_range(seed: u64, range: Range<u64>) -> u64 {
    range.fold(0u64, |acc, i| acc.wrapping_add(kernel_item(seed, i)))
}

pub fn kernel_serial(seed: u64, items: u64) -> u64 {
    kernel_range(seed, 0..items)
}

/// Splits `0..items` into `workers` contiguous, nearly equal ranges.
pub fn partition(items: u64, workers: u32) -> Vec<Range<u64>> {
    let workers = u64::from(workers.max(1));
    let base = items / workers;
    let extra = items % workers;
    let mut out = Vec::with_capacity(workers as usize);
    let mut start = 0;
    for w in 0..workers {
        let len = base + u64::from(w < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

pub fn combine(partials: impl IntoIterator<Item = u64>) -> u64 {
    partials.into_iter().fold(0u64, u64::wrapping_add)
}
