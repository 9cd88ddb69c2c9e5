//! Network condition estimates and their fixed 32-byte wire record.

use alloc::collections::VecDeque;

pub const STATS_RECORD_LEN: usize = 32;
pub const DEFAULT_EWMA_ALPHA: f64 = 0.2;
pub const DEFAULT_RATE_WINDOW_NS: u64 = 1_000_000_000;

/// One monitoring sample.
///
/// Record layout, four big-endian u64s: rtt in microseconds, inbound
/// bytes/s, outbound bytes/s, timestamp in ns. The timestamp's lowest bit is
/// the staleness flag (set when the channel was down and `rtt_us` repeats the
/// last estimate), so timestamps have 2 ns resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NetworkStats {
    pub rtt_us: u64,
    pub bytes_per_s_in: u64,
    pub bytes_per_s_out: u64,
    pub timestamp_ns: u64,
    pub stale: bool,
}

impl NetworkStats {
    pub fn rtt_ms(&self) -> f64 {
        self.rtt_us as f64 / 1000.0
    }

    pub fn encode(&self) -> [u8; STATS_RECORD_LEN] {
        let mut out = [0u8; STATS_RECORD_LEN];
        let ts = (self.timestamp_ns & !1) | u64::from(self.stale);
        for (i, v) in [self.rtt_us, self.bytes_per_s_in, self.bytes_per_s_out, ts]
            .into_iter()
            .enumerate()
        {
            out[i * 8..i * 8 + 8].copy_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != STATS_RECORD_LEN {
            return None;
        }
        let word = |i: usize| {
            let mut a = [0u8; 8];
            a.copy_from_slice(&bytes[i * 8..i * 8 + 8]);
            u64::from_be_bytes(a)
        };
        let ts = word(3);
        Some(NetworkStats {
            rtt_us: word(0),
            bytes_per_s_in: word(1),
            bytes_per_s_out: word(2),
            timestamp_ns: ts & !1,
            stale: ts & 1 == 1,
        })
    }
}

/// Exponentially weighted moving average; the first sample seeds it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ewma {
    alpha: f64,
    value: Option<f64>,
}

impl Ewma {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        Ewma { alpha, value: None }
    }

    pub fn update(&mut self, sample: f64) -> f64 {
        let next = match self.value {
            None => sample,
            Some(prev) => prev + self.alpha * (sample - prev),
        };
        self.value = Some(next);
        next
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

impl Default for Ewma {
    fn default() -> Self {
        Ewma::new(DEFAULT_EWMA_ALPHA)
    }
}

/// Byte rate over a trailing time window.
#[derive(Debug, Clone)]
pub struct SlidingRate {
    window_ns: u64,
    samples: VecDeque<(u64, u64)>,
    total: u64,
}

impl SlidingRate {
    pub fn new(window_ns: u64) -> Self {
        assert!(window_ns > 0);
        SlidingRate {
            window_ns,
            samples: VecDeque::new(),
            total: 0,
        }
    }

    pub fn record(&mut self, now_ns: u64, bytes: u64) {
        self.samples.push_back((now_ns, bytes));
        self.total += bytes;
        self.expire(now_ns);
    }

    fn expire(&mut self, now_ns: u64) {
        while let Some(&(t, b)) = self.samples.front() {
            if now_ns.saturating_sub(t) < self.window_ns {
                break;
            }
            self.samples.pop_front();
            self.total -= b;
        }
    }

    /// Bytes per second over the window ending at `now_ns`.
    pub fn rate(&mut self, now_ns: u64) -> f64 {
        self.expire(now_ns);
        self.total as f64 * 1e9 / self.window_ns as f64
    }
}

impl Default for SlidingRate {
    fn default() -> Self {
        SlidingRate::new(DEFAULT_RATE_WINDOW_NS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout_is_fixed() {
        let s = NetworkStats {
            rtt_us: 1500,
            bytes_per_s_in: 491_520,
            bytes_per_s_out: 7,
            timestamp_ns: 1_000_000,
            stale: true,
        };
        let b = s.encode();
        assert_eq!(&b[..8], &1500u64.to_be_bytes());
        assert_eq!(&b[8..16], &491_520u64.to_be_bytes());
        assert_eq!(&b[24..], &1_000_001u64.to_be_bytes());
        assert_eq!(NetworkStats::decode(&b), Some(s));
        assert_eq!(NetworkStats::decode(&b[..31]), None);
        assert!((s.rtt_ms() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn ewma_matches_hand_computation() {
        let mut e = Ewma::new(0.2);
        assert_eq!(e.update(10.0), 10.0);
        // 10 + 0.2 * (20 - 10) = 12; 12 + 0.2 * (0 - 12) = 9.6
        assert!((e.update(20.0) - 12.0).abs() < 1e-12);
        assert!((e.update(0.0) - 9.6).abs() < 1e-12);
    }

    #[test]
    fn sliding_rate_expires_old_samples() {
        let mut r = SlidingRate::new(1_000_000_000);
        for i in 0..10u64 {
            r.record(i * 100_000_000, 49_152);
        }
        assert!((r.rate(950_000_000) - 491_520.0).abs() < 1e-6);
        // at t = 1.45 s the samples at 0.0..0.4 s have aged out
        assert!((r.rate(1_450_000_000) - 5.0 * 49_152.0).abs() < 1e-6);
        assert_eq!(r.rate(10_000_000_000), 0.0);
    }
}
