//! Exponential reconnect backoff with bounded jitter.

/// Delay policy: `initial * factor^n`, capped, then scaled by a jitter factor
/// drawn uniformly from `[1 - jitter, 1 + jitter]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackoffPolicy {
    pub initial_ms: u64,
    pub factor: f64,
    pub cap_ms: u64,
    pub jitter: f64,
    /// Give up once this much time has passed since the first failure.
    pub max_elapsed_ms: Option<u64>,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        BackoffPolicy {
            initial_ms: 200,
            factor: 2.0,
            cap_ms: 5_000,
            jitter: 0.2,
            max_elapsed_ms: None,
        }
    }
}

impl BackoffPolicy {
    /// Delay before retry number `attempt` (0-based). `unit` is a uniform
    /// sample in `[0, 1)` supplied by the caller.
    pub fn delay_ms(&self, attempt: u32, unit: f64) -> u64 {
        let mut base = self.initial_ms as f64;
        for _ in 0..attempt {
            base *= self.factor;
            if base >= self.cap_ms as f64 {
                break;
            }
        }
        let base = base.min(self.cap_ms as f64);
        let scale = 1.0 - self.jitter + 2.0 * self.jitter * unit.clamp(0.0, 1.0);
        (base * scale) as u64
    }

    pub fn exhausted(&self, elapsed_ms: u64) -> bool {
        self.max_elapsed_ms.is_some_and(|m| elapsed_ms >= m)
    }
}

/// Per-connection retry state.
#[derive(Debug, Clone)]
pub struct Backoff {
    policy: BackoffPolicy,
    attempt: u32,
}

impl Backoff {
    pub fn new(policy: BackoffPolicy) -> Self {
        Backoff { policy, attempt: 0 }
    }

    pub fn next_delay_ms(&mut self, unit: f64) -> u64 {
        let d = self.policy.delay_ms(self.attempt, unit);
        self.attempt = self.attempt.saturating_add(1);
        d
    }

    pub fn reset(&mut self) {
        self.attempt = 0;
    }

    pub fn attempts(&self) -> u32 {
        self.attempt
    }

    pub fn policy(&self) -> &BackoffPolicy {
        &self.policy
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_then_caps() {
        let p = BackoffPolicy::default();
        let mid: alloc::vec::Vec<u64> = (0..8).map(|a| p.delay_ms(a, 0.5)).collect();
        assert_eq!(mid, [200, 400, 800, 1600, 3200, 5000, 5000, 5000]);
    }

    #[test]
    fn jitter_is_bounded() {
        let p = BackoffPolicy::default();
        assert_eq!(p.delay_ms(0, 0.0), 160);
        assert_eq!(p.delay_ms(0, 1.0), 240);
        assert_eq!(p.delay_ms(10, 1.0), 6000);
    }

    #[test]
    fn give_up_only_when_configured() {
        assert!(!BackoffPolicy::default().exhausted(u64::MAX));
        let p = BackoffPolicy {
            max_elapsed_ms: Some(1000),
            ..Default::default()
        };
        assert!(p.exhausted(1000));
        assert!(!p.exhausted(999));
    }
}
