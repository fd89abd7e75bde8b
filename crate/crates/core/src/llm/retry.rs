use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: u32,
    pub attempt_timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 1000,
            factor: 2,
            attempt_timeout_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `n` (0-based). Attempt 0 starts immediately.
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt == 0 {
            return Duration::ZERO;
        }
        let mult = u64::from(self.factor).saturating_pow(attempt - 1);
        Duration::from_millis(self.base_delay_ms.saturating_mul(mult))
    }

    pub fn attempt_timeout(&self) -> Duration {
        Duration::from_millis(self.attempt_timeout_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_schedule() {
        let p = RetryPolicy::default();
        let d: Vec<u64> = (0..4).map(|i| p.delay_before(i).as_millis() as u64).collect();
        assert_eq!(d, vec![0, 1000, 2000, 4000]);
    }
}
