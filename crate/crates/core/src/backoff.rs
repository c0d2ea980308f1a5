//! Exponential backoff with full jitter for push retries.

use std::time::Duration;

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: u32,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            base: Duration::from_millis(200),
            factor: 2,
            cap: Duration::from_secs(5),
        }
    }
}

impl Backoff {
    /// Upper bound of the delay before retry number `retry` (0-based).
    pub fn ceiling(&self, retry: u32) -> Duration {
        let mult = (self.factor as u64).saturating_pow(retry.min(32));
        let nanos = (self.base.as_nanos() as u64).saturating_mul(mult);
        Duration::from_nanos(nanos).min(self.cap)
    }

    /// Full jitter: uniform in `[0, ceiling(retry)]`.
    pub fn delay<R: Rng + ?Sized>(&self, retry: u32, rng: &mut R) -> Duration {
        let ceiling = self.ceiling(retry).as_millis() as u64;
        Duration::from_millis(rng.gen_range(0..=ceiling))
    }
}
