//! Scenario harnesses behind the `acceptance` test target. Each check
//! returns an [`Outcome`] instead of panicking, so one run reports every
//! criterion.

use std::fmt;
use std::time::Duration;

pub mod batching;
pub mod canary;
pub mod compression;
pub mod hedging;
pub mod initial_load;
pub mod journal;
pub mod lifecycle;
pub mod policy;
pub mod reads;

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self::new(false, detail)
    }

    /// Runs `f`, turning a setup error or panic into a failed outcome.
    pub fn guard(f: impl FnOnce() -> Result<Outcome, String>) -> Outcome {
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Self::fail(format!("setup error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Self::fail(format!("panicked: {msg}"))
            }
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

/// Nearest-rank percentile, `p` in `[0, 100]`. Sorts in place.
pub fn percentile(samples: &mut [Duration], p: f64) -> Duration {
    if samples.is_empty() {
        return Duration::ZERO;
    }
    samples.sort_unstable();
    let rank = ((p / 100.0) * samples.len() as f64).ceil() as usize;
    samples[rank.clamp(1, samples.len()) - 1]
}

pub fn ms(d: Duration) -> String {
    format!("{:.4}ms", d.as_secs_f64() * 1e3)
}
