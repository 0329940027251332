//! Acceptance criteria for the samplers, heuristics and harness. Each
//! criterion runs a fixed seeded experiment and reports a verdict with the
//! measured values.

pub mod criteria;
pub mod oracle;

use std::fmt;
use std::time::Duration;

#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{:>2}] {} ({:.1}s): {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}
