//! Scorecard for the acceptance suite: one PASS/FAIL line per criterion.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// Verdict and a one-line summary of the measured quantities.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

#[derive(Debug, Default)]
pub struct Scorecard {
    only: Vec<u32>,
    results: Vec<(u32, String, bool)>,
}

impl Scorecard {
    pub fn new() -> Self {
        Self::default()
    }

    /// Restricts the run to the listed criteria; empty means all.
    pub fn only(ids: Vec<u32>) -> Self {
        Self { only: ids, results: Vec::new() }
    }

    pub fn selected(&self, id: u32) -> bool {
        self.only.is_empty() || self.only.contains(&id)
    }

    /// Runs one criterion and prints its line. A panic counts as a failure.
    pub fn run(&mut self, id: u32, name: &str, budget: Option<Duration>, check: impl FnOnce() -> Outcome) {
        if !self.selected(id) {
            return;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check));
        let elapsed = start.elapsed();
        let mut outcome = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if let Some(limit) = budget {
            if elapsed > limit {
                outcome.passed = false;
                outcome.detail.push_str(&format!("; over the {:.0} s budget", limit.as_secs_f64()));
            }
        }
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("{verdict} criterion {id:>2} {name} [{:.1} s]: {}", elapsed.as_secs_f64(), outcome.detail);
        self.results.push((id, name.to_string(), outcome.passed));
    }

    pub fn failed(&self) -> Vec<u32> {
        self.results.iter().filter(|r| !r.2).map(|r| r.0).collect()
    }

    /// Prints the totals; `true` when every criterion passed.
    pub fn finish(&self) -> bool {
        let failed = self.failed();
        println!("acceptance: {} passed, {} failed {:?}", self.results.len() - failed.len(), failed.len(), failed);
        failed.is_empty()
    }
}
