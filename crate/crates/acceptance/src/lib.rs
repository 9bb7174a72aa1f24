//! Reporting helpers for the acceptance target.

use std::time::{Duration, Instant};

/// Outcome of one criterion.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Verdict {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {}: {} ({:.1}s)",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Runs `f`, times it and turns errors into failing verdicts.
pub fn run<F>(id: usize, name: &'static str, f: F) -> Verdict
where
    F: FnOnce() -> Result<(bool, String), String>,
{
    let start = Instant::now();
    let (pass, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".to_string()),
    };
    Verdict {
        id,
        name,
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Criteria selected on the command line; all when none are given.
pub fn selected(args: &[String], total: usize) -> Vec<usize> {
    let picked: Vec<usize> = args
        .iter()
        .filter_map(|a| a.parse().ok())
        .filter(|&n| (1..=total).contains(&n))
        .collect();
    if picked.is_empty() {
        (1..=total).collect()
    } else {
        picked
    }
}
