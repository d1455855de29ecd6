#![allow(dead_code)]

pub mod fixtures;
pub mod gradient_suite;
pub mod invariant_suite;
pub mod oracle_suite;
pub mod oracles;

/// Outcome of one named check within a suite.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    /// Worst observed error (relative for gradients, absolute otherwise).
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Check {
    pub fn new(name: &str) -> Self {
        Self { name: name.to_string(), cases: 0, worst: 0.0, failures: Vec::new() }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn fail(&mut self, msg: String) {
        if self.failures.len() < 5 {
            self.failures.push(msg);
        } else if self.failures.len() == 5 {
            self.failures.push("...".into());
        }
    }

    pub fn observe(&mut self, err: f64) {
        if !(err <= self.worst) {
            self.worst = err;
        }
    }
}

pub fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!(
            "  {:<34} {:>5} cases  worst {:.3e}  {}",
            c.name,
            c.cases,
            c.worst,
            if c.passed() { "ok" } else { "FAILED" }
        );
        for f in &c.failures {
            println!("      {f}");
        }
    }
    checks.iter().all(Check::passed)
}
