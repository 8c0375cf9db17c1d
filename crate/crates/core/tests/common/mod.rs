//! Shared suites for the integration and acceptance tests.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod structure;

/// Result of one named check.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Panics with every failing outcome listed.
pub fn assert_all(outcomes: &[Outcome]) {
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| format!("{}: {}", o.name, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed checks:\n  {}", failed.join("\n  "));
}
