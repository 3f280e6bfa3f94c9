//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any failed. `ACCEPTANCE_ONLY=3,7` runs a subset.

mod calibration;
mod data;
mod decoder;
mod evaluator;
mod gradients;
mod hungarian;
mod overfit;
mod symmetry;
mod tradeoff;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// A criterion returns a one-line summary of what it measured, or panics.
type Criterion = fn() -> String;

const CRITERIA: &[(u32, &str, Criterion)] = &[
    (1, "gradient integrity", gradients::run),
    (2, "hungarian optimality", hungarian::run),
    (3, "evaluator oracle equivalence", evaluator::run),
    (4, "overfit convergence", overfit::run),
    (5, "trade-off direction", tradeoff::run),
    (6, "set-prediction symmetry", symmetry::run),
    (7, "decoder contracts", decoder::run),
    (8, "data pipeline integrity", data::run),
    (9, "benchmark calibration", calibration::run),
];

fn main() -> ExitCode {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    // `cargo test -- --list` and filters from the default harness are not supported here
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    for &(id, name, run) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}) [{secs:.1}s]: {detail}"),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                println!("FAIL criterion {id} ({name}) [{secs:.1}s]: {msg}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
