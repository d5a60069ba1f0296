//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `cargo test -p cyphertalk --test acceptance`

mod common;

use std::process::ExitCode;
use std::time::Instant;

use cyphertalk::checks::{run_all, CheckResult};
use cyphertalk::experiment::ExperimentConfig;

fn main() -> ExitCode {
    let start = Instant::now();
    println!("running acceptance checks (the recovery study takes a few minutes)");
    // AC-8 is printed once its golden-file half is in.
    let mut results = run_all(&ExperimentConfig::default(), |r| {
        if r.id != "AC-8" {
            println!("{}", r.line());
        }
    });

    // AC-8 also requires the golden fixtures to be stable across runs.
    let first = common::check_golden_files();
    let second = common::check_golden_files();
    let stable =
        first.is_empty() && second.is_empty() && common::generate_all() == common::generate_all();
    if let Some(ac8) = results.iter_mut().find(|r| r.id == "AC-8") {
        ac8.pass &= stable;
        ac8.detail.push_str(&format!(
            "; golden files {}",
            if stable {
                format!(
                    "stable ({} fixtures, two passes)",
                    common::generate_all().len()
                )
            } else {
                format!("MISMATCH {first:?} {second:?}")
            }
        ));
        println!("{}", ac8.line());
    }

    let failed: Vec<&CheckResult> = results.iter().filter(|r| !r.pass).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
