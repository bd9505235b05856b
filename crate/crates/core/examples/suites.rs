//! Runs every experiment suite at its defaults and prints the checks.
//!
//! `cargo run --release --example suites [experiment] [seed]`

use std::time::Instant;

use distill_core::harness::{run_experiment, ExperimentConfig, ExperimentKind};

fn main() -> Result<(), distill_core::Error> {
    let mut args = std::env::args().skip(1);
    let only = args.next();
    let seed = args.next().map_or(Ok(2024), |s| s.parse()).expect("seed must be an integer");
    for kind in ExperimentKind::ALL {
        if only.as_deref().is_some_and(|o| o != kind.name()) {
            continue;
        }
        let start = Instant::now();
        let bundle = run_experiment(&ExperimentConfig::default_for(kind, seed))?;
        println!("== {kind} ({:.1}s)", start.elapsed().as_secs_f64());
        for line in &bundle.summary {
            println!("  {line}");
        }
        for c in &bundle.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let level = if c.hard { "hard" } else { "soft" };
            println!("  {status} [{level}] {}: {}", c.name, c.detail);
        }
    }
    Ok(())
}
