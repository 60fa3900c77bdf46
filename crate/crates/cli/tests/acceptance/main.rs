//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Everything runs offline against the scripted backend. Run as
//! `<binary> --piece <file>` this program is the fixture piece interpreter
//! instead (see `piece.rs`).

mod graphs;
mod loops;
mod piece;
mod review;
mod support;

use std::panic::AssertUnwindSafe;
use std::process::ExitCode;
use std::time::{Duration, Instant};

// Pinned thresholds.
pub const SEED: u64 = 0x5eed_0001;
pub const GREEN_LOOP_LIMIT: Duration = Duration::from_secs(10);
pub const EXHAUSTION_BUDGET: u32 = 4;
pub const REVIEW_SEQUENCES: usize = 1000;
pub const DAG_COUNT: usize = 50;
pub const DAG_MAX_NODES: usize = 6;
pub const INPUTS_PER_DAG: usize = 100;
pub const LOCALIZATION_TRIALS: usize = 20;
pub const CHAIN_LEN: usize = 5;
pub const SLEEP_TIMEOUT: f64 = 1.0;
pub const TIMEOUT_CEILING: f64 = 1.5;
pub const SPEW_BYTES: usize = 10 * 1024 * 1024;
pub const RANKING_PERMUTATIONS: usize = 200;
pub const POOL_SIZE: usize = 6;

pub type Check = Result<String, String>;

fn run(name: &str, f: fn() -> Check) -> bool {
    let started = Instant::now();
    let result = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = started.elapsed().as_secs_f64();
    match result {
        Ok(detail) => {
            println!("PASS {name}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL {name}: {detail} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.get(1).map(String::as_str) == Some("--piece") {
        return ExitCode::from(piece::interpret(args.get(2).map(String::as_str).unwrap_or("")) as u8);
    }
    // quiet the default hook; failures are reported on the verdict line
    std::panic::set_hook(Box::new(|_| {}));

    let criteria: [(&str, fn() -> Check); 9] = [
        ("green_loop", loops::green_loop),
        ("budget_exhaustion", loops::budget_exhaustion),
        ("stagnation_guard", loops::stagnation_guard),
        ("review_state_machine", review::review_state_machine),
        ("oracle_equivalence", graphs::oracle_equivalence),
        ("fault_localization", graphs::fault_localization),
        ("sandbox_bounds", loops::sandbox_bounds),
        ("ranking_determinism", loops::ranking_determinism),
        ("offline_completeness", support::offline_completeness),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !run(name, f) {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
