//! Runs every acceptance criterion and prints one line per criterion.
//!
//! `cargo test -p gsgn-acceptance --test acceptance -- [filter] [--list]`

use std::process::ExitCode;

use gsgn_acceptance::{criteria, run_one, Context};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let list = args.iter().any(|a| a == "--list");
    let filter = args.iter().find(|a| !a.starts_with('-'));
    let selected: Vec<_> = criteria().into_iter().filter(|c| filter.is_none_or(|f| c.name.contains(f.as_str()))).collect();
    if list {
        for c in &selected {
            println!("{}: test", c.name);
        }
        return ExitCode::SUCCESS;
    }
    let mut ctx = Context::default();
    let mut failed = 0;
    for c in &selected {
        let (outcome, secs) = run_one(c, &mut ctx);
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {} ({secs:.1} s): {}", c.name, outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!("acceptance: {} passed, {failed} failed", selected.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
