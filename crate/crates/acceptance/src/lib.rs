//! Acceptance criteria for the engine. Each criterion runs at its pinned
//! tolerance and reports one pass/fail line.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

mod gradients;
mod service;
mod structure;
mod training;

pub use training::{SupervisedBudget, UNPAIRED_ITERATIONS};

/// Result of one criterion.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn check(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

pub type CriterionResult = Result<Outcome, Box<dyn std::error::Error>>;

pub struct Criterion {
    pub name: &'static str,
    pub run: fn(&mut Context) -> CriterionResult,
}

/// State shared between criteria, so that runs used by several of them are
/// trained once.
#[derive(Default)]
pub struct Context {
    pub(crate) supervised: training::SupervisedCache,
}

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { name: "gradient_certification", run: gradients::certification },
        Criterion { name: "shuffle_algebra", run: structure::shuffle_algebra },
        Criterion { name: "normalization_contracts", run: structure::normalization_contracts },
        Criterion { name: "parameter_budget", run: structure::parameter_budget },
        Criterion { name: "loss_arithmetic", run: structure::loss_arithmetic },
        Criterion { name: "supervised_desk_training", run: training::supervised_desk },
        Criterion { name: "multitask_ordering", run: training::multitask_ordering },
        Criterion { name: "unpaired_desk_smoke", run: training::unpaired_smoke },
        Criterion { name: "determinism_and_persistence", run: training::determinism },
        Criterion { name: "service_contract", run: service::contract },
    ]
}

/// Runs one criterion, turning errors and panics into failures.
pub fn run_one(c: &Criterion, ctx: &mut Context) -> (Outcome, f64) {
    let start = Instant::now();
    let outcome = match catch_unwind(AssertUnwindSafe(|| (c.run)(ctx))) {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => Outcome::check(false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Outcome::check(false, format!("panic: {msg}"))
        }
    };
    (outcome, start.elapsed().as_secs_f64())
}
