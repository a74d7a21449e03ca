//! `trun gradcheck`: the finite-difference suites, always in 64-bit mode.

use trun_core::error::{Error, Result};
use trun_core::gradcheck::{run_scope, CheckResult, Scope};

use crate::runconfig::RunConfig;

/// Runs the requested scope(s); returns the failed checks.
pub fn run(cfg: &RunConfig, scope: &str, seed: u64) -> Result<Vec<CheckResult>> {
    if cfg.was_set("precision") && cfg.precision != 64 {
        return Err(Error::Config(
            "gradcheck runs in 64-bit mode; drop the precision override".into(),
        ));
    }
    let scopes: Vec<Scope> = match scope {
        "all" => vec![Scope::Primitive, Scope::Block, Scope::Model],
        other => vec![other.parse()?],
    };

    let mut failures = Vec::new();
    for s in scopes {
        let label = match s {
            Scope::Primitive => "primitive",
            Scope::Block => "block",
            Scope::Model => "model",
        };
        let results = run_scope(s, seed)?;
        println!("scope {label}: {} checks", results.len());
        for r in &results {
            println!(
                "  {:<40} max_rel_err {:>12.3e}  tol {:.0e}  {}",
                r.name,
                r.max_rel_err,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            );
            if !r.passed() {
                failures.push(r.clone());
            }
        }
    }
    Ok(failures)
}
