//! Finite-difference check of every tape primitive and of the extractor loss.

use pobrl_core::cli::{cmd_gradcheck, GradcheckArgs, RunConfig};

fn main() -> pobrl_core::Result<()> {
    let report = cmd_gradcheck(&RunConfig::default(), &GradcheckArgs::default())?;
    for c in &report.checks {
        println!("{:<14} {:.2e} {}", c.name, c.max_relative_error, if c.passed { "ok" } else { "FAILED" });
    }
    Ok(())
}
