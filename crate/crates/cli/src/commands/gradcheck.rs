use baylm::gradcheck::{full_suite, report, TOLERANCE};

use super::Ctx;
use crate::error::{CliError, Result};

pub fn run(ctx: &Ctx) -> Result<()> {
    let checks = full_suite(&ctx.rng.derive("gradcheck"))?;
    ctx.write("gradcheck.tsv", report(&checks))?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    println!("checks\t{}\nmax_rel_err\t{worst:e}", checks.len());
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!(
            "gradient check above {TOLERANCE:e}: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
