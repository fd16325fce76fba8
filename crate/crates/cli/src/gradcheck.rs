//! `gradcheck`: finite-difference gradient checks in 64-bit.

use std::time::Instant;

use vtp_core::gradcheck::{self, CHECKS, NEGATIVE_CONTROL, TOLERANCE};

use crate::failure::Failure;
use crate::GradcheckArgs;

pub fn run(args: &GradcheckArgs) -> Result<(), Failure> {
    let names: Vec<&str> = match args.scope.as_str() {
        "all" => CHECKS.to_vec(),
        s if CHECKS.contains(&s) || s == NEGATIVE_CONTROL => vec![s],
        s => {
            return Err(Failure::Usage(format!(
                "unknown gradient check {s:?}; expected `all` or one of: {}",
                CHECKS.join(", ")
            )))
        }
    };
    let start = Instant::now();
    println!("{:<24} {:>12} {:>7}  result", "operation", "max_rel_err", "probes");
    let mut failed = Vec::new();
    for name in names {
        let r = gradcheck::run(name)?;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>12.3e} {:>7}  {verdict}", r.name, r.max_rel_err, r.probes);
        if !r.passed() {
            failed.push(r.name);
        }
    }
    println!("tolerance {TOLERANCE:e}, {:.1} s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}
