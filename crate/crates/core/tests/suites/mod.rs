//! Check suites shared by the per-topic test targets and the acceptance run.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord)]

pub mod identity;

use std::time::Instant;

pub type Outcome = Result<(), String>;
pub type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}
pub(crate) use ensure;

/// `|a − b| ≤ tol` elementwise, with a diagnostic naming the worst entry.
pub fn close(what: &str, got: &[f64], want: &[f64], tol: f64) -> Outcome {
    ensure!(
        got.len() == want.len(),
        "{what}: {} values vs {}",
        got.len(),
        want.len()
    );
    let (i, err) = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .enumerate()
        .fold((0, 0.0), |m, (i, e)| if e > m.1 || e.is_nan() { (i, e) } else { m });
    ensure!(
        err <= tol,
        "{what}: entry {i} off by {err:e} (got {}, want {})",
        got[i],
        want[i]
    );
    Ok(())
}

pub fn close1(what: &str, got: f64, want: f64, tol: f64) -> Outcome {
    close(what, &[got], &[want], tol)
}

pub struct SuiteResult {
    pub failures: Vec<String>,
    pub seconds: f64,
}

/// Run every check, printing one line each.
pub fn run(label: &str, checks: &[Check]) -> SuiteResult {
    let start = Instant::now();
    let mut failures = Vec::new();
    for (name, f) in checks {
        let t = Instant::now();
        match f() {
            Ok(()) => println!("  {label}/{name}: ok ({:.2}s)", t.elapsed().as_secs_f64()),
            Err(e) => {
                println!("  {label}/{name}: FAILED: {e}");
                failures.push(format!("{name}: {e}"));
            }
        }
    }
    SuiteResult {
        failures,
        seconds: start.elapsed().as_secs_f64(),
    }
}
