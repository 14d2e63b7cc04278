//! Acceptance battery: one PASS/FAIL line per criterion, nonzero exit if any
//! fails.
//!
//! Closed forms and bounds are recomputed here rather than taken from the
//! library, so a wrong constant in the crate cannot vouch for itself.

use std::process::ExitCode;

use collapse_lab::collapse::{alternating_tv, tv_decay_experiment};
use collapse_lab::selftest::{run_criterion, CRITERIA};

/// softmax of (1,0,...) puts e/(m(e+1)) on odd slots and 1/(m(e+1)) on even
/// ones, m = n/2; the swapped vector mirrors it, so the L1 distance is
/// n (e-1)/(m(e+1)) = 2(e-1)/(e+1).
fn alternating_oracle() -> std::result::Result<(), String> {
    let e = 1f64.exp();
    let oracle = 2.0 * (e - 1.0) / (e + 1.0);
    if (oracle - 0.9242343).abs() >= 1e-7 {
        return Err(format!("closed form {oracle} disagrees with 0.9242343"));
    }
    for n in (2..=10_000).step_by(2) {
        let tv = alternating_tv(n).map_err(|e| e.to_string())?;
        if (tv - oracle).abs() > 1e-12 {
            return Err(format!("n={n}: {tv} vs {oracle}"));
        }
    }
    Ok(())
}

/// TV <= 2 (Z* - Z)/Z with Z >= n (weights e^x >= 1) and each of the k
/// perturbed weights growing by at most e (e^noise - 1).
fn tv_oracle() -> std::result::Result<(), String> {
    let (k, noise, n) = (200usize, 0.1f64, 100_000usize);
    let oracle = 2.0 * k as f64 * 1f64.exp() * (noise.exp() - 1.0) / n as f64;
    for r in tv_decay_experiment(&[n], k, noise, &[0, 1, 2, 3, 4]).map_err(|e| e.to_string())? {
        if !(r.tv < oracle) {
            return Err(format!("seed {}: tv {} >= oracle {oracle}", r.seed, r.tv));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut failed = 0;
    for (id, _) in CRITERIA {
        let run = run_criterion(id);
        let oracle = match id {
            2 => alternating_oracle(),
            3 => tv_oracle(),
            _ => Ok(()),
        };
        println!("{}", run.outcome.line());
        if let Err(msg) = &oracle {
            println!("FAIL C{id:02} independent oracle: {msg}");
        }
        if !run.outcome.passed || oracle.is_err() {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
