use std::process::ExitCode;
use std::time::Instant;

use modelserve_acceptance::*;
use modelserve_core::VersionPolicy;

fn report(results: &mut Vec<bool>, index: usize, name: &str, outcome: Outcome, started: Instant) {
    println!(
        "{} {index:02} {name}: {} [{:.1}s]",
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
    results.push(outcome.passed);
}

fn main() -> ExitCode {
    let mut results = Vec::new();

    let t = Instant::now();
    let available = lifecycle::swap_run(
        VersionPolicy::AvailabilityPreserving,
        64,
        50,
        std::time::Duration::from_millis(2),
    );
    report(&mut results, 1, "availability under hot-swap", lifecycle::check_availability(&available), t);
    let t = Instant::now();
    let preserving = lifecycle::swap_run(
        VersionPolicy::ResourcePreserving,
        64,
        50,
        std::time::Duration::from_millis(2),
    );
    report(&mut results, 2, "resource preservation", lifecycle::check_resource_preserving(&preserving), t);
    let t = Instant::now();
    report(
        &mut results,
        3,
        "deferred destruction off inference threads",
        lifecycle::check_deferred_destruction(&[&available, &preserving]),
        t,
    );

    let checks: [(&str, fn() -> Outcome); 9] = [
        ("wait-free reads", reads::check),
        ("batching equivalence and throughput", batching::check_throughput),
        ("round-robin fairness", batching::check_fairness),
        ("hedged requests", hedging::check),
        ("canary and rollback", canary::check),
        ("batch compression", compression::check),
        ("initial load burst", initial_load::check),
        ("policy oracle equivalence", policy::check),
        ("controller journal crash and replay", journal::check),
    ];
    for (i, (name, check)) in checks.into_iter().enumerate() {
        let t = Instant::now();
        report(&mut results, i + 4, name, Outcome::guard(|| Ok(check())), t);
    }

    let passed = results.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
