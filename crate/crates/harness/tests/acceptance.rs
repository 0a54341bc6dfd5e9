use std::process::ExitCode;

use vilo_harness::acceptance::*;

fn main() -> ExitCode {
    let seeds: Vec<u64> = (0..10).collect();
    let checks: [&dyn Fn() -> Outcome; 9] = [
        &|| ransac_success_rates(1000),
        &|| two_point_advantage(1000),
        &|| deterministic_initialization(100),
        &|| inlier_recall(50),
        &filter_correctness,
        &|| bounded_error(&seeds[..5]),
        &|| mode_orderings(&seeds),
        &metrics_suite,
        &|| causality(&causality_scenario()),
    ];
    let mut failed = 0;
    for check in checks {
        let outcome = check();
        println!("{outcome}");
        failed += usize::from(!outcome.passed);
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
