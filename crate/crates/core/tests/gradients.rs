mod common;

use std::time::{Duration, Instant};

use common::gradient_suite::{run, INSTANCES};

#[test]
fn analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let checks = run(INSTANCES);
    let elapsed = start.elapsed();
    let ok = common::report(&checks);
    println!("gradient suite: {elapsed:.2?}");
    assert!(ok, "gradient checks failed");
    assert!(elapsed <= Duration::from_secs(60), "gradient suite took {elapsed:?}");
}
