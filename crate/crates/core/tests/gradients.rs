mod common;

use common::gradients::{gradient_suite, TOLERANCE};

#[test]
fn every_parameter_of_every_variant_matches_finite_differences() {
    let s = gradient_suite();
    println!(
        "{} variants, {} coordinates, worst relative error {:.3e} at {}",
        s.variants, s.coordinates, s.worst, s.worst_at
    );
    assert!(s.worst < TOLERANCE, "worst relative error {} at {}", s.worst, s.worst_at);
}
