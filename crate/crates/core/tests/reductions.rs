mod common;

use common::reductions::{attribute_worst, categorical_worst, fm, ratings_worst};
use efa_core::attention::Direction;
use efa_core::fm::{construct_equivalent_efa, FmVariant, Reduction};

#[test]
fn categorical_reduction_matches_fm() {
    let worst = categorical_worst();
    assert!(worst < 1e-10, "max abs error {worst}");
}

#[test]
fn attribute_reduction_matches_fm() {
    let worst = attribute_worst();
    assert!(worst < 1e-10, "max abs error {worst}");
}

#[test]
fn ratings_reduction_matches_fm() {
    let worst = ratings_worst();
    assert!(worst < 1e-10, "max abs error {worst}");
}

#[test]
fn reductions_reject_mismatched_models() {
    let cat = fm(FmVariant::Categorical, 2, 3, None);
    assert!(construct_equivalent_efa(Reduction::P3, &cat, 3).is_err());
    assert!(construct_equivalent_efa(Reduction::P1, &cat, 1).is_err());
    let mut uni = cat.clone();
    uni.config.direction = Direction::Unidirectional;
    assert!(construct_equivalent_efa(Reduction::P1, &uni, 3).is_err());
}
