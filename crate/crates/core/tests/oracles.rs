mod common;

use common::{gradcheck, invariants, oracles};

#[test]
fn structural_invariants() {
    for (name, check) in invariants::all() {
        if let Err(e) = check {
            panic!("{name}: {e}");
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    gradcheck::two_layer_gradients().unwrap();
}

#[test]
fn autoregressive_beam_matches_enumeration() {
    oracles::aic_matches_enumeration(40).unwrap();
}

#[test]
fn two_stage_beam_matches_enumeration() {
    oracles::saic_matches_enumeration(40).unwrap();
}

#[test]
fn unit_groups_are_greedy_decoding() {
    oracles::unit_groups_equal_greedy(100).unwrap();
}

#[test]
fn wider_beams_rarely_score_lower() {
    let (checked, violations, examples) = oracles::beam_monotonicity(200, 5);
    assert!(violations * 100 <= checked, "{violations}/{checked}: {examples:?}");
}
