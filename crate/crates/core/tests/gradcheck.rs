//! Central finite differences against the hand-written backward passes.

mod common;

#[test]
fn focal_segment_gradient_matches_finite_differences() {
    let (seed, bad) = common::focal_mismatches();
    assert!(
        bad.is_empty(),
        "seed {seed}: {} mismatches: {:?}",
        bad.len(),
        &bad[..bad.len().min(6)]
    );
}

#[test]
fn ntxent_embed_gradient_matches_finite_differences() {
    let (seed, bad) = common::ntxent_mismatches();
    assert!(
        bad.is_empty(),
        "seed {seed}: {} mismatches: {:?}",
        bad.len(),
        &bad[..bad.len().min(6)]
    );
}
