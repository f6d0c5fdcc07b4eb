mod common;

use common::*;

const CASES: u64 = 24;

fn worst(case: fn(u64) -> f64) -> f64 {
    (0..CASES).map(case).fold(0.0, f64::max)
}

#[test]
fn conv_backward_matches_differences() {
    let e = worst(conv_case);
    assert!(e < 1e-6, "conv relative error {e:e}");
}

#[test]
fn dense_backward_matches_differences() {
    let e = worst(dense_case);
    assert!(e < 1e-6, "dense relative error {e:e}");
}

#[test]
fn relu_backward_matches_differences() {
    let e = worst(relu_case);
    assert!(e < 1e-6, "relu relative error {e:e}");
}

#[test]
fn maxpool_backward_matches_differences() {
    let e = worst(maxpool_case);
    assert!(e < 1e-6, "maxpool relative error {e:e}");
}

#[test]
fn softmax_xent_matches_differences() {
    let e = worst(softmax_case);
    assert!(e < 1e-6, "softmax relative error {e:e}");
}

#[test]
fn fbr_gradient_matches_frozen_penalty() {
    let e = (0..4).map(fbr_case).fold(0.0, f64::max);
    assert!(e < 1e-8, "fbr relative error {e:e}");
}

#[test]
fn ortho_gradient_matches_differences() {
    let e = worst(ortho_case);
    assert!(e < 1e-6, "ortho relative error {e:e}");
}

#[test]
fn network_gradient_matches_differences() {
    let e = (0..3).map(network_case).fold(0.0, f64::max);
    assert!(e < 1e-6, "network relative error {e:e}");
}
