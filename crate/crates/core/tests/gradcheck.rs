mod common;

use common::grad::{self, TOL, TOL_E2E};

fn assert_all(results: Vec<(&'static str, f64)>) {
    for (name, err) in results {
        assert!(err < TOL, "{name}: relative gradient error {err:e} >= {TOL:e}");
    }
}

#[test]
fn elementwise_ops() {
    assert_all(grad::elementwise_ops());
}

#[test]
fn conv2d() {
    assert_all(grad::conv2d());
}

#[test]
fn normalisation() {
    assert_all(grad::normalisation());
}

#[test]
fn resampling_and_layout() {
    assert_all(grad::resampling_and_layout());
}

#[test]
fn linear_and_attention() {
    assert_all(grad::linear_and_attention());
}

#[test]
fn bce_with_logits() {
    assert_all(grad::bce_with_logits());
}

#[test]
fn tiny_model_end_to_end() {
    let (err, _) = grad::tiny_model_end_to_end();
    assert!(err < TOL_E2E, "end-to-end relative error {err:.3e}");
}
