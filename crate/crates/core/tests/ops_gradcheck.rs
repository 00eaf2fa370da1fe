//! Finite-difference checks of every differentiable operation, 20 seeds each.

use fat_core::gradcheck::suite;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;

fn check_group(group: &str) {
    let results = suite::run(&[group], SEEDS, EPS).unwrap();
    assert!(!results.is_empty());
    for r in &results {
        assert!(r.passed(TOL), "{}: max relative error {:.3e} {:?}", r.name, r.max_rel_err, r.error);
    }
}

#[test]
fn elementwise_gradients() {
    check_group("elementwise");
}

#[test]
fn matmul_gradients() {
    check_group("matmul");
}

#[test]
fn normalization_gradients() {
    check_group("normalization");
}

#[test]
fn layout_gradients() {
    check_group("layout");
}

#[test]
fn convolution_gradients() {
    check_group("convolution");
}

#[test]
fn loss_gradients() {
    check_group("loss");
}

#[test]
fn performer_gradients() {
    check_group("performer");
}

#[test]
fn forced_gradients() {
    check_group("forced");
}

#[test]
fn fusion_gradients() {
    check_group("fusion");
}

#[test]
fn attention_gradients() {
    check_group("attention");
}

#[test]
fn encoder_gradients() {
    check_group("encoder");
}

#[test]
fn backbone_gradients() {
    check_group("backbone");
}

#[test]
fn unknown_group_is_rejected() {
    assert!(suite::run(&["nope"], 1, EPS).is_err());
    assert!(suite::run(&[], 0, EPS).is_err());
}
