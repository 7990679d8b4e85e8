//! Finite-difference checks of every differentiable op (64-bit, ε = 1e-5).

use phr_tensor::gradcheck::{check_op, run_suite, DIFFERENTIABLE_OPS};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_op_passes_twenty_random_cases() {
    let summaries = run_suite(20, EPS).unwrap();
    assert_eq!(summaries.len(), DIFFERENTIABLE_OPS.len());
    for s in &summaries {
        assert!(
            s.max_rel_error <= TOL,
            "{}: max rel error {:.3e} over {} cases",
            s.op,
            s.max_rel_error,
            s.cases
        );
    }
}

#[test]
fn checker_detects_a_wrong_gradient() {
    use phr_tensor::gradcheck::check_gradients;
    use phr_tensor::Tensor;
    // relu on values straddling zero by less than ε is a kink the checker
    // must flag: numeric slope 0.5, analytic 0 or 1.
    let x = Tensor::new(vec![1, 1, 1, 2], vec![1e-7, -1e-7]).unwrap();
    let r = check_gradients(&[x], |t, v| t.relu(v[0]), EPS, 8, 1).unwrap();
    assert!(r.max_rel_error > 0.1);
}

#[test]
fn unknown_op_is_rejected() {
    assert!(check_op("softmax", 0, EPS).is_err());
}
