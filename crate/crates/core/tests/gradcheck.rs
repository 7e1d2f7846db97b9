mod common;

use common::gradcheck::{self, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for (op, worst) in gradcheck::all_ops() {
        println!("{op:<24} worst rel err {worst:.3e}");
        assert!(worst < TOLERANCE, "{op}: worst relative error {worst:e} >= {TOLERANCE:e}");
    }
}
