use tdvit::gradsuite::{run_case, run_suite, CaseKind, CASES, PRIMITIVE_TOL};

#[test]
fn every_case_within_tolerance() {
    let results = run_suite(None).unwrap();
    assert_eq!(results.len(), CASES.len());
    for r in &results {
        println!("{:24} {:?} {:.3e}", r.op, r.kind, r.max_rel_error);
        assert!(r.passed, "{} error {:e} above {:e}", r.op, r.max_rel_error, r.tolerance);
    }
}

#[test]
fn primitives_use_the_tight_tolerance() {
    for name in ["linear", "layer_norm", "gelu", "softmax"] {
        let r = run_case(name, 0.0).unwrap();
        assert_eq!((r.kind, r.tolerance), (CaseKind::Primitive, PRIMITIVE_TOL));
    }
}

#[test]
fn corrupted_block_gradient_fails() {
    let r = run_case("tdtb_window", 1e-3).unwrap();
    assert!(!r.passed);
}
