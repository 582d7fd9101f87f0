use invint::harness::gradcheck::{rel_error, run_all, run_suite, suite_names, DEFAULT_CASES, TOLERANCE};

#[test]
fn every_suite_passes_at_default_size() {
    let reports = run_all(DEFAULT_CASES, 7).unwrap();
    assert_eq!(reports.len(), suite_names().len());
    for r in &reports {
        println!("{:<22} cases {:>4} entries {:>6} max rel err {:.3e}", r.name, r.cases, r.entries, r.max_rel_error);
        assert!(r.passed, "{} failed: {:e}", r.name, r.max_rel_error);
        assert!(r.cases >= 100);
    }
}

#[test]
fn relative_error_definition() {
    assert_eq!(rel_error(2.0, 2.0, 2.0), 0.0);
    assert!((rel_error(2.0, 1.0, 2.0) - 0.5).abs() < 1e-15);
    // both ~0: compared against the floor, not against each other
    assert!(rel_error(1e-12, -1e-12, 1.0) < TOLERANCE);
}

#[test]
fn unknown_suite_is_none() {
    assert!(run_suite("nope", 1, 0).unwrap().is_none());
}
