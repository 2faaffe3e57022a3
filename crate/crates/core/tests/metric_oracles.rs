use amfd_core::checks::metric_oracle_suite;

#[test]
fn metrics_agree_with_enumeration_oracles() {
    let report = metric_oracle_suite(200);
    assert!(report.passed, "{report}");
    assert!(report.cases > 600, "{report}");
}
