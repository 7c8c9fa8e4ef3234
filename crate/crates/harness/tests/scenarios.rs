use std::time::Instant;

use schedca_harness::sim::builtin::BUILTINS;
use schedca_harness::sim::{parse, run_script};

#[test]
fn every_builtin_scenario_passes() {
    let mut failed = Vec::new();
    for (name, src) in BUILTINS {
        let started = Instant::now();
        let report = run_script(src).unwrap();
        assert_eq!(report.name, *name);
        println!("{name}: {} in {:?}", if report.passed() { "pass" } else { "FAIL" }, started.elapsed());
        if !report.passed() {
            println!("{}", report.render());
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn replay_is_deterministic() {
    for (_, src) in BUILTINS.iter().take(4) {
        let a = run_script(src).unwrap().render();
        let b = run_script(src).unwrap().render();
        assert_eq!(a, b);
    }
}

#[test]
fn malformed_scripts_report_the_line() {
    let err = parse("name x\nsetup\nadvance 3 parsecs\n").unwrap_err();
    assert_eq!(err.line, 3);
    let err = parse("name x\nadvance 1slot\n").unwrap_err();
    assert_eq!(err.line, 2);
    let err = parse("name x\nsetup\nntp_fault ntp-z silent\n").unwrap_err();
    assert_eq!(err.line, 3);
}
