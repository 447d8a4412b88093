mod common;

use common::*;

#[test]
fn ift_matches_extrapolated_finite_differences() {
    let r = sensitivity_check(11, 50, 1e-6);
    eprintln!("checked {}, flagged {}, worst/limit {:.3e}", r.checked, r.flagged, r.worst);
    assert!(r.worst <= 1.0);
}
