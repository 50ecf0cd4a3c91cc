//! Finite-difference oracles for every graph op at randomized points.

mod common;

#[test]
fn every_op_matches_central_differences() {
    let tol = [1e-5, 1e-4, 1e-3];
    let mut failures = Vec::new();
    for r in common::op_fd_suite(0x5eed) {
        for (k, (&err, &t)) in r.err.iter().zip(tol.iter()).enumerate() {
            if err > t || err.is_nan() {
                failures.push(format!(
                    "{}: order {} rel err {err:.3e} > {t:.0e}",
                    r.name,
                    k + 1
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
