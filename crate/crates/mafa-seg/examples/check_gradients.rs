//! Verify every analytic gradient against central differences.
//!
//! Each differentiable operation is perturbed coordinate by coordinate with
//! step 1e-5 and the worst relative error over several seeds is reported,
//! followed by an end-to-end check through a tiny network and both losses.

use mafa_seg::gradcheck;

fn main() {
    let results = gradcheck::run_all(0, 5);
    let mut all_pass = true;
    for r in &results {
        println!("{}", r.line());
        all_pass &= r.pass;
    }
    println!(
        "\n{} checks, tolerances {:.0e} per-op / {:.0e} end-to-end: {}",
        results.len(),
        gradcheck::OP_TOLERANCE,
        gradcheck::END_TO_END_TOLERANCE,
        if all_pass { "all pass" } else { "FAILURES" }
    );
}
