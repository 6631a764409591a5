//! Adjoints and first-variation gradients against central differences.

mod common;

use common::checks::{kl_first_variation_worst, mmd_first_variation_worst, vjp_worst};
use common::{identity_op, nanocluster_op, protein_op};
use sipflow_core::discrepancy::Kernel;

#[test]
fn vjp_matches_finite_differences_identity() {
    let e = vjp_worst(&identity_op(3), 5.0, 1);
    assert!(e <= 1e-5, "relative error {e}");
}

#[test]
fn vjp_matches_finite_differences_nanocluster() {
    let e = vjp_worst(&nanocluster_op(32), 6.0, 2);
    assert!(e <= 1e-5, "relative error {e}");
}

#[test]
fn vjp_matches_finite_differences_toy_protein() {
    let e = vjp_worst(&protein_op(24), 6.0, 3);
    assert!(e <= 1e-5, "relative error {e}");
}

#[test]
fn energy_first_variation_matches_finite_differences() {
    for d in [1, 3] {
        let e = mmd_first_variation_worst(Kernel::Energy, d, 10 + d as u64);
        assert!(e <= 1e-5, "d={d}: {e}");
    }
}

#[test]
fn gaussian_mmd_first_variation_matches_finite_differences() {
    for d in [1, 2] {
        let e = mmd_first_variation_worst(Kernel::Gaussian { bandwidth: 0.7 }, d, 30 + d as u64);
        assert!(e <= 1e-5, "d={d}: {e}");
    }
}

#[test]
fn kl_first_variation_matches_finite_differences() {
    for d in [1, 2] {
        let e = kl_first_variation_worst(0.3, d, 50 + d as u64);
        assert!(e <= 1e-5, "d={d}: {e}");
    }
}
