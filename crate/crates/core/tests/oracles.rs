//! Library values against direct double sums and exhaustive searches.

mod common;

use common::checks::{
    assignment_mismatches, energy_oracle_worst, instance, kl_oracle_worst, map_oracle_worst, mmd_oracle_worst, scaled_diff,
};
use common::{normal_matrix, rng};
use sipflow_core::discrepancy::{kl_value, mmd_sq_value, DiscrepancySpec, Kernel, SampleCloud};
use sipflow_core::metrics::{w2_1d, w2_assignment};

fn close(a: f64, b: f64, tol: f64) -> bool {
    scaled_diff(a, b) <= tol
}

#[test]
fn energy_distance_matches_double_sums() {
    let e = energy_oracle_worst(25);
    assert!(e <= 1e-10, "{e}");
}

#[test]
fn mmd_matches_double_sums() {
    let e = mmd_oracle_worst(25);
    assert!(e <= 1e-10, "{e}");
}

#[test]
fn kl_matches_log_sum_oracle() {
    let e = kl_oracle_worst(25);
    assert!(e <= 1e-8, "{e}");
}

#[test]
fn map_loss_matches_log_sum_oracle() {
    let e = map_oracle_worst(20);
    assert!(e <= 1e-10, "{e}");
}

#[test]
fn assignment_matches_exhaustive_search() {
    assert_eq!(assignment_mismatches(40), Vec::<u64>::new());
}

/// The prepared (batched) evaluation reports the same loss as the
/// standalone value functions.
#[test]
fn prepared_losses_match_value_functions() {
    for seed in 0..20 {
        let (a, b) = instance(300 + seed);
        let (ca, cb) = (SampleCloud::new(a).unwrap(), SampleCloud::new(b).unwrap());
        let eps = 0.4;
        let cases = [
            (DiscrepancySpec::Energy, mmd_sq_value(&ca, &cb, &Kernel::Energy).unwrap(), 1e-10),
            (
                DiscrepancySpec::Mmd { kernel: Kernel::Gaussian { bandwidth: 0.9 } },
                mmd_sq_value(&ca, &cb, &Kernel::Gaussian { bandwidth: 0.9 }).unwrap(),
                1e-10,
            ),
            (DiscrepancySpec::Kl { bandwidth: Some(eps) }, kl_value(&ca, &cb, eps).unwrap(), 1e-8),
        ];
        for (spec, oracle, tol) in cases {
            let got = spec.prepare(cb.clone()).unwrap().evaluate(&ca).unwrap().loss;
            assert!(close(got, oracle, tol), "seed {seed} {}: {got} vs {oracle}", spec.name());
        }
    }
}

/// A minibatch view reports the loss of a freshly prepared batch.
#[test]
fn subset_matches_fresh_preparation() {
    let (a, b) = instance(400);
    let (ca, cb) = (SampleCloud::new(a).unwrap(), SampleCloud::new(b).unwrap());
    let picked: Vec<usize> = (0..cb.len()).step_by(2).collect();
    for spec in [DiscrepancySpec::Energy, DiscrepancySpec::Mmd { kernel: Kernel::Gaussian { bandwidth: 0.6 } }] {
        let full = spec.prepare(cb.clone()).unwrap();
        let sub = full.subset(&picked).unwrap().evaluate(&ca).unwrap();
        let fresh = spec.prepare(cb.select(&picked).unwrap()).unwrap().evaluate(&ca).unwrap();
        assert!(close(sub.loss, fresh.loss, 1e-12));
        assert_eq!(sub.gradients, fresh.gradients);
    }
}

#[test]
fn w2_examples() {
    assert_eq!(w2_1d(&[0.0], &[3.0]).unwrap(), 3.0);
    assert!((w2_1d(&[0.0, 1.0], &[2.0, 5.0]).unwrap() - 10f64.sqrt()).abs() < 1e-15);
    let mut r = rng(700);
    let a = normal_matrix(&mut r, 30, 1, 1.0);
    let b = normal_matrix(&mut r, 30, 1, 2.0);
    let sorted = w2_1d(a.column(0).as_slice_memory_order().unwrap(), b.column(0).as_slice_memory_order().unwrap()).unwrap();
    assert!((w2_assignment(a.view(), b.view()).unwrap() - sorted).abs() < 1e-10);
}
