//! Byte-identical outputs across thread counts, and particle exchangeability.

mod common;

use std::path::Path;

use common::checks::thread_count_differences;
use common::{nanocluster_config, onedim_config, protein_config};
use ndarray::Array2;
use serde_json::json;
use sipflow_core::discrepancy::{DiscrepancySpec, SampleCloud};
use sipflow_core::ensemble::{GaussianMixtureSpec, LatentLaw, ParticleEnsemble};
use sipflow_core::flow::{run_flow, FlowConfig, FlowProblem, FlowState, LearningRate};
use sipflow_core::forward::{NuisanceLaw, RotationLaw};
use sipflow_core::rng::{Purpose, StreamFamily};

fn assert_reproducible(make: impl Fn(&Path) -> serde_json::Value) {
    let differing = thread_count_differences(make);
    assert!(differing.is_empty(), "differ between thread counts: {differing:?}");
}

#[test]
fn onedim_energy_is_thread_count_independent() {
    assert_reproducible(|out| onedim_config(out, 200, 500, 30, json!({"kind": "energy"})));
}

#[test]
fn onedim_kl_is_thread_count_independent() {
    assert_reproducible(|out| onedim_config(out, 200, 500, 30, json!({"kind": "kl"})));
}

#[test]
fn nanocluster_is_thread_count_independent() {
    assert_reproducible(nanocluster_config);
}

#[test]
fn toy_protein_is_thread_count_independent() {
    assert_reproducible(protein_config);
}

#[test]
fn relabeling_particles_relabels_the_trajectory() {
    let law = LatentLaw::Mixture(GaussianMixtureSpec::standard_normal(2));
    let observed = SampleCloud::new(law.sample(80, &StreamFamily::new(1, Purpose::Truth)).unwrap().into_particles().mapv(|v| v * 0.5 + 1.0)).unwrap();
    let start = law.sample(12, &StreamFamily::new(1, Purpose::Initial)).unwrap();
    let op = common::identity_op(2);
    let problem = FlowProblem {
        operator: &op,
        nuisance: NuisanceLaw::new(RotationLaw::Identity, 0.3, 2).unwrap(),
        observed: &observed,
        discrepancy: DiscrepancySpec::Energy,
        truth: None,
    };
    let config: FlowConfig = serde_json::from_value(json!({"iterations": 25, "learning_rate": 0.05, "seed": 4})).unwrap();
    assert_eq!(config.learning_rate, LearningRate::Uniform(0.05));
    let base = run_flow(&problem, FlowState::new(start.clone()), &config, |_| std::ops::ControlFlow::Continue(())).unwrap();

    let perm: Vec<usize> = (0..12).rev().collect();
    let permuted = ParticleEnsemble::new(start.particles().select(ndarray::Axis(0), &perm)).unwrap();
    let keys = perm.iter().map(|&i| i as u32).collect();
    let moved = run_flow(&problem, FlowState::with_keys(permuted, keys).unwrap(), &config, |_| std::ops::ControlFlow::Continue(())).unwrap();

    let a: Array2<f64> = base.state.ensemble.particles().select(ndarray::Axis(0), &perm);
    let b = moved.state.ensemble.particles();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}
