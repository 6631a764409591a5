#![allow(dead_code)]

pub mod checks;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sipflow_core::forward::{AffineIdentity, ImageSpec, Nanocluster, Operator, PseudoAtomModel, ToyProtein};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn identity_op(dim: usize) -> Operator {
    Operator::AffineIdentity(AffineIdentity { dim })
}

pub fn image_spec(side: usize, extent: f64, kernel_width: f64, noise_sigma: f64) -> ImageSpec {
    ImageSpec {
        side,
        extent,
        kernel_width,
        noise_sigma,
    }
}

pub fn nanocluster_op(side: usize) -> Operator {
    Operator::Nanocluster(Nanocluster::new(image_spec(side, 4.0, 0.4, 1.5)).unwrap())
}

pub fn protein_op(side: usize) -> Operator {
    let model = PseudoAtomModel::synthetic(16, 2.5, vec![1.0, 0.8, 0.5, 0.3], 11).unwrap();
    Operator::ToyProtein(ToyProtein::new(model, image_spec(side, 5.0, 0.5, 1.0)).unwrap())
}

/// Relative error `‖a - b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(floor)
}

pub fn onedim_config(out: &std::path::Path, particles: usize, observed: usize, iterations: usize, discrepancy: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "experiment": "onedim",
        "seed": 17,
        "output_dir": out,
        "observed_count": observed,
        "particles": particles,
        "noise_sigma": 1.5,
        "truth": {"mixture": {"components": [
            {"weight": 0.5, "mean": [-2.0], "covariance": [[0.5625]]},
            {"weight": 0.5, "mean": [2.0], "covariance": [[0.09]]}
        ]}},
        "initial": {"mixture": {"components": [{"weight": 1.0, "mean": [0.0], "covariance": [[1.0]]}]}},
        "operator": {"type": "affine_identity"},
        "discrepancy": discrepancy,
        "flow": {"iterations": iterations, "learning_rate": 0.02, "snapshot_every": 10}
    })
}

pub fn nanocluster_config(out: &std::path::Path) -> serde_json::Value {
    serde_json::json!({
        "experiment": "nanocluster",
        "seed": 5,
        "output_dir": out,
        "observed_count": 40,
        "particles": 24,
        "truth": {"mixture": {"components": [
            {"weight": 0.2, "mean": [3.0, 3.0], "covariance": [[0.5, 0.0], [0.0, 0.5]]},
            {"weight": 0.8, "mean": [5.0, 5.0], "covariance": [[0.7, 0.5], [0.5, 1.0]]}
        ]}},
        "initial": {"mixture": {"components": [{"weight": 1.0, "mean": [4.0, 4.0], "covariance": [[0.8, 0.3], [0.3, 0.8]]}]}},
        "operator": {"type": "nanocluster", "image": {"side": 16, "extent": 4.0, "kernel_width": 0.4, "noise_sigma": 1.5}},
        "discrepancy": {"kind": "energy"},
        "flow": {"iterations": 20, "learning_rate": 0.02, "snapshot_every": 5}
    })
}

pub fn protein_config(out: &std::path::Path) -> serde_json::Value {
    serde_json::json!({
        "experiment": "toyprotein",
        "seed": 6,
        "output_dir": out,
        "observed_count": 60,
        "particles": 20,
        "truth": {"mixture": {"components": [
            {"weight": 0.5, "mean": [9.0, 0.0], "covariance": [[1.0, 0.0], [0.0, 0.64]]},
            {"weight": 0.5, "mean": [-7.0, 0.0], "covariance": [[1.0, 0.0], [0.0, 0.64]]}
        ]}},
        "initial": {"uniform": {"low": [-7.0, -5.6], "high": [7.0, 5.6]}},
        "operator": {
            "type": "toy_protein",
            "image": {"side": 12, "extent": 6.0, "kernel_width": 0.5, "noise_sigma": 1.0},
            "model": {"atoms": 8, "radius": 3.0, "mode_scales": [1.0, 0.8], "seed": 2}
        },
        "rotation": "uniform",
        "discrepancy": {"kind": "energy"},
        "flow": {"iterations": 12, "learning_rate": 0.05, "minibatch": 30, "snapshot_every": 4},
        "plots": {"pca_count": 30}
    })
}

pub fn load(value: &serde_json::Value) -> sipflow_core::harness::ExperimentConfig {
    sipflow_core::harness::ExperimentConfig::from_json(&value.to_string()).unwrap()
}
