//! Measurements shared by the focused tests and the acceptance runner. Each
//! returns the worst error it saw rather than asserting.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use sipflow_core::discrepancy::{
    energy_distance, kl_first_variation_grad, kl_value, mmd_first_variation_grad, mmd_sq_value, Kernel, SampleCloud,
};
use sipflow_core::ensemble::KdeDensity;
use sipflow_core::forward::{finite_difference_check, sample_rotation, NuisanceDraw, Operator, Quaternion};
use sipflow_core::harness::{run_experiment, ExperimentConfig};
use sipflow_core::mapdto::{map_loss, GaussianPrior, MapObjectiveSpec};
use sipflow_core::metrics::{linear_assignment, w2_assignment};

use super::{identity_op, normal_matrix, protein_op, rel_err, rng};

pub const STEP: f64 = 1e-5;

/// Worst vjp-vs-Jacobian relative error over 50 random points.
pub fn vjp_worst(op: &Operator, theta_range: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let theta: Vec<f64> = (0..op.param_dim()).map(|_| theta_range * (2.0 * r.random::<f64>() - 1.0)).collect();
        let rotation = if op.uses_rotation() { sample_rotation(&mut r) } else { Quaternion::IDENTITY };
        let noise = (0..op.data_dim()).map(|_| r.random::<f64>() - 0.5).collect();
        let draw = NuisanceDraw::new(rotation, noise).unwrap();
        worst = worst.max(finite_difference_check(op, &theta, &draw, STEP).unwrap());
    }
    worst
}

/// Central-difference gradient of a scalar field.
fn fd_grad(f: &dyn Fn(&[f64]) -> f64, y: &[f64], h: f64) -> Vec<f64> {
    (0..y.len())
        .map(|k| {
            let (mut p, mut m) = (y.to_vec(), y.to_vec());
            p[k] += h;
            m[k] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn clouds(seed: u64, d: usize) -> (SampleCloud, SampleCloud) {
    let mut r = rng(seed);
    let mu = normal_matrix(&mut r, 15, d, 1.0);
    let mut nu = normal_matrix(&mut r, 20, d, 1.3);
    nu.mapv_inplace(|v| v + 0.4);
    (SampleCloud::new(mu).unwrap(), SampleCloud::new(nu).unwrap())
}

fn mmd_field<'a>(kernel: Kernel, mu: &'a SampleCloud, nu: &'a SampleCloud) -> impl Fn(&[f64]) -> f64 + 'a {
    move |y: &[f64]| {
        let a: f64 = (0..mu.len()).map(|i| kernel.eval(y, mu.point(i))).sum::<f64>() / mu.len() as f64;
        let b: f64 = (0..nu.len()).map(|j| kernel.eval(y, nu.point(j))).sum::<f64>() / nu.len() as f64;
        a - b
    }
}

fn first_variation_worst(grad: &dyn Fn(&[f64]) -> Vec<f64>, field: &dyn Fn(&[f64]) -> f64, d: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let y: Vec<f64> = (0..d).map(|_| 2.0 * r.random::<f64>() - 1.0).collect();
        worst = worst.max(rel_err(&grad(&y), &fd_grad(field, &y, STEP), 1.0));
    }
    worst
}

/// MMD first-variation gradient error at 100 points in dimension `d`.
pub fn mmd_first_variation_worst(kernel: Kernel, d: usize, seed: u64) -> f64 {
    let (mu, nu) = clouds(seed, d);
    let field = mmd_field(kernel, &mu, &nu);
    first_variation_worst(&|y| mmd_first_variation_grad(y, &mu, &nu, &kernel).unwrap(), &field, d, seed + 10)
}

/// KL first-variation gradient error at 100 points in dimension `d`.
pub fn kl_first_variation_worst(eps: f64, d: usize, seed: u64) -> f64 {
    let (mu, nu) = clouds(seed, d);
    let kmu = KdeDensity::from_view(mu.points(), eps).unwrap();
    let knu = KdeDensity::from_view(nu.points(), eps).unwrap();
    let field = |y: &[f64]| kmu.log_eval(y).unwrap() - knu.log_eval(y).unwrap();
    first_variation_worst(&|y| kl_first_variation_grad(y, &mu, &nu, eps).unwrap(), &field, d, seed + 10)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn rows(a: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn mean_pair<F: Fn(&[f64], &[f64]) -> f64>(a: &[Vec<f64>], b: &[Vec<f64>], f: F) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += f(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// A random small two-sample instance; dimension cycles through 1..=4.
pub fn instance(seed: u64) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng(seed);
    let d = 1 + (seed % 4) as usize;
    let n = 3 + r.random_range(0..12);
    let m = 3 + r.random_range(0..12);
    let a = normal_matrix(&mut r, n, d, 1.0);
    let mut b = normal_matrix(&mut r, m, d, 0.8);
    b.mapv_inplace(|v| v + 0.5);
    (a, b)
}

/// `|a - b| / max(|a|, |b|, 1)`.
pub fn scaled_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst scaled error of `energy_distance` against the double-sum oracle.
pub fn energy_oracle_worst(cases: u64) -> f64 {
    (0..cases)
        .map(|seed| {
            let (a, b) = instance(seed);
            let (ra, rb) = (rows(a.view()), rows(b.view()));
            let oracle = (2.0 * mean_pair(&ra, &rb, dist) - mean_pair(&ra, &ra, dist) - mean_pair(&rb, &rb, dist)).max(0.0).sqrt();
            scaled_diff(energy_distance(&SampleCloud::new(a).unwrap(), &SampleCloud::new(b).unwrap()).unwrap(), oracle)
        })
        .fold(0.0, f64::max)
}

/// Worst scaled error of `mmd_sq_value` (Gaussian and energy kernels).
pub fn mmd_oracle_worst(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let (a, b) = instance(100 + seed);
        let (ra, rb) = (rows(a.view()), rows(b.view()));
        let (ca, cb) = (SampleCloud::new(a).unwrap(), SampleCloud::new(b).unwrap());
        let h = 0.5 + seed as f64 / 10.0;
        let gauss = |x: &[f64], y: &[f64]| (-dist(x, y).powi(2) / (2.0 * h * h)).exp();
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let energy = |x: &[f64], y: &[f64]| -dist(x, y) + norm(x) + norm(y);
        let oracle_g = 0.5 * mean_pair(&ra, &ra, gauss) + 0.5 * mean_pair(&rb, &rb, gauss) - mean_pair(&ra, &rb, gauss);
        let oracle_e = 0.5 * mean_pair(&ra, &ra, energy) + 0.5 * mean_pair(&rb, &rb, energy) - mean_pair(&ra, &rb, energy);
        worst = worst.max(scaled_diff(mmd_sq_value(&ca, &cb, &Kernel::Gaussian { bandwidth: h }).unwrap(), oracle_g));
        worst = worst.max(scaled_diff(mmd_sq_value(&ca, &cb, &Kernel::Energy).unwrap(), oracle_e));
    }
    worst
}

/// Worst scaled error of `kl_value` against explicit log-sum KDEs.
pub fn kl_oracle_worst(cases: u64) -> f64 {
    (0..cases)
        .map(|seed| {
            let (a, b) = instance(200 + seed);
            let eps = 0.2 + seed as f64 / 20.0;
            let d = a.ncols() as f64;
            let (ra, rb) = (rows(a.view()), rows(b.view()));
            let log_kde = |y: &[f64], centers: &[Vec<f64>]| {
                let s: f64 = centers.iter().map(|c| (-dist(y, c).powi(2) / (2.0 * eps)).exp()).sum();
                (s / centers.len() as f64).ln() - 0.5 * d * (2.0 * std::f64::consts::PI * eps).ln()
            };
            let oracle = ra.iter().map(|y| log_kde(y, &ra) - log_kde(y, &rb)).sum::<f64>() / ra.len() as f64;
            scaled_diff(kl_value(&SampleCloud::new(a).unwrap(), &SampleCloud::new(b).unwrap(), eps).unwrap(), oracle)
        })
        .fold(0.0, f64::max)
}

fn map_oracle(particles: ArrayView2<'_, f64>, observed: &SampleCloud, op: &Operator, spec: &MapObjectiveSpec) -> f64 {
    let k = particles.nrows();
    let mut total = 0.0;
    for i in 0..observed.len() {
        let y = observed.point(i);
        let mut s = 0.0;
        for theta in particles.rows() {
            for (q, w) in spec.rotations.iter().zip(&spec.weights) {
                let mut h = vec![0.0; op.data_dim()];
                op.apply_clean_into(theta.as_slice().unwrap(), q, &mut h).unwrap();
                s += w * (-dist(y, &h).powi(2) / (2.0 * spec.sigma * spec.sigma)).exp();
            }
        }
        total += s.ln();
    }
    let prior: f64 = particles
        .rows()
        .into_iter()
        .map(|t| -t.iter().map(|v| (v - spec.prior.mean).powi(2)).sum::<f64>() / (2.0 * spec.prior.scale.powi(2)))
        .sum();
    -total / observed.len() as f64 - spec.lambda / k as f64 * prior
}

/// Worst scaled error of `map_loss` on identity and toy-protein instances.
pub fn map_oracle_worst(cases: u64) -> f64 {
    let prior = GaussianPrior { mean: 0.3, scale: 2.0 };
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        let mut r = rng(500 + seed);
        let (op, sigma, nodes) = if seed % 2 == 0 { (identity_op(2), 1.0, 1) } else { (protein_op(8), 3.0, 3) };
        let k = 1 + r.random_range(0..3);
        let theta = normal_matrix(&mut r, k, op.param_dim(), 1.0);
        let t = normal_matrix(&mut r, 4, op.param_dim(), 1.0);
        let mut y = Array2::zeros((4, op.data_dim()));
        for (mut row, ti) in y.rows_mut().into_iter().zip(t.rows()) {
            let q = sample_rotation(&mut r);
            let mut h = vec![0.0; op.data_dim()];
            op.apply_clean_into(ti.as_slice().unwrap(), &q, &mut h).unwrap();
            for (o, v) in row.iter_mut().zip(h) {
                *o = v + 0.3 * r.random::<f64>();
            }
        }
        let obs = SampleCloud::new(y).unwrap();
        let spec = MapObjectiveSpec::with_defaults(&op, k, obs.len(), sigma, Some(0.7), prior, nodes, seed).unwrap();
        let got = map_loss(theta.view(), &obs, &op, &spec).unwrap();
        worst = worst.max(scaled_diff(got, map_oracle(theta.view(), &obs, &op, &spec)));
    }
    worst
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Instances with N ≤ 6 where the assignment cost differs from the best
/// permutation, or W₂ disagrees with it beyond rounding.
pub fn assignment_mismatches(cases: u64) -> Vec<u64> {
    let mut bad = Vec::new();
    for seed in 0..cases {
        let n = 1 + (seed % 6) as usize;
        let mut r = rng(600 + seed);
        let d = 1 + (seed % 3) as usize;
        let a = normal_matrix(&mut r, n, d, 1.0);
        let b = normal_matrix(&mut r, n, d, 1.0);
        let cost = Array2::from_shape_fn((n, n), |(i, j)| a.row(i).iter().zip(b.row(j).iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>();
        let best = permutations(n).iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        let found = linear_assignment(cost.view()).unwrap();
        let w2 = w2_assignment(a.view(), b.view()).unwrap();
        if total(&found) != best || scaled_diff(w2, (best / n as f64).sqrt()) > 1e-14 {
            bad.push(seed);
        }
    }
    bad
}

pub fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

/// Every file under `dir` except wall-clock timing and the summary/config
/// (which hold wall time and the output path), keyed by relative path.
pub fn run_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                if rel != "timing.csv" && rel != "summary.json" && rel != "config.json" {
                    out.insert(rel, std::fs::read(&p).unwrap());
                }
            }
        }
    }
    out
}

/// Runs the config once on one thread and once on four; returns the names of
/// files that differ (or exist on one side only).
pub fn thread_count_differences(make: impl Fn(&Path) -> serde_json::Value) -> Vec<String> {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("one"), root.path().join("four"));
    let load = |p: &Path| ExperimentConfig::from_json(&make(p).to_string()).unwrap();
    let (ca, cb) = (load(&a), load(&b));
    in_pool(1, || run_experiment(&ca).unwrap());
    in_pool(4, || run_experiment(&cb).unwrap());
    let (fa, fb) = (run_files(&a), run_files(&b));
    assert!(fa.contains_key("run_log.csv"));
    assert!(fa.keys().any(|k| k.starts_with("snapshots")));
    let mut names: Vec<String> = fa.keys().chain(fb.keys()).cloned().collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| fa.get(n) != fb.get(n)).collect()
}
