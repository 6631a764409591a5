//! The discretize-then-optimize MAP objective over `K` particle structures
//!
//! `L_{N,K}(θ) = -(1/N) Σ_i log Σ_k Σ_r w_r exp(-‖y_i - H_r θ_k‖² / 2σ²) - (λ/K) Σ_k log ρ_p(θ_k)`
//!
//! with the rotation integral replaced by a weighted quadrature, and its
//! empirical consistency diagnostics in the number of images `N` and the
//! number of particles `K`.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::discrepancy::{row_sq_norms, sq_dist_block, SampleCloud};
use crate::ensemble::LatentLaw;
use crate::error::{check_dim, Error, Result};
use crate::flow::{adam_step, AdamSettings, FlowState};
use crate::forward::{sample_rotation, NuisanceLaw, Operator, Quaternion};
use crate::numeric::{mean, sample_variance, CompensatedSum};
use crate::ensemble::ParticleEnsemble;
use crate::rng::{Purpose, StreamFamily};

/// Isotropic Gaussian prior `log ρ_p(θ) = -‖θ - m‖² / 2s²` (normalizing
/// constant dropped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianPrior {
    #[serde(default)]
    pub mean: f64,
    pub scale: f64,
}

impl GaussianPrior {
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        -theta.iter().map(|t| (t - self.mean).powi(2)).sum::<f64>() / (2.0 * self.scale * self.scale)
    }

    pub fn grad_log_density(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().map(|t| -(t - self.mean) / (self.scale * self.scale)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapObjectiveSpec {
    pub k: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub rotations: Vec<Quaternion>,
    pub weights: Vec<f64>,
    pub prior: GaussianPrior,
}

impl MapObjectiveSpec {
    pub fn new(k: usize, lambda: f64, sigma: f64, rotations: Vec<Quaternion>, weights: Vec<f64>, prior: GaussianPrior) -> Result<Self> {
        let spec = Self {
            k,
            lambda,
            sigma,
            rotations,
            weights,
            prior,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `count` seeded Haar-uniform rotations with equal weights, or the single
    /// identity node when the operator ignores rotations. `λ` defaults to `K/N`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_defaults(op: &Operator, k: usize, n: usize, sigma: f64, lambda: Option<f64>, prior: GaussianPrior, count: usize, seed: u64) -> Result<Self> {
        let rotations = if op.uses_rotation() {
            let family = StreamFamily::new(seed, Purpose::Quadrature);
            (0..count).map(|r| sample_rotation(&mut family.stream(0, r as u64))).collect()
        } else {
            vec![Quaternion::IDENTITY]
        };
        let weights = vec![1.0 / rotations.len() as f64; rotations.len()];
        Self::new(k, lambda.unwrap_or(k as f64 / n as f64), sigma, rotations, weights, prior)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidSpec("K must be at least 1".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidSpec(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidSpec(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.prior.scale > 0.0) {
            return Err(Error::InvalidSpec("prior scale must be positive".into()));
        }
        check_dim(self.rotations.len(), self.weights.len())?;
        if self.rotations.is_empty() {
            return Err(Error::Empty("rotation nodes"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidSpec("rotation weights must be nonnegative and sum to 1".into()));
        }
        Ok(())
    }
}

/// Clean renders `H_r θ_k`, row `k·R + r`.
fn renders(particles: ArrayView2<'_, f64>, op: &Operator, spec: &MapObjectiveSpec) -> Result<Array2<f64>> {
    let (k, r) = (particles.nrows(), spec.rotations.len());
    let mut out = Array2::zeros((k * r, op.data_dim()));
    for (ki, theta) in particles.rows().into_iter().enumerate() {
        let theta = theta.to_vec();
        for (ri, rot) in spec.rotations.iter().enumerate() {
            let mut row = out.row_mut(ki * r + ri);
            op.apply_clean_into(&theta, rot, row.as_slice_mut().expect("row"))?;
        }
    }
    Ok(out)
}

fn check_inputs(particles: ArrayView2<'_, f64>, observed: &SampleCloud, op: &Operator, spec: &MapObjectiveSpec) -> Result<()> {
    spec.validate()?;
    check_dim(spec.k, particles.nrows())?;
    check_dim(op.param_dim(), particles.ncols())?;
    check_dim(op.data_dim(), observed.dim())
}

/// Per-image log-sum-exp terms and, when requested, the responsibilities.
struct Likelihood {
    lse: Vec<f64>,
    responsibilities: Option<Array2<f64>>,
    renders: Array2<f64>,
}

fn likelihood(particles: ArrayView2<'_, f64>, observed: &SampleCloud, op: &Operator, spec: &MapObjectiveSpec, keep: bool) -> Result<Likelihood> {
    let t = renders(particles, op, spec)?;
    let r = spec.rotations.len();
    let log_w: Vec<f64> = spec.weights.iter().map(|w| w.ln()).collect();
    let y = observed.points();
    let (yn, tn) = (row_sq_norms(y), row_sq_norms(t.view()));
    let inv = 0.5 / (spec.sigma * spec.sigma);
    let n = y.nrows();
    let mut lse = Vec::with_capacity(n);
    let mut resp = keep.then(|| Array2::zeros((n, t.nrows())));
    let block = ((1 << 20) / t.nrows()).max(1);
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        let mut e = sq_dist_block(y.slice(s![start..end, ..]), &yn[start..end], t.view(), &tn);
        for (bi, mut row) in e.rows_mut().into_iter().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = log_w[c % r] - *v * inv;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            lse.push(max + total.ln());
            if let Some(g) = resp.as_mut() {
                let mut out = g.row_mut(start + bi);
                for (o, v) in out.iter_mut().zip(row.iter()) {
                    *o = (v - max).exp() / total;
                }
            }
        }
    }
    Ok(Likelihood {
        lse,
        responsibilities: resp,
        renders: t,
    })
}

fn prior_term(particles: ArrayView2<'_, f64>, spec: &MapObjectiveSpec) -> f64 {
    let k = particles.nrows() as f64;
    let s: f64 = particles.rows().into_iter().map(|t| spec.prior.log_density(&t.to_vec())).sum();
    -spec.lambda / k * s
}

/// `L_{N,K}` at the given `K × d_θ` particle matrix.
pub fn map_loss(particles: ArrayView2<'_, f64>, observed: &SampleCloud, op: &Operator, spec: &MapObjectiveSpec) -> Result<f64> {
    check_inputs(particles, observed, op, spec)?;
    let lk = likelihood(particles, observed, op, spec, false)?;
    let mut acc = CompensatedSum::new();
    lk.lse.iter().for_each(|v| acc.add(*v));
    Ok(-acc.value() / observed.len() as f64 + prior_term(particles, spec))
}

/// Loss and exact gradient with respect to every particle.
pub fn map_loss_and_grad(particles: ArrayView2<'_, f64>, observed: &SampleCloud, op: &Operator, spec: &MapObjectiveSpec) -> Result<(f64, Array2<f64>)> {
    check_inputs(particles, observed, op, spec)?;
    let lk = likelihood(particles, observed, op, spec, true)?;
    let n = observed.len() as f64;
    let gamma = lk.responsibilities.expect("requested");
    let r = spec.rotations.len();
    let y = observed.points();
    // Column c = (k, r): Σ_i γ_ic (y_i - T_c) / σ²
    let gy = gamma.t().dot(&y);
    let mass = gamma.sum_axis(Axis(0));
    let s2 = spec.sigma * spec.sigma;
    let (kk, d) = particles.dim();
    let mut grad = Array2::zeros((kk, d));
    let mut pulled = vec![0.0; d];
    for (ki, theta) in particles.rows().into_iter().enumerate() {
        let theta = theta.to_vec();
        for (ri, rot) in spec.rotations.iter().enumerate() {
            let c = ki * r + ri;
            let cot: Vec<f64> = gy.row(c).iter().zip(lk.renders.row(c)).map(|(g, t)| (g - mass[c] * t) / s2).collect();
            op.vjp_into(&theta, rot, &cot, &mut pulled)?;
            for j in 0..d {
                grad[[ki, j]] -= pulled[j] / n;
            }
        }
        let gp = spec.prior.grad_log_density(&theta);
        for j in 0..d {
            grad[[ki, j]] -= spec.lambda / kk as f64 * gp[j];
        }
    }
    let mut acc = CompensatedSum::new();
    lk.lse.iter().for_each(|v| acc.add(*v));
    Ok((-acc.value() / n + prior_term(particles, spec), grad))
}

pub fn map_grad(particles: ArrayView2<'_, f64>, observed: &SampleCloud, op: &Operator, spec: &MapObjectiveSpec) -> Result<Array2<f64>> {
    Ok(map_loss_and_grad(particles, observed, op, spec)?.1)
}

/// The un-discretized objective `L_N(ρ_θ)` at the empirical measure of the
/// particles (uniform weights `1/K` inside the logarithm).
pub fn empirical_objective(particles: ArrayView2<'_, f64>, observed: &SampleCloud, op: &Operator, spec: &MapObjectiveSpec) -> Result<f64> {
    Ok(map_loss(particles, observed, op, spec)? + (particles.nrows() as f64).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapOptimizerSettings {
    pub iterations: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamSettings,
}

#[derive(Debug, Clone)]
pub struct MapFit {
    pub particles: Array2<f64>,
    pub loss: f64,
    pub trace: Vec<f64>,
}

/// Minimizes `L_{N,K}` with the same Adam update the flow uses.
pub fn optimize_map(init: Array2<f64>, observed: &SampleCloud, op: &Operator, spec: &MapObjectiveSpec, settings: &MapOptimizerSettings) -> Result<MapFit> {
    let d = init.ncols();
    let lr = vec![settings.learning_rate; d];
    let mut state = FlowState::new(ParticleEnsemble::new(init)?);
    let mut trace = Vec::with_capacity(settings.iterations);
    for _ in 0..settings.iterations {
        let (loss, grad) = map_loss_and_grad(state.ensemble.particles(), observed, op, spec)?;
        trace.push(loss);
        let direction = grad.mapv(|g| -g);
        adam_step(&mut state, direction.view(), &lr, &settings.adam)?;
    }
    let particles = state.ensemble.into_particles();
    let loss = map_loss(particles.view(), observed, op, spec)?;
    Ok(MapFit { particles, loss, trace })
}

/// A generative problem for the diagnostics: `y = H_ω θ + n`, `θ ~ truth`.
#[derive(Debug, Clone)]
pub struct DiagnosticProblem<'a> {
    pub operator: &'a Operator,
    pub truth: LatentLaw,
    pub nuisance: NuisanceLaw,
    pub initial: LatentLaw,
}

impl DiagnosticProblem<'_> {
    /// `n` observations from substream family `(seed, purpose)`.
    pub fn observe(&self, n: usize, seed: u64) -> Result<SampleCloud> {
        let theta = self.truth.sample(n, &StreamFamily::new(seed, Purpose::Truth))?;
        let noise = StreamFamily::new(seed, Purpose::ObservedNuisance);
        let d = self.operator.data_dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let draw = self.nuisance.sample(&mut noise.stream(0, i as u64));
            let mut row = out.row_mut(i);
            self.operator.apply_into(theta.particle(i), &draw, row.as_slice_mut().expect("row"))?;
        }
        SampleCloud::new(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencySettings {
    pub n_schedule: Vec<usize>,
    pub k_schedule: Vec<usize>,
    pub seeds: usize,
    /// Images used by the large-K check.
    pub k_check_observations: usize,
    /// Particle count of the fixed ensemble in the large-data check.
    pub fixed_ensemble_size: usize,
    pub optimizer: MapOptimizerSettings,
    /// `λ` held fixed across the schedules (the default `K/N` would move
    /// with them).
    #[serde(default)]
    pub lambda: f64,
    pub prior: GaussianPrior,
    #[serde(default = "default_nodes")]
    pub rotation_nodes: usize,
}

fn default_nodes() -> usize {
    64
}

/// One line of the diagnostics report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub check: String,
    pub setting: String,
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub rows: Vec<ReportRow>,
    /// Median `|E_N - E_ref|` per `N`.
    pub large_data: Vec<(usize, f64)>,
    /// Mean optimized `L_{N,K}` and its standard error per `K`.
    pub large_k: Vec<(usize, f64, f64)>,
    /// The same optimized particles scored with the normalized `L_N`.
    pub large_k_normalized: Vec<(usize, f64, f64)>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    crate::numeric::median(v)
}

/// (a) `|E_N - E_ref|` for a fixed ensemble along `N`, with `E_ref` at 16×
/// the largest `N`; (b) optimized `L_{N,K}` along `K` from nested
/// initializations (the first `K` of one shared draw).
pub fn consistency_diagnostics(problem: &DiagnosticProblem<'_>, sigma: f64, settings: &ConsistencySettings, seed: u64) -> Result<ConsistencyReport> {
    let ConsistencySettings { n_schedule, k_schedule, seeds, .. } = settings;
    if n_schedule.windows(2).any(|w| w[0] >= w[1]) || k_schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSpec("schedules must be strictly increasing".into()));
    }
    if n_schedule.is_empty() || k_schedule.is_empty() || *seeds == 0 {
        return Err(Error::Empty("diagnostic schedule"));
    }
    let op = problem.operator;
    let spec_for = |k: usize| {
        MapObjectiveSpec::with_defaults(op, k, 1, sigma, Some(settings.lambda), settings.prior, settings.rotation_nodes, seed)
    };
    let mut rows = Vec::new();
    let family = StreamFamily::new(seed, Purpose::Diagnostics);
    let seed_of = |slot: u64, s: usize| rand::Rng::random::<u64>(&mut family.stream(slot, s as u64));

    // (a) large-data check
    let fixed = problem.initial.sample(settings.fixed_ensemble_size, &StreamFamily::new(seed, Purpose::Model))?;
    let fixed_spec = spec_for(fixed.len())?;
    let n_max = *n_schedule.last().expect("non-empty");
    let mut errors = vec![Vec::new(); n_schedule.len()];
    for s in 0..*seeds {
        let data_seed = seed_of(0, s);
        let reference = problem.observe(16 * n_max, data_seed)?;
        let e_ref = empirical_objective(fixed.particles(), &reference, op, &fixed_spec)?;
        // Smaller sets are fresh draws, independent of the reference.
        for (j, &n) in n_schedule.iter().enumerate() {
            let obs = problem.observe(n, seed_of(1 + j as u64, s))?;
            errors[j].push((empirical_objective(fixed.particles(), &obs, op, &fixed_spec)? - e_ref).abs());
        }
    }
    let mut large_data = Vec::new();
    for (j, &n) in n_schedule.iter().enumerate() {
        let se = (sample_variance(&errors[j]) / *seeds as f64).sqrt();
        let med = median(&mut errors[j]);
        large_data.push((n, med));
        rows.push(ReportRow {
            check: "large_data".into(),
            setting: format!("N={n}"),
            value: med,
            stderr: se,
        });
    }

    // (b) large-K check
    let k_max = *k_schedule.last().expect("non-empty");
    let mut losses = vec![Vec::new(); k_schedule.len()];
    let mut normalized = vec![Vec::new(); k_schedule.len()];
    for s in 0..*seeds {
        let obs = problem.observe(settings.k_check_observations, seed_of(100, s))?;
        let pool = problem.initial.sample(k_max, &StreamFamily::new(seed_of(200, s), Purpose::Initial))?;
        for (j, &k) in k_schedule.iter().enumerate() {
            let spec = spec_for(k)?;
            let init = pool.particles().slice(s![0..k, ..]).to_owned();
            let fit = optimize_map(init, &obs, op, &spec, &settings.optimizer)?;
            losses[j].push(fit.loss);
            normalized[j].push(fit.loss + (k as f64).ln());
        }
    }
    let summarize = |v: &[f64]| (mean(v), (sample_variance(v) / v.len() as f64).sqrt());
    let mut large_k = Vec::new();
    let mut large_k_normalized = Vec::new();
    for (j, &k) in k_schedule.iter().enumerate() {
        let (m, se) = summarize(&losses[j]);
        large_k.push((k, m, se));
        rows.push(ReportRow {
            check: "large_k".into(),
            setting: format!("K={k}"),
            value: m,
            stderr: se,
        });
        let (m, se) = summarize(&normalized[j]);
        large_k_normalized.push((k, m, se));
        rows.push(ReportRow {
            check: "large_k_normalized".into(),
            setting: format!("K={k}"),
            value: m,
            stderr: se,
        });
    }
    Ok(ConsistencyReport {
        rows,
        large_data,
        large_k,
        large_k_normalized,
    })
}

/// Writes the report as `check,setting,value,stderr`.
pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = String::from("check,setting,value,stderr\n");
    for r in rows {
        out.push_str(&format!("{},{},{:?},{:?}\n", r.check, r.setting, r.value, r.stderr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
