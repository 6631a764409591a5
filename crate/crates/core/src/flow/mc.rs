//! Monte Carlo estimators of `I = E_{θ ~ ρ_θ, ω ~ μ_ω}[φ(θ, ω)]` under the
//! three pairing strategies, and their variance diagnostics.

use ndarray::Array2;

use super::McStrategy;
use crate::ensemble::{LatentLaw, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::forward::{NuisanceDraw, NuisanceLaw};
use crate::numeric::{mean, sample_variance, CompensatedSum};
use crate::rng::{Purpose, StreamFamily};

/// Where parameter samples come from.
#[derive(Debug, Clone, Copy)]
pub enum ParameterSource<'a> {
    /// Draw `N` fresh samples.
    Law(&'a LatentLaw),
    /// Use the ensemble's particles as the `θ_i`; `N` is its size.
    Ensemble(&'a ParticleEnsemble),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    /// Jackknife standard error over the `θ` index; NaN when `N = 1`.
    pub std_error: f64,
}

// Iteration slots inside the Monte Carlo stream family.
const THETA_SLOT: u64 = 0;
const JOINT_SLOT: u64 = 1;
const SHARED_SLOT: u64 = 2;
const NESTED_SLOT: u64 = 3;

fn thetas(source: ParameterSource<'_>, n: usize, family: &StreamFamily) -> Result<Array2<f64>> {
    match source {
        ParameterSource::Law(law) => {
            debug_assert_eq!(THETA_SLOT, 0, "LatentLaw::sample uses slot 0");
            Ok(law.sample(n, family)?.into_particles())
        }
        ParameterSource::Ensemble(e) => Ok(e.particles().to_owned()),
    }
}

fn draw(law: &NuisanceLaw, family: &StreamFamily, slot: u64, index: u64) -> NuisanceDraw {
    law.sample(&mut family.stream(slot, index))
}

/// Jackknife standard error of the mean of `g`; equals `sd(g)/√N`.
fn jackknife_se(g: &[f64]) -> f64 {
    let n = g.len();
    if n < 2 {
        return f64::NAN;
    }
    let total = g.iter().sum::<f64>();
    let loo: Vec<f64> = g.iter().map(|x| (total - x) / (n - 1) as f64).collect();
    let m = mean(&loo);
    let ss = loo.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    ((n - 1) as f64 / n as f64 * ss).sqrt()
}

/// `Î₁`, `Î₂` or `Î₃` with a jackknife standard error over the `θ` index.
///
/// For a law source, `n` parameter samples are drawn; for an ensemble source
/// `n` is ignored. Nuisance draws come from `seed`'s Monte Carlo substreams.
pub fn mc_estimate<F>(phi: F, source: ParameterSource<'_>, nuisance: &NuisanceLaw, strategy: McStrategy, n: usize, seed: u64) -> Result<McEstimate>
where
    F: Fn(&[f64], &NuisanceDraw) -> f64,
{
    if n == 0 && matches!(source, ParameterSource::Law(_)) {
        return Err(Error::InvalidSpec("N must be at least 1".into()));
    }
    let family = StreamFamily::new(seed, Purpose::MonteCarlo);
    let theta = thetas(source, n, &family)?;
    let rows = theta.nrows();
    let row = |i: usize| theta.row(i).to_vec();
    let per_theta: Vec<f64> = match strategy {
        McStrategy::Joint => (0..rows).map(|i| phi(&row(i), &draw(nuisance, &family, JOINT_SLOT, i as u64))).collect(),
        McStrategy::Shared { k } => {
            check_k(k)?;
            let shared: Vec<NuisanceDraw> = (0..k).map(|j| draw(nuisance, &family, SHARED_SLOT, j as u64)).collect();
            (0..rows)
                .map(|i| {
                    let t = row(i);
                    let mut acc = CompensatedSum::new();
                    shared.iter().for_each(|w| acc.add(phi(&t, w)));
                    acc.value() / k as f64
                })
                .collect()
        }
        McStrategy::Nested { k } => {
            check_k(k)?;
            (0..rows)
                .map(|i| {
                    let t = row(i);
                    let mut acc = CompensatedSum::new();
                    for j in 0..k {
                        acc.add(phi(&t, &draw(nuisance, &family, NESTED_SLOT, (i * k + j) as u64)));
                    }
                    acc.value() / k as f64
                })
                .collect()
        }
    };
    Ok(McEstimate {
        estimate: mean(&per_theta),
        std_error: jackknife_se(&per_theta),
    })
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidSpec("K must be at least 1".into()));
    }
    Ok(())
}

/// Inner moments entering the analytic variances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceComponents {
    /// `Var_{θ,ω}[φ]`.
    pub total: f64,
    /// `Var_θ[E_ω φ]`.
    pub between_theta: f64,
    /// `Var_ω[E_θ φ]`.
    pub between_omega: f64,
    /// `E_θ[Var_ω φ]`.
    pub within_theta: f64,
}

impl VarianceComponents {
    /// Analytic variance of the estimator for sample sizes `(N, K)`.
    pub fn estimator_variance(&self, strategy: McStrategy, n: usize) -> f64 {
        let n = n as f64;
        match strategy {
            McStrategy::Joint => self.total / n,
            McStrategy::Shared { k } => {
                let k = k as f64;
                self.total / (n * k) + (1.0 / n - 1.0 / (n * k)) * self.between_theta + (1.0 / k - 1.0 / (n * k)) * self.between_omega
            }
            McStrategy::Nested { k } => {
                let k = k as f64;
                self.within_theta / (n * k) + self.between_theta / n
            }
        }
    }
}

/// Estimates the variance components on a `G × G` product grid of
/// independent `θ` and `ω` draws, with the usual two-way bias corrections
/// for the row and column means.
pub fn variance_components<F>(phi: &F, law: &LatentLaw, nuisance: &NuisanceLaw, grid: usize, seed: u64) -> Result<VarianceComponents>
where
    F: Fn(&[f64], &NuisanceDraw) -> f64,
{
    if grid < 2 {
        return Err(Error::InvalidSpec("variance grid needs at least 2 points".into()));
    }
    let family = StreamFamily::new(seed, Purpose::Diagnostics);
    let theta = law.sample(grid, &family)?.into_particles();
    let omegas: Vec<NuisanceDraw> = (0..grid).map(|j| draw(nuisance, &family, 1, j as u64)).collect();
    let mut values = Array2::zeros((grid, grid));
    for (a, t) in theta.rows().into_iter().enumerate() {
        let t = t.to_vec();
        for (b, w) in omegas.iter().enumerate() {
            values[[a, b]] = phi(&t, w);
        }
    }
    let flat: Vec<f64> = values.iter().copied().collect();
    let total = sample_variance(&flat);
    let g = grid as f64;
    let row_means: Vec<f64> = values.rows().into_iter().map(|r| mean(r.as_slice().expect("row"))).collect();
    let row_vars: Vec<f64> = values.rows().into_iter().map(|r| sample_variance(r.as_slice().expect("row"))).collect();
    let cols: Vec<Vec<f64>> = (0..grid).map(|b| values.column(b).to_vec()).collect();
    let col_means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
    let col_vars: Vec<f64> = cols.iter().map(|c| sample_variance(c)).collect();
    let within_theta = mean(&row_vars);
    let between_theta = (sample_variance(&row_means) - within_theta / g).max(0.0);
    let between_omega = (sample_variance(&col_means) - mean(&col_vars) / g).max(0.0);
    Ok(VarianceComponents {
        total,
        between_theta,
        between_omega,
        within_theta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub strategy: McStrategy,
    pub empirical: f64,
    pub analytic: f64,
    pub ratio: f64,
    pub mean_estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub components: VarianceComponents,
    pub rows: Vec<VarianceRow>,
}

/// Replicated estimates for all three strategies at `(N, K)`, compared with
/// the analytic variances (inner moments from a 1000 × 1000 grid, i.e. 10⁶
/// evaluations of `φ`).
pub fn estimator_variance_report<F>(
    phi: F,
    law: &LatentLaw,
    nuisance: &NuisanceLaw,
    n: usize,
    k: usize,
    replicates: usize,
    seed: u64,
) -> Result<VarianceReport>
where
    F: Fn(&[f64], &NuisanceDraw) -> f64,
{
    if replicates < 50 {
        return Err(Error::InvalidSpec(format!("need at least 50 replicates, got {replicates}")));
    }
    let components = variance_components(&phi, law, nuisance, 1000, seed)?;
    let strategies = [McStrategy::Joint, McStrategy::Shared { k }, McStrategy::Nested { k }];
    let replicate_seeds = StreamFamily::new(seed, Purpose::MonteCarlo);
    let mut rows = Vec::new();
    for strategy in strategies {
        let estimates: Vec<f64> = (0..replicates)
            .map(|r| {
                let s = rand::Rng::random::<u64>(&mut replicate_seeds.stream(u32::MAX as u64, r as u64));
                mc_estimate(&phi, ParameterSource::Law(law), nuisance, strategy, n, s).map(|e| e.estimate)
            })
            .collect::<Result<_>>()?;
        let empirical = sample_variance(&estimates);
        let analytic = components.estimator_variance(strategy, n);
        rows.push(VarianceRow {
            strategy,
            empirical,
            analytic,
            ratio: empirical / analytic,
            mean_estimate: mean(&estimates),
        });
    }
    Ok(VarianceReport { components, rows })
}
