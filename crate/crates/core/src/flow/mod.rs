//! The particle Wasserstein gradient flow.
//!
//! Each iteration draws one nuisance realization per particle, pushes every
//! particle through the random forward operator, evaluates the data-space
//! gradient of the discrepancy's first variation on the predicted cloud, pulls
//! it back through the operator's VJP and moves the particles with Adam (or
//! forward Euler).

mod mc;

pub use mc::{estimator_variance_report, mc_estimate, McEstimate, ParameterSource, VarianceComponents, VarianceReport, VarianceRow};

use std::ops::ControlFlow;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrepancy::{energy_distance, DiscrepancySpec, PreparedDiscrepancy, SampleCloud};
use crate::ensemble::ParticleEnsemble;
use crate::error::{check_dim, Error, Result};
use crate::forward::{NuisanceDraw, NuisanceLaw, Operator};
use crate::metrics::w2_ensembles;
use crate::rng::{Purpose, StreamFamily};

/// Particle update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// `θ ← θ + η ⊙ dθ/dt`.
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// How `θ` and `ω` samples are paired in a Monte Carlo push-forward estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum McStrategy {
    /// One fresh `ω` per `θ` (i.i.d. from the product law).
    #[default]
    Joint,
    /// All `θ_i` share the same `K` draws `ω_k`.
    Shared { k: usize },
    /// Every `θ_i` gets its own `K` draws `ω_ik`.
    Nested { k: usize },
}

impl McStrategy {
    pub fn label(&self) -> &'static str {
        match self {
            McStrategy::Joint => "joint",
            McStrategy::Shared { .. } => "shared",
            McStrategy::Nested { .. } => "nested",
        }
    }
}

/// Step size: one value for every coordinate or one per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Uniform(f64),
    PerCoordinate(Vec<f64>),
}

impl LearningRate {
    pub fn resolve(&self, dim: usize) -> Result<Vec<f64>> {
        let v = match self {
            LearningRate::Uniform(x) => vec![*x; dim],
            LearningRate::PerCoordinate(v) => {
                check_dim(dim, v.len())?;
                v.clone()
            }
        };
        if v.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidSpec(format!("learning rates must be positive, got {v:?}")));
        }
        Ok(v)
    }
}

/// Step-size multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 down to `floor` over the configured iterations.
    Cosine { floor: f64 },
}

impl LrSchedule {
    /// Multiplier at step `t` of a run of `total` steps.
    pub fn factor(&self, t: u64, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { floor } => {
                let u = (t as f64 / total.max(1) as f64).min(1.0);
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            }
        }
    }
}

fn default_snapshot_every() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub iterations: usize,
    pub learning_rate: LearningRate,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub adam: AdamSettings,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub mc_strategy: McStrategy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    /// Observed points used per iteration; all of them when unset.
    #[serde(default)]
    pub minibatch: Option<usize>,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidSpec("iterations must be at least 1".into()));
        }
        if self.snapshot_every == 0 {
            return Err(Error::InvalidSpec("snapshot_every must be at least 1".into()));
        }
        let AdamSettings { beta1, beta2, epsilon } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
            return Err(Error::InvalidSpec(format!("invalid Adam settings {:?}", self.adam)));
        }
        if self.mc_strategy != McStrategy::Joint {
            return Err(Error::InvalidSpec(
                "the flow pairs one nuisance draw with each particle; shared and nested strategies are only available to mc_estimate".into(),
            ));
        }
        if self.minibatch == Some(0) {
            return Err(Error::InvalidSpec("minibatch must be at least 1".into()));
        }
        if let LrSchedule::Cosine { floor } = self.lr_schedule {
            if !(floor > 0.0 && floor <= 1.0) {
                return Err(Error::InvalidSpec(format!("cosine floor {floor} must lie in (0, 1]")));
            }
        }
        if let LearningRate::PerCoordinate(v) = &self.learning_rate {
            LearningRate::PerCoordinate(v.clone()).resolve(v.len())?;
        } else {
            self.learning_rate.resolve(1)?;
        }
        Ok(())
    }
}

/// One row of the run log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Solver state between iterations.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub ensemble: ParticleEnsemble,
    pub first_moment: Array2<f64>,
    pub second_moment: Array2<f64>,
    pub iteration: u64,
    pub loss_trace: Vec<LossRecord>,
    /// Substream key of each particle. Defaults to the row index.
    keys: Vec<u32>,
}

impl FlowState {
    pub fn new(ensemble: ParticleEnsemble) -> Self {
        let keys = (0..ensemble.len() as u32).collect();
        Self::with_keys(ensemble, keys).expect("default keys match")
    }

    /// State whose particle `i` draws its nuisance from substream `keys[i]`.
    pub fn with_keys(ensemble: ParticleEnsemble, keys: Vec<u32>) -> Result<Self> {
        check_dim(ensemble.len(), keys.len())?;
        let shape = ensemble.particles().dim();
        Ok(Self {
            iteration: ensemble.generation(),
            ensemble,
            first_moment: Array2::zeros(shape),
            second_moment: Array2::zeros(shape),
            loss_trace: Vec::new(),
            keys,
        })
    }

    pub fn keys(&self) -> &[u32] {
        &self.keys
    }
}

/// Draws one nuisance realization per particle for the given iteration.
pub fn draw_nuisances(law: &NuisanceLaw, seed: u64, iteration: u64, keys: &[u32]) -> Vec<NuisanceDraw> {
    let family = StreamFamily::new(seed, Purpose::FlowNuisance);
    keys.par_iter()
        .map(|&k| {
            let mut rng = family.stream(iteration, k as u64);
            law.sample(&mut rng)
        })
        .collect()
}

/// Result of one direction evaluation.
#[derive(Debug, Clone)]
pub struct UpdateDirection {
    /// Row `i` is `dθ_i/dt = -∇T_ωᵢ(θ_i)ᵀ ∇_y δD/δρ_y(T_ωᵢ(θ_i))`.
    pub direction: Array2<f64>,
    /// `D(ρ_y, ρ_y^δ)` at the predicted cloud.
    pub loss: f64,
}

/// Pushes every particle with its own draw, evaluates the discrepancy
/// gradient on the predicted cloud and pulls it back to parameter space.
pub fn compute_update_direction(
    ensemble: &ParticleEnsemble,
    discrepancy: &PreparedDiscrepancy,
    operator: &Operator,
    draws: &[NuisanceDraw],
) -> Result<UpdateDirection> {
    let n = ensemble.len();
    check_dim(n, draws.len())?;
    check_dim(operator.param_dim(), ensemble.dim())?;
    let dy = operator.data_dim();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| operator.apply(ensemble.particle(i), &draws[i]))
        .collect::<Result<_>>()?;
    let mut flat = Vec::with_capacity(n * dy);
    rows.iter().for_each(|r| flat.extend_from_slice(r));
    drop(rows);
    let predicted = SampleCloud::new(Array2::from_shape_vec((n, dy), flat).expect("shape"))?;
    let eval = discrepancy.evaluate(&predicted)?;
    let dtheta = operator.param_dim();
    let pulled: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![0.0; dtheta];
            let cot = eval.gradients.row(i);
            operator.vjp_into(ensemble.particle(i), &draws[i].rotation, cot.as_slice().expect("row"), &mut out)?;
            out.iter_mut().for_each(|x| *x = -*x);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut direction = Array2::zeros((n, dtheta));
    for (i, r) in pulled.iter().enumerate() {
        direction.row_mut(i).assign(&ndarray::ArrayView1::from(r.as_slice()));
    }
    Ok(UpdateDirection { direction, loss: eval.loss })
}

fn check_direction(state: &FlowState, direction: ArrayView2<'_, f64>) -> Result<()> {
    if direction.dim() != state.ensemble.particles().dim() {
        return Err(Error::DimensionMismatch {
            expected: state.ensemble.len(),
            got: direction.nrows(),
        });
    }
    if direction.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("update direction at iteration {}", state.iteration)));
    }
    Ok(())
}

/// One Adam step treating `-direction` as the gradient.
pub fn adam_step(state: &mut FlowState, direction: ArrayView2<'_, f64>, learning_rate: &[f64], adam: &AdamSettings) -> Result<()> {
    check_direction(state, direction)?;
    check_dim(state.ensemble.dim(), learning_rate.len())?;
    let t = (state.iteration + 1) as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let mut particles = state.ensemble.particles().to_owned();
    let d = particles.ncols();
    for ((mut p, (mut m, mut v)), g) in particles
        .rows_mut()
        .into_iter()
        .zip(state.first_moment.rows_mut().into_iter().zip(state.second_moment.rows_mut()))
        .zip(direction.rows())
    {
        for k in 0..d {
            let g = -g[k];
            m[k] = adam.beta1 * m[k] + (1.0 - adam.beta1) * g;
            v[k] = adam.beta2 * v[k] + (1.0 - adam.beta2) * g * g;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= learning_rate[k] * mh / (vh.sqrt() + adam.epsilon);
        }
    }
    state.iteration += 1;
    state.ensemble = ParticleEnsemble::with_generation(particles, state.iteration)?;
    Ok(())
}

/// Forward Euler: `θ ← θ + η ⊙ direction`.
pub fn euler_step(state: &mut FlowState, direction: ArrayView2<'_, f64>, learning_rate: &[f64]) -> Result<()> {
    check_direction(state, direction)?;
    check_dim(state.ensemble.dim(), learning_rate.len())?;
    let mut particles = state.ensemble.particles().to_owned();
    for (mut p, g) in particles.rows_mut().into_iter().zip(direction.rows()) {
        for k in 0..p.len() {
            p[k] += learning_rate[k] * g[k];
        }
    }
    state.iteration += 1;
    state.ensemble = ParticleEnsemble::with_generation(particles, state.iteration)?;
    Ok(())
}

/// Everything the solver sees. Ground truth is optional and only used for
/// reporting metrics.
#[derive(Debug, Clone, Copy)]
pub struct FlowProblem<'a> {
    pub operator: &'a Operator,
    pub nuisance: NuisanceLaw,
    pub observed: &'a SampleCloud,
    pub discrepancy: DiscrepancySpec,
    pub truth: Option<ArrayView2<'a, f64>>,
}

/// One run-log row: loss every iteration, metrics at snapshot iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    pub metric_w2: Option<f64>,
    pub metric_energy: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub log: Vec<LogRow>,
    /// `(iteration, particles)` at every snapshot, including the start.
    pub snapshots: Vec<(u64, ParticleEnsemble)>,
}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub state: FlowState,
    pub trajectory: TrajectoryRecord,
    /// Set when the run stopped on a non-finite value; `state` is then the
    /// last good state.
    pub aborted: Option<String>,
    /// Set when the observer stopped the run early.
    pub stopped_early: bool,
}

/// Parameter-space W₂ and energy distance of `particles` to `truth`.
pub fn parameter_metrics(particles: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>, seed: u64) -> Result<(f64, f64)> {
    let w2 = w2_ensembles(particles, truth, seed)?;
    let ed = energy_distance(&SampleCloud::from_view(particles)?, &SampleCloud::from_view(truth)?)?;
    Ok((w2, ed))
}

/// Runs the flow for `config.iterations` iterations. The observer sees the
/// state before every iteration and may stop the run.
pub fn run_flow(
    problem: &FlowProblem<'_>,
    initial: FlowState,
    config: &FlowConfig,
    mut observer: impl FnMut(&FlowState) -> ControlFlow<()>,
) -> Result<FlowOutcome> {
    config.validate()?;
    problem.discrepancy.validate()?;
    let op = problem.operator;
    check_dim(op.param_dim(), initial.ensemble.dim())?;
    check_dim(op.data_dim(), problem.observed.dim())?;
    check_dim(op.data_dim(), problem.nuisance.data_dim)?;
    if let Some(t) = problem.truth {
        check_dim(op.param_dim(), t.ncols())?;
    }
    let lr = config.learning_rate.resolve(op.param_dim())?;
    let full = problem.discrepancy.prepare(problem.observed.clone())?;
    let minibatch = config.minibatch.filter(|&b| b < problem.observed.len());
    let batches = StreamFamily::new(config.seed, Purpose::Minibatch);
    let start = Instant::now();
    let mut state = initial;
    let mut record = TrajectoryRecord::default();
    let mut aborted = None;
    let mut stopped_early = false;
    let first = state.iteration;
    let end = first + config.iterations as u64;
    let metrics_of = |ensemble: &ParticleEnsemble| -> Result<(Option<f64>, Option<f64>)> {
        match problem.truth {
            Some(t) => {
                let (w2, ed) = parameter_metrics(ensemble.particles(), t, config.seed)?;
                Ok((Some(w2), Some(ed)))
            }
            None => Ok((None, None)),
        }
    };
    while state.iteration < end {
        if observer(&state).is_break() {
            stopped_early = true;
            break;
        }
        let n = state.iteration;
        let snapshot = (n - first).is_multiple_of(config.snapshot_every as u64);
        let draws = draw_nuisances(&problem.nuisance, config.seed, n, &state.keys);
        let batch;
        let prepared = match minibatch {
            None => &full,
            Some(b) => {
                let mut rng = batches.stream(n, 0);
                let mut rows = sample(&mut rng, problem.observed.len(), b).into_vec();
                rows.sort_unstable();
                batch = full.subset(&rows)?;
                &batch
            }
        };
        let factor = config.lr_schedule.factor(n - first, config.iterations);
        let lr_n: Vec<f64> = lr.iter().map(|v| v * factor).collect();
        let backup = (state.ensemble.clone(), state.first_moment.clone(), state.second_moment.clone());
        let step = compute_update_direction(&state.ensemble, prepared, op, &draws).and_then(|dir| {
            match config.optimizer {
                OptimizerKind::Adam => adam_step(&mut state, dir.direction.view(), &lr_n, &config.adam)?,
                OptimizerKind::Euler => euler_step(&mut state, dir.direction.view(), &lr_n)?,
            }
            Ok(dir.loss)
        });
        let loss = match step {
            Ok(v) => v,
            Err(e @ Error::NonFinite(_)) => {
                (state.ensemble, state.first_moment, state.second_moment) = backup;
                state.iteration = n;
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let previous = backup.0;
        let (w2, ed) = if snapshot {
            let m = metrics_of(&previous)?;
            record.snapshots.push((n, previous));
            m
        } else {
            (None, None)
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        record.log.push(LogRow {
            iteration: n,
            loss,
            metric_w2: w2,
            metric_energy: ed,
            wall_ms,
        });
        state.loss_trace.push(LossRecord { iteration: n, loss, wall_ms });
    }
    // Final state is always recorded.
    let last = state.iteration;
    if record.snapshots.last().map(|s| s.0) != Some(last) {
        let (w2, ed) = metrics_of(&state.ensemble)?;
        record.snapshots.push((last, state.ensemble.clone()));
        if aborted.is_none() {
            record.log.push(LogRow {
                iteration: last,
                loss: f64::NAN,
                metric_w2: w2,
                metric_energy: ed,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(FlowOutcome {
        state,
        trajectory: record,
        aborted,
        stopped_early,
    })
}
