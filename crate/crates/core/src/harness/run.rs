//! Data generation, flow runs and artifact output.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentKind};
use crate::discrepancy::{energy_distance, energy_distance_sq, DiscrepancySpec, SampleCloud};
use crate::ensemble::{kde_curve_1d, silverman_bandwidth, write_matrix_csv, ParticleEnsemble};
use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowOutcome, FlowProblem, FlowState, LogRow};
use crate::forward::{write_image_stack, NuisanceLaw, Operator, RotationLaw};
use crate::mapdto::{optimize_map, MapObjectiveSpec};
use crate::metrics::{pca_fit_project, w2_1d, w2_ensembles, write_projection_csv};
use crate::rng::{Purpose, StreamFamily};

/// Observed data together with the latents that produced them.
#[derive(Debug, Clone)]
pub struct ObservedData {
    pub observed: SampleCloud,
    /// Kept apart from everything the solver sees.
    pub truth: ParticleEnsemble,
}

/// Everything a run needs, built once from a config.
pub struct Problem {
    pub operator: Operator,
    pub nuisance: NuisanceLaw,
}

impl Problem {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let operator = config.operator.build(config.truth.dim())?;
        let nuisance = NuisanceLaw::new(config.rotation, config.sigma(), operator.data_dim())?;
        Ok(Self { operator, nuisance })
    }
}

/// Pushes every row of `theta` through the operator with a nuisance draw from
/// `family`'s substream `(0, i)`.
pub fn push_forward(theta: ArrayView2<'_, f64>, op: &Operator, law: &NuisanceLaw, family: &StreamFamily) -> Result<SampleCloud> {
    let d = op.data_dim();
    let rows: Vec<Vec<f64>> = (0..theta.nrows())
        .into_par_iter()
        .map(|i| {
            let draw = law.sample(&mut family.stream(0, i as u64));
            op.apply(theta.row(i).as_slice().expect("standard layout"), &draw)
        })
        .collect::<Result<_>>()?;
    let mut flat = Vec::with_capacity(rows.len() * d);
    rows.iter().for_each(|r| flat.extend_from_slice(r));
    SampleCloud::new(Array2::from_shape_vec((rows.len(), d), flat).expect("shape"))
}

/// Draws `observed_count` latents from the truth and pushes each through the
/// operator with a fresh nuisance draw.
pub fn generate_observed(config: &ExperimentConfig) -> Result<ObservedData> {
    let problem = Problem::new(config)?;
    generate_with(config, &problem)
}

fn generate_with(config: &ExperimentConfig, problem: &Problem) -> Result<ObservedData> {
    let truth = config.truth.sample(config.observed_count, &StreamFamily::new(config.seed, Purpose::Truth))?;
    let observed = push_forward(
        truth.particles(),
        &problem.operator,
        &problem.nuisance,
        &StreamFamily::new(config.seed, Purpose::ObservedNuisance),
    )?;
    Ok(ObservedData { observed, truth })
}

/// Initial ensemble from the configured law.
pub fn initial_ensemble(config: &ExperimentConfig) -> Result<ParticleEnsemble> {
    config.initial.sample(config.particles, &StreamFamily::new(config.seed, Purpose::Initial))
}

/// Fills in an unset KL bandwidth with Silverman's rule on the observed
/// data (averaged over coordinates in more than one dimension).
pub fn resolve_discrepancy(spec: DiscrepancySpec, observed: &SampleCloud) -> Result<DiscrepancySpec> {
    match spec {
        DiscrepancySpec::Kl { bandwidth: None } => {
            let d = observed.dim();
            let pts = observed.points();
            let mut total = 0.0;
            for j in 0..d {
                total += silverman_bandwidth(&pts.column(j).to_vec())?;
            }
            Ok(DiscrepancySpec::Kl {
                bandwidth: Some(total / d as f64),
            })
        }
        other => Ok(other),
    }
}

/// Final metrics of a run; distances are to the ground-truth latents or, for
/// image-space values, to the observed cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub parameter_w2_initial: f64,
    pub parameter_w2_final: f64,
    pub parameter_energy_distance_initial: f64,
    pub parameter_energy_distance_final: f64,
    /// Squared energy distances, the form `D` itself takes.
    pub parameter_energy_distance_sq_initial: f64,
    pub parameter_energy_distance_sq_final: f64,
    pub data_energy_distance_initial: f64,
    pub data_energy_distance_final: f64,
    pub data_energy_distance_sq_initial: f64,
    pub data_energy_distance_sq_final: f64,
    pub per_marginal_w2: Vec<f64>,
    pub final_loss: Option<f64>,
}

impl RunMetrics {
    pub fn is_finite(&self) -> bool {
        [
            self.parameter_w2_initial,
            self.parameter_w2_final,
            self.parameter_energy_distance_initial,
            self.parameter_energy_distance_final,
            self.parameter_energy_distance_sq_initial,
            self.parameter_energy_distance_sq_final,
            self.data_energy_distance_initial,
            self.data_energy_distance_final,
            self.data_energy_distance_sq_initial,
            self.data_energy_distance_sq_final,
        ]
        .iter()
        .chain(&self.per_marginal_w2)
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    pub paper_parity: bool,
    pub aborted: bool,
    #[serde(default)]
    pub abort_reason: Option<String>,
    pub iterations: u64,
    pub wall_seconds: f64,
    pub particles: usize,
    pub observed_count: usize,
    pub discrepancy: DiscrepancySpec,
    /// Missing only for aborted runs whose last state cannot be scored.
    pub metrics: Option<RunMetrics>,
    pub non_paper_parameters: Vec<String>,
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|x| !x.is_nan()).map(fmt).unwrap_or_default()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `iteration,loss,w2,energy_distance`; unset values are empty. Wall-clock
/// times go to a separate `iteration,wall_ms` file so that the log itself is
/// reproducible byte for byte.
pub fn write_run_log(log_path: &Path, timing_path: &Path, log: &[LogRow]) -> Result<()> {
    let mut out = String::from("iteration,loss,w2,energy_distance\n");
    let mut timing = String::from("iteration,wall_ms\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            fmt_opt(Some(r.loss)),
            fmt_opt(r.metric_w2),
            fmt_opt(r.metric_energy)
        ));
        timing.push_str(&format!("{},{}\n", r.iteration, fmt(r.wall_ms)));
    }
    write_text(log_path, &out)?;
    write_text(timing_path, &timing)
}

fn write_cloud(path: &Path, cloud: ArrayView2<'_, f64>, op: &Operator) -> Result<()> {
    match op {
        Operator::Nanocluster(n) => write_image_stack(path, cloud, n.spec()),
        Operator::ToyProtein(t) => write_image_stack(path, cloud, t.spec()),
        Operator::AffineIdentity(_) => write_matrix_csv(path, cloud, None),
    }
}

fn cloud_file(op: &Operator, stem: &str) -> String {
    match op {
        Operator::AffineIdentity(_) => format!("{stem}.csv"),
        _ => format!("{stem}.f32"),
    }
}

fn per_marginal_w2(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    (0..a.ncols()).map(|j| w2_1d(&a.column(j).to_vec(), &b.column(j).to_vec())).collect()
}

/// Runs the experiment the config names and writes its artifacts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    match config.experiment {
        ExperimentKind::Onedim | ExperimentKind::Nanocluster | ExperimentKind::Toyprotein => run_flow_experiment(config),
        ExperimentKind::Mapdto => run_map_experiment(config),
        ExperimentKind::Diagnostics => {
            super::diagnostics::run_diagnostics(config)?;
            run_flow_experiment(config)
        }
    }
}

fn write_common(config: &ExperimentConfig, dir: &Path, problem: &Problem, data: &ObservedData, initial: &ParticleEnsemble) -> Result<()> {
    write_text(&dir.join("config.json"), &(config.to_json() + "\n"))?;
    write_cloud(&dir.join(cloud_file(&problem.operator, "observed")), data.observed.points(), &problem.operator)?;
    let gt = dir.join("ground_truth");
    make_dir(&gt)?;
    data.truth.write_csv(&gt.join("latents.csv"))?;
    if let Operator::ToyProtein(t) = &problem.operator {
        t.model().write_csv(&gt.join("model"))?;
    }
    initial.write_csv(&dir.join("initial_particles.csv"))
}

fn run_flow_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let dir = config.prepare_output()?;
    let problem = Problem::new(config)?;
    let data = generate_with(config, &problem)?;
    let initial = initial_ensemble(config)?;
    write_common(config, &dir, &problem, &data, &initial)?;
    let discrepancy = resolve_discrepancy(config.discrepancy, &data.observed)?;
    let flow_problem = FlowProblem {
        operator: &problem.operator,
        nuisance: problem.nuisance,
        observed: &data.observed,
        discrepancy,
        truth: Some(data.truth.particles()),
    };
    let outcome = run_flow(&flow_problem, FlowState::new(initial.clone()), &config.flow, |_| ControlFlow::Continue(()))?;
    let summary = finish_run(config, &dir, &problem, &data, &initial, discrepancy, &outcome, started)?;
    Ok(summary)
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    config: &ExperimentConfig,
    dir: &Path,
    problem: &Problem,
    data: &ObservedData,
    initial: &ParticleEnsemble,
    discrepancy: DiscrepancySpec,
    outcome: &FlowOutcome,
    started: Instant,
) -> Result<RunSummary> {
    let final_ens = &outcome.state.ensemble;
    final_ens.write_csv(&dir.join("final_particles.csv"))?;
    let snaps = dir.join("snapshots");
    make_dir(&snaps)?;
    for (it, ens) in &outcome.trajectory.snapshots {
        ens.write_csv(&snaps.join(format!("iter_{it:06}.csv")))?;
    }
    write_run_log(&dir.join("run_log.csv"), &dir.join("timing.csv"), &outcome.trajectory.log)?;
    let metrics = compute_metrics(config, problem, data, initial, final_ens, outcome);
    let plots = write_plots(config, &dir.join("plots"), problem, data, initial, final_ens);
    // An aborted run still gets its summary; whatever cannot be scored is left out.
    let metrics = match (outcome.aborted.is_some(), metrics) {
        (_, Ok(m)) if m.is_finite() => Some(m),
        (true, _) => None,
        (false, Ok(_)) => return Err(Error::NonFinite("run metrics".into())),
        (false, Err(e)) => return Err(e),
    };
    if outcome.aborted.is_none() {
        plots?;
    }
    let summary = RunSummary {
        experiment: config.experiment,
        config_hash: config.hash(),
        seed: config.seed,
        paper_parity: config.paper_parity,
        aborted: outcome.aborted.is_some(),
        abort_reason: outcome.aborted.clone(),
        iterations: outcome.state.iteration,
        wall_seconds: started.elapsed().as_secs_f64(),
        particles: config.particles,
        observed_count: config.observed_count,
        discrepancy,
        metrics,
        non_paper_parameters: config.non_paper_parameters(),
    };
    write_summary(dir, &summary)?;
    Ok(summary)
}

pub(crate) fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join("summary.json"), &(text + "\n"))
}

/// Pushes with draws from the diagnostics streams so that initial and final
/// image clouds see the same nuisance realizations.
fn data_cloud(problem: &Problem, ensemble: &ParticleEnsemble, seed: u64) -> Result<SampleCloud> {
    push_forward(ensemble.particles(), &problem.operator, &problem.nuisance, &StreamFamily::new(seed, Purpose::Diagnostics))
}

fn compute_metrics(
    config: &ExperimentConfig,
    problem: &Problem,
    data: &ObservedData,
    initial: &ParticleEnsemble,
    final_ens: &ParticleEnsemble,
    outcome: &FlowOutcome,
) -> Result<RunMetrics> {
    let truth = data.truth.particles();
    let tc = SampleCloud::from_view(truth)?;
    let ic = SampleCloud::from_view(initial.particles())?;
    let fc = SampleCloud::from_view(final_ens.particles())?;
    let di = data_cloud(problem, initial, config.seed)?;
    let df = data_cloud(problem, final_ens, config.seed)?;
    let final_loss = outcome.trajectory.log.iter().rev().map(|r| r.loss).find(|l| l.is_finite());
    Ok(RunMetrics {
        parameter_w2_initial: w2_ensembles(initial.particles(), truth, config.seed)?,
        parameter_w2_final: w2_ensembles(final_ens.particles(), truth, config.seed)?,
        parameter_energy_distance_initial: energy_distance(&ic, &tc)?,
        parameter_energy_distance_final: energy_distance(&fc, &tc)?,
        parameter_energy_distance_sq_initial: energy_distance_sq(&ic, &tc)?,
        parameter_energy_distance_sq_final: energy_distance_sq(&fc, &tc)?,
        data_energy_distance_initial: energy_distance(&di, &data.observed)?,
        data_energy_distance_final: energy_distance(&df, &data.observed)?,
        data_energy_distance_sq_initial: energy_distance_sq(&di, &data.observed)?,
        data_energy_distance_sq_final: energy_distance_sq(&df, &data.observed)?,
        per_marginal_w2: per_marginal_w2(final_ens.particles(), truth)?,
        final_loss,
    })
}

/// Evenly spaced grid covering all clouds plus a margin.
fn grid_over(values: &[&[f64]], points: usize, margin: f64) -> Vec<f64> {
    let lo = values.iter().flat_map(|v| v.iter()).copied().fold(f64::INFINITY, f64::min) - margin;
    let hi = values.iter().flat_map(|v| v.iter()).copied().fold(f64::NEG_INFINITY, f64::max) + margin;
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// `x,<label>...` KDE curves of 1D samples on a common grid, each with its
/// own Silverman bandwidth.
pub fn write_kde_csv(path: &Path, axis: &str, clouds: &[(&str, Vec<f64>)], points: usize) -> Result<()> {
    let refs: Vec<&[f64]> = clouds.iter().map(|c| c.1.as_slice()).collect();
    let widest = clouds
        .iter()
        .map(|c| silverman_bandwidth(&c.1).map(f64::sqrt))
        .collect::<Result<Vec<_>>>()?;
    let margin = 3.0 * widest.iter().copied().fold(0.0, f64::max);
    let grid = grid_over(&refs, points, margin);
    let curves = clouds
        .iter()
        .map(|(_, v)| kde_curve_1d(ndarray::ArrayView1::from(v.as_slice()), silverman_bandwidth(v)?, &grid))
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from(axis);
    clouds.iter().for_each(|c| {
        out.push(',');
        out.push_str(c.0);
    });
    out.push('\n');
    for (i, x) in grid.iter().enumerate() {
        out.push_str(&fmt(*x));
        for c in &curves {
            out.push(',');
            out.push_str(&fmt(c[i]));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Plot data: KDE curves in 1D, scatter in 2D, per-mode marginal KDEs and
/// a fixed-view image PCA above that.
fn write_plots(config: &ExperimentConfig, dir: &Path, problem: &Problem, data: &ObservedData, initial: &ParticleEnsemble, final_ens: &ParticleEnsemble) -> Result<()> {
    make_dir(dir)?;
    let points = config.plots.grid_points;
    let d = initial.dim();
    let truth = &data.truth;
    if d == 1 {
        write_kde_csv(
            &dir.join("parameter_kde.csv"),
            "theta",
            &[("initial", initial.column(0)), ("final", final_ens.column(0)), ("truth", truth.column(0))],
            points,
        )?;
        if problem.operator.data_dim() == 1 {
            let di = data_cloud(problem, initial, config.seed)?;
            let df = data_cloud(problem, final_ens, config.seed)?;
            write_kde_csv(
                &dir.join("data_kde.csv"),
                "y",
                &[
                    ("initial", di.values_1d()?.to_vec()),
                    ("final", df.values_1d()?.to_vec()),
                    ("observed", data.observed.values_1d()?.to_vec()),
                ],
                points,
            )?;
        }
    } else if d == 2 {
        let mut out = String::from("theta1,theta2,cloud_label\n");
        for (label, ens) in [("initial", initial), ("final", final_ens), ("truth", truth)] {
            for row in ens.particles().rows() {
                out.push_str(&format!("{},{},{label}\n", fmt(row[0]), fmt(row[1])));
            }
        }
        write_text(&dir.join("parameter_scatter.csv"), &out)?;
    } else {
        for j in 0..d {
            write_kde_csv(
                &dir.join(format!("mode{}_kde.csv", j + 1)),
                "theta",
                &[("initial", initial.column(j)), ("final", final_ens.column(j)), ("truth", truth.column(j))],
                points,
            )?;
        }
    }
    if problem.operator.uses_rotation() {
        write_pca(config, dir, problem, data, initial, final_ens)?;
    }
    Ok(())
}

/// Noisy renders of truth, initial and final latents from one fixed viewing
/// direction, projected on the principal plane of the truth renders.
fn write_pca(config: &ExperimentConfig, dir: &Path, problem: &Problem, data: &ObservedData, initial: &ParticleEnsemble, final_ens: &ParticleEnsemble) -> Result<()> {
    let law = NuisanceLaw::new(RotationLaw::Fixed(config.plots.pca_rotation.normalized()), problem.nuisance.noise_sigma, problem.nuisance.data_dim)?;
    let take = |e: ArrayView2<'_, f64>| e.slice(s![0..config.plots.pca_count.min(e.nrows()), ..]).to_owned();
    let render = |theta: Array2<f64>, slot: u64| -> Result<SampleCloud> {
        let family = StreamFamily::new(config.seed ^ slot.wrapping_mul(0x9e37_79b9_7f4a_7c15), Purpose::Rendering);
        push_forward(theta.view(), &problem.operator, &law, &family)
    };
    let observed = render(take(data.truth.particles()), 1)?;
    let init = render(take(initial.particles()), 2)?;
    let fin = render(take(final_ens.particles()), 3)?;
    let (_, proj) = pca_fit_project(observed.points(), &[init.points(), fin.points()])?;
    write_projection_csv(
        &dir.join("image_pca.csv"),
        &[("observed", proj[0].view()), ("initial", proj[1].view()), ("final", proj[2].view())],
    )
}

/// A single discretize-then-optimize fit with `K` particles.
fn run_map_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let m = config.mapdto.as_ref().expect("validated");
    let dir = config.prepare_output()?;
    let problem = Problem::new(config)?;
    let data = generate_with(config, &problem)?;
    let pool = initial_ensemble(config)?;
    if m.k > pool.len() {
        return Err(Error::Config(format!("mapdto.k = {} exceeds particles = {}", m.k, pool.len())));
    }
    let init = ParticleEnsemble::new(pool.particles().slice(s![0..m.k, ..]).to_owned())?;
    write_common(config, &dir, &problem, &data, &init)?;
    let spec = MapObjectiveSpec::with_defaults(
        &problem.operator,
        m.k,
        config.observed_count,
        config.sigma().max(f64::MIN_POSITIVE),
        m.lambda,
        m.prior,
        m.rotation_nodes,
        config.seed,
    )?;
    let fit = optimize_map(init.particles().to_owned(), &data.observed, &problem.operator, &spec, &m.optimizer)?;
    let fin = ParticleEnsemble::new(fit.particles.clone())?;
    let log: Vec<LogRow> = fit
        .trace
        .iter()
        .enumerate()
        .map(|(i, l)| LogRow {
            iteration: i as u64,
            loss: *l,
            metric_w2: None,
            metric_energy: None,
            wall_ms: 0.0,
        })
        .collect();
    let outcome = FlowOutcome {
        state: FlowState::new(fin.clone()),
        trajectory: crate::flow::TrajectoryRecord {
            log,
            snapshots: vec![(0, init.clone()), (m.optimizer.iterations as u64, fin)],
        },
        aborted: None,
        stopped_early: false,
    };
    let mut summary = finish_run(config, &dir, &problem, &data, &init, config.discrepancy, &outcome, started)?;
    summary.iterations = m.optimizer.iterations as u64;
    summary.particles = m.k;
    write_summary(&dir, &summary)?;
    Ok(summary)
}
