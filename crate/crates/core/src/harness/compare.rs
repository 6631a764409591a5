//! Iterations and wall time each loss needs to reach a W₂ threshold.

use std::ops::ControlFlow;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{fmt, generate_observed, initial_ensemble, resolve_discrepancy, write_text, Problem};
use crate::error::{Error, Result};
use crate::flow::{run_flow, FlowConfig, FlowProblem, FlowState};
use crate::metrics::w2_ensembles;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub sigma: f64,
    pub loss: String,
    /// Iterations run before the threshold was met, or the budget.
    pub iterations: u64,
    /// False when the budget ran out first (censored cell).
    pub reached: bool,
    pub final_w2: f64,
    /// Solver time only; threshold checks are excluded.
    pub wall_seconds: f64,
    pub ms_per_iteration: f64,
}

/// Runs every (σ, loss) cell of the comparison and writes
/// `compare_losses.csv` into the output directory.
pub fn compare_losses(config: &ExperimentConfig) -> Result<Vec<CompareRow>> {
    config.validate()?;
    let cmp = config
        .compare
        .as_ref()
        .ok_or_else(|| Error::Config("the config has no `compare` section".into()))?;
    let dir = config.prepare_output()?;
    let mut rows = Vec::new();
    for &sigma in &cmp.sigmas {
        let mut cell_cfg = config.clone();
        cell_cfg.set_sigma(sigma);
        let problem = Problem::new(&cell_cfg)?;
        let data = generate_observed(&cell_cfg)?;
        let truth = data.truth.particles();
        for loss in &cmp.losses {
            let discrepancy = resolve_discrepancy(*loss, &data.observed)?;
            let flow_problem = FlowProblem {
                operator: &problem.operator,
                nuisance: problem.nuisance,
                observed: &data.observed,
                discrepancy,
                truth: None,
            };
            let flow = FlowConfig {
                iterations: cmp.budget,
                snapshot_every: cmp.budget,
                ..cell_cfg.flow.clone()
            };
            let initial = initial_ensemble(&cell_cfg)?;
            let mut checking = Duration::ZERO;
            let mut last_w2 = f64::NAN;
            let mut reached_at = None;
            let mut check = |state: &FlowState| -> Result<bool> {
                let t = Instant::now();
                last_w2 = w2_ensembles(state.ensemble.particles(), truth, cell_cfg.seed)?;
                checking += t.elapsed();
                Ok(last_w2 < cmp.threshold)
            };
            let mut failure = None;
            let start = Instant::now();
            let outcome = run_flow(&flow_problem, FlowState::new(initial), &flow, |state| {
                if state.iteration % cmp.check_every as u64 != 0 {
                    return ControlFlow::Continue(());
                }
                match check(state) {
                    Ok(true) => {
                        reached_at = Some(state.iteration);
                        ControlFlow::Break(())
                    }
                    Ok(false) => ControlFlow::Continue(()),
                    Err(e) => {
                        failure = Some(e);
                        ControlFlow::Break(())
                    }
                }
            })?;
            let total = start.elapsed();
            if let Some(e) = failure {
                return Err(e);
            }
            if let Some(reason) = outcome.aborted {
                return Err(Error::NonFinite(format!("comparison cell σ={sigma} {}: {reason}", loss.name())));
            }
            if reached_at.is_none() && check(&outcome.state)? {
                reached_at = Some(outcome.state.iteration);
            }
            let iterations = outcome.state.iteration;
            let solver = total.saturating_sub(checking).as_secs_f64();
            rows.push(CompareRow {
                sigma,
                loss: loss.name().to_string(),
                iterations,
                reached: reached_at.is_some(),
                final_w2: last_w2,
                wall_seconds: solver,
                ms_per_iteration: if iterations > 0 { solver * 1e3 / iterations as f64 } else { f64::NAN },
            });
        }
    }
    write_compare_csv(&dir.join("compare_losses.csv"), &rows)?;
    Ok(rows)
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut out = String::from("sigma,loss,iterations,reached,final_w2,wall_seconds,ms_per_iteration\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt(r.sigma),
            r.loss,
            r.iterations,
            r.reached,
            fmt(r.final_w2),
            fmt(r.wall_seconds),
            fmt(r.ms_per_iteration)
        ));
    }
    write_text(path, &out)
}
