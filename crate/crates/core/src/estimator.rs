//! Two-stage maximum-likelihood estimation.
//!
//! Stage 1 fits the dynamics parameters to the observation term with a
//! quasi-Newton method; stage 2 freezes the filtered beliefs and climbs the
//! choice pseudo-likelihood in the reward parameters with the soft policy
//! gradient.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bellman::{BeliefDynamics, QTable, DEFAULT_RESOLUTION, DEFAULT_TOL};
use crate::engine::{mileage_family, strip_priors};
use crate::error::{Error, Result};
use crate::family::ModelFamily;
use crate::grid::BeliefGrid;
use crate::likelihood::{
    filter_all, log_likelihood_with, observation_term, pseudo_log_likelihood, pseudo_score, smoothness_constants,
    ChoiceData, FilteredPath, GradOperator, LikelihoodTerms, SmoothnessConstants, DEFAULT_GRAD_TOL,
};
use crate::model::History;

/// Sufficient decrease constant of the backtracking line searches.
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// Armijo backtracking. The first trial step is `min(1e-2, 1/L)`; later
    /// trials use the Barzilai-Borwein step of the last two iterates when the
    /// objective curved downward between them, and double the last accepted
    /// step otherwise.
    Backtracking,
    /// Constant step `ρ`.
    Fixed { rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub max_iter: usize,
    /// Stop once the sup-norm of the per-transition gradient is below this.
    pub grad_tol: f64,
    /// Relative central-difference step.
    pub fd_step: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            max_iter: 300,
            grad_tol: 1e-7,
            fd_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub resolution: usize,
    pub bellman_tol: f64,
    pub grad_q_tol: f64,
    /// Stage 2 stops once `‖∇ℓ̂‖ / (number of choices) < epsilon`.
    pub epsilon: f64,
    pub step: StepRule,
    pub max_outer: usize,
    /// Cap on sweeps of each inner fixed-point solve.
    pub max_sweeps: usize,
    /// Reward parameters to start from; zeros when absent.
    pub theta1_init: Option<Vec<f64>>,
    /// Unconstrained dynamics parameters to start from; the family default
    /// when absent.
    pub theta2_init: Option<Vec<f64>>,
    pub stage1: Stage1Config,
    /// Leading periods of every history excluded from both objectives.
    pub burn_in: usize,
    /// Recorded for provenance; the estimator itself draws no randomness.
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            resolution: DEFAULT_RESOLUTION,
            bellman_tol: DEFAULT_TOL,
            grad_q_tol: DEFAULT_GRAD_TOL,
            epsilon: 1e-3,
            step: StepRule::Backtracking,
            max_outer: 500,
            max_sweeps: 100_000,
            theta1_init: None,
            theta2_init: None,
            stage1: Stage1Config::default(),
            burn_in: 0,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        if !(self.bellman_tol > 0.0) || !(self.grad_q_tol > 0.0) {
            return bad("solver tolerances must be positive".into());
        }
        if let StepRule::Fixed { rho } = self.step {
            if !(rho > 0.0) || !rho.is_finite() {
                return bad(format!("step size {rho} must be positive"));
            }
        }
        if !(self.stage1.fd_step > 0.0) || !(self.stage1.grad_tol > 0.0) {
            return bad("stage-1 step and tolerance must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage1Report {
    /// Observation log-likelihood per iteration.
    pub objective_trace: Vec<f64>,
    /// Sup-norm of the per-transition gradient per iteration.
    pub grad_norm_trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage2Record {
    pub theta1: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    /// Step used to leave this iterate; absent on the last record.
    pub step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage2Report {
    pub trace: Vec<Stage2Record>,
    pub iterations: usize,
    pub converged: bool,
    pub step_rule: StepRule,
    pub smoothness: SmoothnessConstants,
    pub n_choices: usize,
    pub bellman_sweeps: usize,
    pub gradient_sweeps: usize,
    pub warnings: Vec<String>,
}

impl Stage2Report {
    pub fn theta1(&self) -> &[f64] {
        &self.trace.last().expect("trace holds the starting point").theta1
    }

    /// `(min_k ‖∇ℓ̂_k‖², bound)` for a fixed-step run with `ρ < 2/L`, where
    /// the bound is `(ℓ̂_best − ℓ̂_0) / (K ρ (1 − ρL/2))`.
    pub fn descent_bound(&self) -> Option<(f64, f64)> {
        let StepRule::Fixed { rho } = self.step_rule else {
            return None;
        };
        let l = self.smoothness.l;
        let k = self.trace.len() - 1;
        if k == 0 || rho * l >= 2.0 {
            return None;
        }
        let first = self.trace[0].objective;
        let best = self.trace.iter().map(|r| r.objective).fold(f64::NEG_INFINITY, f64::max);
        let min_sq = self.trace[..k].iter().map(|r| r.grad_norm * r.grad_norm).fold(f64::INFINITY, f64::min);
        Some((min_sq, (best - first) / (k as f64 * rho * (1.0 - rho * l / 2.0))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub theta1: Vec<f64>,
    pub theta1_names: Vec<String>,
    pub theta2: Vec<f64>,
    pub theta2_names: Vec<String>,
    pub theta2_unconstrained: Vec<f64>,
    pub likelihood: LikelihoodTerms,
    pub stage1: Stage1Report,
    pub stage2: Stage2Report,
    pub n_histories: usize,
    pub n_transitions: usize,
    pub converged: bool,
    pub runtime_seconds: f64,
    pub config: EstimatorConfig,
}

/// Outcome of a quasi-Newton minimization.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub value_trace: Vec<f64>,
    pub grad_trace: Vec<f64>,
}

fn central_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], rel: f64, evals: &mut usize) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = rel * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            *evals += 2;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// BFGS with central finite-difference gradients and Armijo backtracking.
pub fn bfgs_minimize(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], config: &Stage1Config) -> Result<Minimum> {
    let n = x0.len();
    let mut evaluations = 1;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut g = central_gradient(f, &x, config.fd_step, &mut evaluations);
    let mut h = identity(n);
    let mut value_trace = vec![fx];
    let mut grad_trace = vec![sup_norm(&g)];
    let mut iterations = 0;
    let mut converged = sup_norm(&g) <= config.grad_tol;
    while !converged && iterations < config.max_iter {
        iterations += 1;
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i], &g)).collect();
        let mut slope = dot(&d, &g);
        if slope >= 0.0 {
            h = identity(n);
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let ft = f(&trial);
            evaluations += 1;
            if ft.is_finite() && ft <= fx + ARMIJO * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // no decrease along a descent direction: at the resolution of
            // the finite differences
            break;
        };
        let g_new = central_gradient(f, &x_new, config.fd_step, &mut evaluations);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if iterations == 1 {
                let scale = sy / dot(&y, &y);
                h.iter_mut().enumerate().for_each(|(i, row)| {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[i] = scale;
                });
            }
            bfgs_update(&mut h, &s, &y, sy);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        value_trace.push(fx);
        grad_trace.push(sup_norm(&g));
        converged = sup_norm(&g) <= config.grad_tol;
    }
    Ok(Minimum {
        grad_norm: sup_norm(&g),
        x,
        value: fx,
        iterations,
        evaluations,
        converged,
        value_trace,
        grad_trace,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            row
        })
        .collect()
}

/// Inverse-Hessian update `H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

fn transitions(dataset: &[History], burn_in: usize) -> usize {
    dataset.iter().map(|h| h.len().saturating_sub(burn_in)).sum()
}

/// Maximizes the observation term over the unconstrained dynamics
/// parameters and returns them with the report and the filtered paths.
pub fn stage1_fit_theta2(
    family: &ModelFamily,
    dataset: &[History],
    config: &EstimatorConfig,
) -> Result<(Vec<f64>, Stage1Report, Vec<FilteredPath>)> {
    let init = config.theta2_init.clone().unwrap_or_else(|| family.dynamics.initial_params());
    if init.len() != family.dynamics.n_params() {
        return Err(Error::InvalidParams(format!(
            "theta2_init has {} entries, the family expects {}",
            init.len(),
            family.dynamics.n_params()
        )));
    }
    let scale = transitions(dataset, config.burn_in).max(1) as f64;
    let objective = |u: &[f64]| match family.kernel_model(u) {
        Ok(model) => -observation_term(&model, dataset, config.burn_in) / scale,
        Err(_) => f64::INFINITY,
    };
    let min = if init.is_empty() {
        Minimum {
            x: init,
            value: objective(&[]),
            grad_norm: 0.0,
            iterations: 0,
            evaluations: 1,
            converged: true,
            value_trace: vec![],
            grad_trace: vec![],
        }
    } else {
        bfgs_minimize(&objective, &init, &config.stage1)?
    };
    log::info!(
        "stage 1: {} iterations, observation term {:.6}, gradient {:.3e}",
        min.iterations,
        -min.value * scale,
        min.grad_norm
    );
    let paths = filter_all(&family.kernel_model(&min.x)?, dataset)?;
    let report = Stage1Report {
        objective_trace: min.value_trace.iter().map(|v| -v * scale).collect(),
        grad_norm_trace: min.grad_trace.clone(),
        iterations: min.iterations,
        evaluations: min.evaluations,
        converged: min.converged,
    };
    Ok((min.x, report, paths))
}

/// Reward-parameter search state: node rewards are affine in `θ1`.
struct RewardProblem<'a> {
    dynamics: BeliefDynamics,
    grid: Arc<BeliefGrid>,
    features: Vec<f64>,
    offset: Vec<f64>,
    data: ChoiceData,
    n_params: usize,
    config: &'a EstimatorConfig,
    bellman_sweeps: usize,
    gradient_sweeps: usize,
}

impl RewardProblem<'_> {
    fn rewards(&self, theta1: &[f64]) -> Vec<f64> {
        let p = self.n_params;
        self.offset
            .iter()
            .enumerate()
            .map(|(c, off)| off + dot(&self.features[c * p..(c + 1) * p], theta1))
            .collect()
    }

    fn solve(&mut self, theta1: &[f64], warm: Option<&[f64]>) -> Result<QTable> {
        let rewards = self.rewards(theta1);
        let (values, sweeps, residual) = self.dynamics.solve(&rewards, warm, self.config.bellman_tol, self.config.max_sweeps)?;
        self.bellman_sweeps += sweeps;
        let mut q = QTable::from_values(self.grid.clone(), self.dynamics.n_obs(), self.dynamics.n_actions(), values)?;
        q.set_diagnostics(sweeps, residual);
        Ok(q)
    }

    fn objective(&self, q: &QTable) -> f64 {
        pseudo_log_likelihood(q, &self.data)
    }

    fn score(&mut self, q: &QTable, warm: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let op = GradOperator::new(&self.dynamics, q.values());
        let gradq = op.solve(&self.features, self.n_params, warm, self.config.grad_q_tol, self.config.max_sweeps)?;
        self.gradient_sweeps += gradq.iterations();
        let score = pseudo_score(q, &gradq, &self.data);
        Ok((score, gradq.values().to_vec()))
    }
}

/// Soft policy-gradient ascent on the pseudo-likelihood with beliefs frozen
/// at the stage-1 dynamics. Returns the report and the final solved table.
pub fn stage2_policy_gradient(
    family: &ModelFamily,
    theta2: &[f64],
    dataset: &[History],
    paths: &[FilteredPath],
    config: &EstimatorConfig,
) -> Result<(Stage2Report, QTable)> {
    let p = family.reward.n_params();
    let theta0 = config.theta1_init.clone().unwrap_or_else(|| vec![0.0; p]);
    if theta0.len() != p {
        return Err(Error::InvalidParams(format!("theta1_init has {} entries, expected {p}", theta0.len())));
    }
    let kernel_model = family.kernel_model(theta2)?;
    let grid = Arc::new(BeliefGrid::new(family.n_states(), config.resolution)?);
    let dynamics = BeliefDynamics::new(&kernel_model, grid.clone())?;
    let features = family.reward.node_features(&dynamics);
    let offset = dynamics.node_rewards(&kernel_model);
    let data = ChoiceData::new(dataset, paths, &grid, config.burn_in);
    let n_choices = data.len();
    let smoothness = smoothness_constants(family.reward.gradient_bound(), 0.0, family.discount, n_choices, 1);

    let mut warnings = Vec::new();
    if let StepRule::Fixed { rho } = config.step {
        if rho * smoothness.l >= 2.0 {
            let msg = format!("step {rho:e} is not below 2/L = {:e}; ascent is not guaranteed", 2.0 / smoothness.l);
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    let mut problem = RewardProblem {
        dynamics,
        grid,
        features,
        offset,
        data,
        n_params: p,
        config,
        bellman_sweeps: 0,
        gradient_sweeps: 0,
    };

    let mut theta = theta0;
    let mut q = problem.solve(&theta, None)?;
    let mut objective = problem.objective(&q);
    if !objective.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0 });
    }
    let mut grad_warm: Option<Vec<f64>> = None;
    let mut trial_step = match config.step {
        StepRule::Backtracking => 1e-2_f64.min(1.0 / smoothness.l),
        StepRule::Fixed { rho } => rho,
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let scale = n_choices.max(1) as f64;
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;

    for k in 0..=config.max_outer {
        let (grad, gvals) = problem.score(&q, grad_warm.as_deref())?;
        grad_warm = Some(gvals);
        let grad_norm = dot(&grad, &grad).sqrt();
        log::debug!("stage 2 iteration {k}: objective {objective:.6}, |grad| {grad_norm:.3e}, theta1 {theta:?}");
        trace.push(Stage2Record {
            theta1: theta.clone(),
            objective,
            grad_norm,
            step: None,
        });
        if grad_norm / scale < config.epsilon {
            converged = true;
            break;
        }
        if k == config.max_outer {
            break;
        }
        let sq = grad_norm * grad_norm;
        if let Some((theta_prev, grad_prev)) = &previous {
            let s: Vec<f64> = theta.iter().zip(theta_prev).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = grad.iter().zip(grad_prev).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy < 0.0 {
                trial_step = -dot(&s, &s) / sy;
            }
        }
        previous = Some((theta.clone(), grad.clone()));
        let mut next = None;
        match config.step {
            StepRule::Fixed { rho } => {
                let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + rho * g).collect();
                let q_new = problem.solve(&cand, Some(q.values()))?;
                let obj = problem.objective(&q_new);
                if !obj.is_finite() {
                    return Err(Error::NonFiniteObjective { iteration: k + 1 });
                }
                next = Some((cand, q_new, obj, rho));
            }
            StepRule::Backtracking => {
                let mut rho = trial_step;
                for _ in 0..MAX_BACKTRACKS {
                    let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + rho * g).collect();
                    let q_new = problem.solve(&cand, Some(q.values()))?;
                    let obj = problem.objective(&q_new);
                    if obj.is_finite() && obj >= objective + ARMIJO * rho * sq {
                        next = Some((cand, q_new, obj, rho));
                        break;
                    }
                    rho *= 0.5;
                }
                trial_step = rho * 2.0;
            }
        }
        let Some((cand, q_new, obj, rho)) = next else {
            let msg = format!("line search found no ascent at iteration {k}");
            log::warn!("{msg}");
            warnings.push(msg);
            break;
        };
        trace.last_mut().expect("just pushed").step = Some(rho);
        theta = cand;
        q = q_new;
        objective = obj;
    }
    if !converged {
        log::warn!("stage 2 stopped before the gradient criterion was met");
    }
    let report = Stage2Report {
        iterations: trace.len() - 1,
        trace,
        converged,
        step_rule: config.step,
        smoothness,
        n_choices,
        bellman_sweeps: problem.bellman_sweeps,
        gradient_sweeps: problem.gradient_sweeps,
        warnings,
    };
    Ok((report, q))
}

/// Runs both stages and evaluates the full log-likelihood at the estimate.
pub fn estimate(family: &ModelFamily, dataset: &[History], config: &EstimatorConfig) -> Result<EstimateReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidHistory("dataset is empty".into()));
    }
    let started = Instant::now();
    let probe = family.kernel_model(&family.dynamics.initial_params())?;
    for h in dataset {
        h.validate(&probe)?;
    }
    let (theta2, stage1, paths) = stage1_fit_theta2(family, dataset, config)?;
    let (stage2, q) = stage2_policy_gradient(family, &theta2, dataset, &paths, config)?;
    let theta1 = stage2.theta1().to_vec();
    let model = family.model(&theta1, &theta2)?;
    let likelihood = log_likelihood_with(&model, &q, dataset)?;
    Ok(EstimateReport {
        theta1_names: family.reward.names().to_vec(),
        theta2: family.dynamics.natural(&theta2),
        theta2_names: family.dynamics.natural_names(),
        theta2_unconstrained: theta2,
        theta1,
        likelihood,
        converged: stage1.converged && stage2.converged,
        stage1,
        stage2,
        n_histories: dataset.len(),
        n_transitions: transitions(dataset, 0),
        runtime_seconds: started.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

/// Fits the fully observed mileage model to the same histories, ignoring
/// their priors.
pub fn fit_mdp_baseline(dataset: &[History], z_max: usize, discount: f64, config: &EstimatorConfig) -> Result<EstimateReport> {
    estimate(&mileage_family(z_max, discount), &strip_priors(dataset), config)
}
