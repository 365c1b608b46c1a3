use std::sync::Arc;

use spe_core::bellman;
use spe_core::engine::{self, EngineParams, PriorPolicy, SimConfig, KEEP, REPLACE};
use spe_core::estimator::{self, bfgs_minimize, EstimatorConfig, Stage1Config, StepRule};
use spe_core::family::{log_odds_against_last, DynamicsFamily, LinearReward, ModelFamily};
use spe_core::grid::BeliefGrid;
use spe_core::model::{Belief, History};

/// Deterministic three-cycle with a single action.
#[derive(Debug)]
struct Cycle;

impl DynamicsFamily for Cycle {
    fn n_states(&self) -> usize {
        1
    }
    fn n_obs(&self) -> usize {
        3
    }
    fn n_actions(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        0
    }
    fn kernel(&self, _: &[f64]) -> Vec<f64> {
        let mut k = vec![0.0; 9];
        for z in 0..3 {
            k[z * 3 + (z + 1) % 3] = 1.0;
        }
        k
    }
    fn natural(&self, _: &[f64]) -> Vec<f64> {
        vec![]
    }
    fn natural_names(&self) -> Vec<String> {
        vec![]
    }
}

#[test]
fn bfgs_finds_rosenbrock_minimum() {
    let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
    let min = bfgs_minimize(&f, &[-1.2, 1.0], &Stage1Config::default()).unwrap();
    assert!(min.converged);
    assert!((min.x[0] - 1.0).abs() < 1e-4 && (min.x[1] - 1.0).abs() < 1e-4, "{:?}", min.x);
    assert!(min.value_trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn single_action_stops_at_start() {
    let reward = LinearReward::new(1, 3, 1, vec!["theta".into()], vec![0.0, 1.0, 2.0], vec![0.0; 3]).unwrap();
    let family = ModelFamily {
        dynamics: Arc::new(Cycle),
        reward,
        discount: 0.9,
    };
    let h = History::new(Belief::new(vec![1.0]).unwrap(), vec![0, 1, 2, 0], vec![0, 0, 0]).unwrap();
    let config = EstimatorConfig {
        theta1_init: Some(vec![0.7]),
        ..EstimatorConfig::default()
    };
    let report = estimator::estimate(&family, &[h], &config).unwrap();
    assert!(report.converged);
    assert_eq!(report.stage2.iterations, 0);
    assert_eq!(report.theta1, vec![0.7]);
    assert_eq!(report.stage2.trace[0].grad_norm, 0.0);
}

#[test]
fn mileage_dynamics_match_empirical_increments() {
    let params = EngineParams {
        z_max: 60,
        ..EngineParams::reference()
    };
    let data = engine::simulate(&params, &SimConfig::new(200, 15, 7), 41, 1e-9).unwrap();
    let mut counts = [0.0; 4];
    for h in &data {
        for t in 0..h.len() {
            if h.acts[t] == KEEP {
                counts[h.obs[t + 1] - h.obs[t]] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    let family = engine::mileage_family(60, 0.95);
    let (u, report, _) = estimator::stage1_fit_theta2(&family, &engine::strip_priors(&data), &EstimatorConfig::default()).unwrap();
    assert!(report.converged);
    for (est, c) in family.dynamics.natural(&u).iter().zip(counts) {
        assert!((est - c / total).abs() < 1e-5, "{est} vs {}", c / total);
    }
}

/// Myopic replacement logit with many replacements.
fn logit_data() -> (ModelFamily, Vec<History>) {
    let z_max = 40;
    let family = engine::mileage_family(z_max, 0.0);
    let u = log_odds_against_last(&[0.3, 0.5, 0.15, 0.05]);
    let model = family.model(&[150.0, 3.0], &u).unwrap();
    let grid = Arc::new(BeliefGrid::new(1, 101).unwrap());
    let q = bellman::solve(&model, grid, 1e-12, 10).unwrap();
    let sim = SimConfig {
        prior: PriorPolicy::Fixed(vec![1.0]),
        ..SimConfig::new(100, 50, 11)
    };
    let data = engine::simulate_model(&model, &q, &sim).unwrap().into_iter().map(|h| h.history).collect();
    (family, data)
}

fn logit_loglik(data: &[History], theta: f64, rc: f64) -> f64 {
    let mut ll = 0.0;
    for h in data {
        for t in 0..h.len() {
            let d = -rc + 1e-3 * theta * h.obs[t] as f64;
            let log_norm = d.max(0.0) + (-d.abs()).exp().ln_1p();
            ll += if h.acts[t] == REPLACE { d } else { 0.0 } - log_norm;
        }
    }
    ll
}

fn grid_argmax(data: &[History]) -> (f64, f64) {
    let (mut c, mut w) = ((150.0, 3.0), (150.0, 3.0));
    for _ in 0..8 {
        let mut best = (f64::NEG_INFINITY, c);
        for i in 0..=20 {
            for j in 0..=20 {
                let p = (c.0 + w.0 * (i as f64 / 10.0 - 1.0), c.1 + w.1 * (j as f64 / 10.0 - 1.0));
                let ll = logit_loglik(data, p.0, p.1);
                if ll > best.0 {
                    best = (ll, p);
                }
            }
        }
        c = best.1;
        w = (w.0 / 5.0, w.1 / 5.0);
    }
    c
}

#[test]
fn myopic_logit_reaches_grid_optimum() {
    let (family, data) = logit_data();
    let replacements: usize = data.iter().flat_map(|h| &h.acts).filter(|&&a| a == REPLACE).count();
    assert!(replacements > 200, "{replacements}");
    let config = EstimatorConfig {
        epsilon: 1e-9,
        ..EstimatorConfig::default()
    };
    let report = estimator::estimate(&family, &data, &config).unwrap();
    assert!(report.stage2.converged);
    let (theta, rc) = grid_argmax(&data);
    assert!((report.theta1[0] - theta).abs() < 1e-2 * theta.abs(), "{:?} vs {theta}", report.theta1);
    assert!((report.theta1[1] - rc).abs() < 1e-3 * rc.abs(), "{:?} vs {rc}", report.theta1);
    let at_est = logit_loglik(&data, report.theta1[0], report.theta1[1]);
    assert!(at_est >= logit_loglik(&data, theta, rc) - 1e-6);
    assert!((report.stage2.trace.last().unwrap().objective - at_est).abs() < 1e-6);
    assert!(report.stage2.trace.windows(2).all(|w| w[1].objective > w[0].objective));
}

#[test]
fn fixed_step_run_satisfies_descent_bound() {
    let (family, data) = logit_data();
    let probe = estimator::estimate(
        &family,
        &data,
        &EstimatorConfig {
            max_outer: 0,
            ..EstimatorConfig::default()
        },
    )
    .unwrap();
    let rho = 1.0 / probe.stage2.smoothness.l;
    let config = EstimatorConfig {
        step: StepRule::Fixed { rho },
        max_outer: 40,
        ..EstimatorConfig::default()
    };
    let report = estimator::estimate(&family, &data, &config).unwrap();
    assert!(report.stage2.warnings.is_empty());
    assert!(report.stage2.trace.windows(2).all(|w| w[1].objective >= w[0].objective));
    let (min_sq, bound) = report.stage2.descent_bound().unwrap();
    assert!(min_sq <= bound, "{min_sq} > {bound}");
}

#[test]
fn oversized_fixed_step_is_flagged() {
    let (family, data) = logit_data();
    let config = EstimatorConfig {
        step: StepRule::Fixed { rho: 1e3 },
        max_outer: 1,
        ..EstimatorConfig::default()
    };
    let report = estimator::estimate(&family, &data, &config).unwrap();
    assert_eq!(report.stage2.warnings.len(), 1);
    assert!(report.stage2.descent_bound().is_none());
}

#[test]
fn estimates_are_reproducible() {
    let (family, data) = logit_data();
    let a = estimator::estimate(&family, &data, &EstimatorConfig::default()).unwrap();
    let b = estimator::estimate(&family, &data, &EstimatorConfig::default()).unwrap();
    assert_eq!(a.theta1, b.theta1);
    assert_eq!(a.theta2, b.theta2);
    assert_eq!(a.likelihood, b.likelihood);
}

#[test]
fn invalid_config_is_rejected() {
    let (family, data) = logit_data();
    let config = EstimatorConfig {
        epsilon: 0.0,
        ..EstimatorConfig::default()
    };
    assert!(estimator::estimate(&family, &data, &config).is_err());
    assert!(estimator::estimate(&family, &[], &EstimatorConfig::default()).is_err());
}

#[test]
fn pomdp_fit_matches_mdp_on_state_free_dynamics() {
    let row = [0.3, 0.5, 0.15, 0.05];
    let params = EngineParams {
        z_max: 60,
        theta3: [row, row],
        ..EngineParams::reference()
    };
    let data = engine::simulate(&params, &SimConfig::new(300, 20, 3), 41, 1e-9).unwrap();
    let config = EstimatorConfig {
        resolution: 41,
        epsilon: 1e-6,
        ..EstimatorConfig::default()
    };
    let pomdp = estimator::estimate(&engine::engine_family(60, 0.95), &data, &config).unwrap();
    let mdp = estimator::fit_mdp_baseline(&data, 60, 0.95, &config).unwrap();
    // the extra dynamics parameters only fit noise
    let (lp, lm) = (pomdp.likelihood.total, mdp.likelihood.total);
    assert!(((lp - lm) / lm).abs() < 1e-3, "{lp} vs {lm}");
}
