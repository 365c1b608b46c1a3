//! Filter stability and identification diagnostics.
//!
//! The belief metric `𝒟` and the ergodicity coefficient `η` of a single
//! filter step bound how fast the filter forgets its prior; the prior sweep
//! measures the same effect on the dynamics estimates.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{stage1_fit_theta2, EstimatorConfig};
use crate::family::ModelFamily;
use crate::model::{Belief, History, PomdpModel, SIGMA_FLOOR};

/// Slack on the contraction inequality.
const CERTIFICATE_SLACK: f64 = 1e-10;
/// Observation probabilities closer than this count as equal in the probe.
const PROBE_TOL: f64 = 1e-12;

/// `d(x, x') = 1 − min { x(s) / x'(s) : x'(s) > 0 }`.
fn one_sided(x: &[f64], y: &[f64]) -> f64 {
    let ratio = x
        .iter()
        .zip(y)
        .filter(|(_, &b)| b > 0.0)
        .map(|(a, b)| a / b)
        .fold(f64::INFINITY, f64::min);
    if ratio.is_finite() {
        1.0 - ratio
    } else {
        0.0
    }
}

/// `𝒟(x, x') = max(d(x, x'), d(x', x))`.
pub fn belief_metric(x: &Belief, y: &Belief) -> f64 {
    one_sided(x.probs(), y.probs()).max(one_sided(y.probs(), x.probs()))
}

/// Largest metric distance between the posteriors of the hidden-state
/// vertices after observing `z_next`. Vertices that cannot produce
/// `z_next` are skipped.
pub fn contraction_coefficient(model: &PomdpModel, z_next: usize, z: usize, a: usize) -> Result<f64> {
    let n = model.n_states();
    let posteriors: Vec<Belief> = (0..n)
        .filter_map(|s| model.lambda_update(z_next, z, &Belief::vertex(n, s), a).ok())
        .collect();
    if posteriors.is_empty() {
        return Err(Error::Undefined(format!(
            "z' = {z_next} is impossible from z = {z} under a = {a} at every vertex"
        )));
    }
    let mut eta: f64 = 0.0;
    for (i, p) in posteriors.iter().enumerate() {
        for q in &posteriors[i + 1..] {
            eta = eta.max(belief_metric(p, q));
        }
    }
    Ok(eta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TupleCheck {
    pub z_next: usize,
    pub z: usize,
    pub a: usize,
    pub eta: f64,
    /// Largest `𝒟(λx₁, λx₂)` seen over the sampled pairs.
    pub max_distance: f64,
    pub pairs: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositionCheck {
    pub m: usize,
    pub max_distance: f64,
    /// `η_max^M`
    pub bound: f64,
    pub paths: usize,
    /// Paths whose distance exceeded the product of the `η` along them.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub tuples: Vec<TupleCheck>,
    pub eta_max: f64,
    pub composition: Vec<CompositionCheck>,
    pub passed: bool,
}

/// Monte-Carlo certificate of `𝒟(λx₁, λx₂) ≤ η` over random belief pairs
/// for every reachable `(z', z, a)`, and of the `M`-fold bound along random
/// observation paths for `M = 1..=max_m`.
pub fn contraction_check(model: &PomdpModel, pairs: usize, max_m: usize, seed: u64) -> ContractionReport {
    let (nz, na, ns) = (model.n_obs(), model.n_actions(), model.n_states());
    let triples: Vec<(usize, usize, usize)> = (0..nz)
        .flat_map(|z| (0..na).flat_map(move |a| model.successors(z, a).iter().map(move |&zn| (zn, z, a))))
        .collect();
    let tuples: Vec<TupleCheck> = triples
        .par_iter()
        .enumerate()
        .filter_map(|(i, &(zn, z, a))| {
            let eta = contraction_coefficient(model, zn, z, a).ok()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut check = TupleCheck {
                z_next: zn,
                z,
                a,
                eta,
                max_distance: 0.0,
                pairs: 0,
                violations: 0,
            };
            for _ in 0..pairs {
                let (x1, x2) = (Belief::random(&mut rng, ns), Belief::random(&mut rng, ns));
                let (Ok(y1), Ok(y2)) = (model.lambda_update(zn, z, &x1, a), model.lambda_update(zn, z, &x2, a)) else {
                    continue;
                };
                let dist = belief_metric(&y1, &y2);
                check.pairs += 1;
                check.max_distance = check.max_distance.max(dist);
                if dist > eta + CERTIFICATE_SLACK {
                    check.violations += 1;
                }
            }
            Some(check)
        })
        .collect();
    let eta_max = tuples.iter().map(|t| t.eta).fold(0.0, f64::max);

    let composition: Vec<CompositionCheck> = (1..=max_m)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(m as u64);
            let mut check = CompositionCheck {
                m,
                max_distance: 0.0,
                bound: eta_max.powi(m as i32),
                paths: 0,
                violations: 0,
            };
            for _ in 0..pairs.min(2000) {
                if let Some((dist, product)) = random_path_distance(model, &mut rng, m) {
                    check.paths += 1;
                    check.max_distance = check.max_distance.max(dist);
                    if dist > product + CERTIFICATE_SLACK {
                        check.violations += 1;
                    }
                }
            }
            check
        })
        .collect();

    let passed = tuples.iter().all(|t| t.violations == 0)
        && composition
            .iter()
            .all(|c| c.violations == 0 && c.max_distance <= c.bound + CERTIFICATE_SLACK);
    ContractionReport {
        tuples,
        eta_max,
        composition,
        passed,
    }
}

/// Filters two random priors along one random path of `m` steps that both
/// can follow; returns the final distance and the product of `η` along it.
fn random_path_distance(model: &PomdpModel, rng: &mut ChaCha8Rng, m: usize) -> Option<(f64, f64)> {
    let (nz, na, ns) = (model.n_obs(), model.n_actions(), model.n_states());
    let mut x1 = Belief::random(rng, ns);
    let mut x2 = Belief::random(rng, ns);
    let mut z = rng.gen_range(0..nz);
    let mut product = 1.0;
    for _ in 0..m {
        let a = rng.gen_range(0..na);
        let options: Vec<usize> = model
            .successors(z, a)
            .iter()
            .copied()
            .filter(|&zn| model.sigma(zn, z, &x1, a) > SIGMA_FLOOR && model.sigma(zn, z, &x2, a) > SIGMA_FLOOR)
            .collect();
        if options.is_empty() {
            return None;
        }
        let zn = options[rng.gen_range(0..options.len())];
        product *= contraction_coefficient(model, zn, z, a).ok()?;
        x1 = model.lambda_update(zn, z, &x1, a).ok()?;
        x2 = model.lambda_update(zn, z, &x2, a).ok()?;
        z = zn;
    }
    Some((belief_metric(&x1, &x2), product))
}

/// `n` evenly spaced priors on the edge between the first two vertices
/// (the whole simplex for two states).
pub fn edge_candidates(n_states: usize, n: usize) -> Result<Vec<Belief>> {
    if n_states < 2 || n < 2 {
        return Err(Error::InvalidParams("need two states and at least two candidates".into()));
    }
    Ok((0..n)
        .map(|k| {
            let good = 1.0 - k as f64 / (n - 1) as f64;
            let mut p = vec![0.0; n_states];
            p[0] = good;
            p[1] = 1.0 - good;
            Belief::normalized(p)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub m: usize,
    /// Largest pairwise Euclidean distance between the dynamics estimates.
    pub spread: f64,
    /// Natural dynamics estimates, one per candidate.
    pub estimates: Vec<Vec<f64>>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub candidates: Vec<Vec<f64>>,
    pub points: Vec<SweepPoint>,
    /// Spreads never rise by more than `slack` as `M` grows.
    pub non_increasing: bool,
    pub slack: f64,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "M,spread")?;
        for p in &self.points {
            writeln!(out, "{},{}", p.m, p.spread)?;
        }
        Ok(())
    }
}

fn diameter(points: &[Vec<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    best
}

/// Treats the priors as unknown: for every candidate prior and burn-in `M`,
/// refits the dynamics on periods `t ≥ M` after filtering from the
/// candidate, and reports the spread of the estimates.
///
/// For each `M` the uniform prior is fitted first (warm-started from the
/// previous `M`), and the other candidates start from its estimate.
pub fn x0_sweep_estimate(
    family: &ModelFamily,
    dataset: &[History],
    candidates: &[Belief],
    burn_ins: &[usize],
    config: &EstimatorConfig,
    slack: f64,
) -> Result<SweepReport> {
    let shortest = dataset.iter().map(|h| h.len()).min().unwrap_or(0);
    if let Some(&m) = burn_ins.iter().find(|&&m| m >= shortest) {
        return Err(Error::Precondition(format!(
            "burn-in M = {m} leaves no periods in a history of length {shortest}"
        )));
    }
    if candidates.is_empty() {
        return Err(Error::InvalidParams("no prior candidates".into()));
    }
    let with_prior = |x0: &Belief| -> Vec<History> {
        dataset
            .iter()
            .map(|h| History {
                x0: x0.clone(),
                ..h.clone()
            })
            .collect()
    };
    let mut start = config.theta2_init.clone();
    let mut points = Vec::with_capacity(burn_ins.len());
    for &m in burn_ins {
        let centre_config = EstimatorConfig {
            burn_in: m,
            theta2_init: start.clone(),
            ..config.clone()
        };
        let centre = Belief::uniform(family.n_states());
        let (centre_u, centre_report, _) = stage1_fit_theta2(family, &with_prior(&centre), &centre_config)?;
        let warm = EstimatorConfig {
            theta2_init: Some(centre_u.clone()),
            ..centre_config
        };
        let fits: Vec<(Vec<f64>, bool)> = candidates
            .par_iter()
            .map(|x0| {
                let (u, report, _) = stage1_fit_theta2(family, &with_prior(x0), &warm)?;
                Ok((family.dynamics.natural(&u), report.converged))
            })
            .collect::<Result<_>>()?;
        let converged = centre_report.converged && fits.iter().all(|(_, c)| *c);
        let estimates: Vec<Vec<f64>> = fits.into_iter().map(|(e, _)| e).collect();
        let spread = diameter(&estimates);
        log::info!("prior sweep M = {m}: spread {spread:.4e}");
        points.push(SweepPoint {
            m,
            spread,
            estimates,
            converged,
        });
        start = Some(centre_u);
    }
    let non_increasing = points.windows(2).all(|w| w[1].spread <= w[0].spread + slack);
    Ok(SweepReport {
        candidates: candidates.iter().map(|c| c.probs().to_vec()).collect(),
        points,
        non_increasing,
        slack,
    })
}

/// Where two models first disagree on observable probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    /// 0 for `σ(z₁ | z₀, x₀, a₀)`, 1 for `σ(z₂ | z₁, x₁, a₁)` after one update.
    pub period: usize,
    pub z0: usize,
    pub a0: usize,
    pub z1: usize,
    pub a1: Option<usize>,
    pub z2: Option<usize>,
    pub sigma_a: f64,
    pub sigma_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub distinguishable: bool,
    pub witness: Option<Witness>,
    /// At least one kernel has identical rows across hidden states, which
    /// voids the two-period argument.
    pub rank_one: bool,
}

/// Compares the first- and second-period observation probabilities of two
/// models from the common prior `x0`.
pub fn two_period_identification_probe(model_a: &PomdpModel, model_b: &PomdpModel, x0: &Belief) -> Result<ProbeResult> {
    let same_shape = model_a.n_states() == model_b.n_states()
        && model_a.n_obs() == model_b.n_obs()
        && model_a.n_actions() == model_b.n_actions();
    if !same_shape {
        return Err(Error::InvalidParams("models must share state, observation and action spaces".into()));
    }
    if x0.n_states() != model_a.n_states() {
        return Err(Error::InvalidBelief("prior dimension does not match the models".into()));
    }
    if model_a.is_rank_one() || model_b.is_rank_one() {
        return Ok(ProbeResult {
            distinguishable: false,
            witness: None,
            rank_one: true,
        });
    }
    let (nz, na) = (model_a.n_obs(), model_a.n_actions());
    let differs = |a: f64, b: f64| (a - b).abs() > PROBE_TOL;

    for z0 in 0..nz {
        for a0 in 0..na {
            for z1 in 0..nz {
                let (sa, sb) = (model_a.sigma(z1, z0, x0, a0), model_b.sigma(z1, z0, x0, a0));
                if differs(sa, sb) {
                    return Ok(ProbeResult {
                        distinguishable: true,
                        witness: Some(Witness {
                            period: 0,
                            z0,
                            a0,
                            z1,
                            a1: None,
                            z2: None,
                            sigma_a: sa,
                            sigma_b: sb,
                        }),
                        rank_one: false,
                    });
                }
            }
        }
    }
    for z0 in 0..nz {
        for a0 in 0..na {
            for z1 in 0..nz {
                let (Ok(xa), Ok(xb)) = (model_a.lambda_update(z1, z0, x0, a0), model_b.lambda_update(z1, z0, x0, a0)) else {
                    continue;
                };
                for a1 in 0..na {
                    for z2 in 0..nz {
                        let (sa, sb) = (model_a.sigma(z2, z1, &xa, a1), model_b.sigma(z2, z1, &xb, a1));
                        if differs(sa, sb) {
                            return Ok(ProbeResult {
                                distinguishable: true,
                                witness: Some(Witness {
                                    period: 1,
                                    z0,
                                    a0,
                                    z1,
                                    a1: Some(a1),
                                    z2: Some(z2),
                                    sigma_a: sa,
                                    sigma_b: sb,
                                }),
                                rank_one: false,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(ProbeResult {
        distinguishable: false,
        witness: None,
        rank_one: false,
    })
}
