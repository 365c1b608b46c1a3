//! Belief filtering along data, the log-likelihood and its pseudo version,
//! and the analytic score with respect to the reward parameters.
//!
//! The score uses `∇log π(a|z,x) = ∇Q(z,x,a) − Σ_a' π(a'|z,x) ∇Q(z,x,a')`
//! where `∇Q` is the fixed point of
//! `g ↦ ∇r + β Σ_{z'} σ Σ_{a'} π(a'|z',x') g(z',x',a')`, a `β`-contraction.

use rayon::prelude::*;
use serde::Serialize;

use crate::bellman::{INNER_MAX, interpolate_row, log_sum_exp, softmax_into, BeliefDynamics, QTable};
use crate::error::{Error, Result};
use crate::family::LinearReward;
use crate::grid::{BeliefGrid, Stencil};
use crate::model::{Belief, History, PomdpModel, SIGMA_FLOOR};

/// Default sup-norm tolerance for the gradient fixed point.
pub const DEFAULT_GRAD_TOL: f64 = 1e-8;

pub type Dataset = Vec<History>;

/// Beliefs `x_0..x_T` and observation probabilities `σ_0..σ_{T-1}` along one
/// history.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredPath {
    pub beliefs: Vec<Belief>,
    pub sigmas: Vec<f64>,
}

pub fn filter(model: &PomdpModel, history: &History) -> Result<FilteredPath> {
    history.validate(model)?;
    let mut beliefs = Vec::with_capacity(history.len() + 1);
    let mut sigmas = Vec::with_capacity(history.len());
    beliefs.push(history.x0.clone());
    let mut post = vec![0.0; model.n_states()];
    for (t, (pair, &a)) in history.obs.windows(2).zip(&history.acts).enumerate() {
        let x = beliefs.last().expect("non-empty").probs();
        let sigma = model.propagate_raw(pair[1], pair[0], x, a, &mut post);
        if sigma < SIGMA_FLOOR {
            return Err(Error::ZeroObservationProbability {
                step: t,
                z: pair[0],
                z_next: pair[1],
                action: a,
            });
        }
        sigmas.push(sigma);
        beliefs.push(Belief::normalized(post.clone()));
    }
    Ok(FilteredPath { beliefs, sigmas })
}

pub fn filter_all(model: &PomdpModel, dataset: &[History]) -> Result<Vec<FilteredPath>> {
    dataset.par_iter().map(|h| filter(model, h)).collect()
}

/// `Σ_i Σ_{t ≥ burn_in} log σ(z_{t+1}, z_t, x_t, a_t)`, or `−∞` when some
/// observation is impossible under the model.
///
/// Histories must already be validated against the model.
pub fn observation_term(model: &PomdpModel, dataset: &[History], burn_in: usize) -> f64 {
    let per_history: Vec<f64> = dataset
        .par_iter()
        .map(|h| {
            let mut x = h.x0.probs().to_vec();
            let mut post = vec![0.0; x.len()];
            let mut total = 0.0;
            for (t, (pair, &a)) in h.obs.windows(2).zip(&h.acts).enumerate() {
                let sigma = model.propagate_raw(pair[1], pair[0], &x, a, &mut post);
                if sigma < SIGMA_FLOOR {
                    return f64::NEG_INFINITY;
                }
                if t >= burn_in {
                    total += sigma.ln();
                }
                for (xi, p) in x.iter_mut().zip(&post) {
                    *xi = p / sigma;
                }
            }
            total
        })
        .collect();
    per_history.iter().sum()
}

/// Additive pieces of the log-likelihood.
///
/// `prior_term` is the log-probability of the recorded priors, which are
/// given data rather than modelled quantities, so it is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LikelihoodTerms {
    pub obs_term: f64,
    pub choice_term: f64,
    pub prior_term: f64,
    pub total: f64,
}

impl LikelihoodTerms {
    fn impossible() -> Self {
        LikelihoodTerms {
            obs_term: f64::NEG_INFINITY,
            choice_term: f64::NEG_INFINITY,
            prior_term: 0.0,
            total: f64::NEG_INFINITY,
        }
    }
}

/// Log-likelihood at a solved `Q`. Per-history terms are summed in dataset
/// order.
pub fn log_likelihood_with(model: &PomdpModel, q: &QTable, dataset: &[History]) -> Result<LikelihoodTerms> {
    for h in dataset {
        h.validate(model)?;
    }
    let per_history: Vec<Option<(f64, f64)>> = dataset
        .par_iter()
        .map(|h| {
            let path = filter(model, h).ok()?;
            let obs: f64 = path.sigmas.iter().map(|s| s.ln()).sum();
            let mut choice = 0.0;
            for (t, &a) in h.acts.iter().enumerate() {
                let row = q.action_values(h.obs[t], path.beliefs[t].probs());
                choice += row[a] - log_sum_exp(&row);
            }
            Some((obs, choice))
        })
        .collect();
    let mut obs_term = 0.0;
    let mut choice_term = 0.0;
    for terms in per_history {
        match terms {
            Some((o, c)) => {
                obs_term += o;
                choice_term += c;
            }
            None => return Ok(LikelihoodTerms::impossible()),
        }
    }
    let prior_term = 0.0;
    Ok(LikelihoodTerms {
        obs_term,
        choice_term,
        prior_term,
        total: obs_term + choice_term + prior_term,
    })
}

/// Solves the Bellman equation for `model` on `grid` and evaluates the
/// log-likelihood of `dataset`.
pub fn log_likelihood(model: &PomdpModel, grid: std::sync::Arc<BeliefGrid>, dataset: &[History], tol: f64) -> Result<LikelihoodTerms> {
    let q = crate::bellman::solve(model, grid, tol, usize::MAX)?;
    log_likelihood_with(model, &q, dataset)
}

/// One frozen choice observation: `(z_t, a_t)` and the stencil of `x_t`.
#[derive(Debug, Clone)]
pub struct ChoiceSample {
    pub z: usize,
    pub a: usize,
    pub stencil: Stencil,
}

/// Choice observations with beliefs frozen at a dynamics estimate.
#[derive(Debug, Clone)]
pub struct ChoiceData {
    samples: Vec<ChoiceSample>,
}

impl ChoiceData {
    /// Steps with `t < burn_in` are dropped.
    pub fn new(dataset: &[History], paths: &[FilteredPath], grid: &BeliefGrid, burn_in: usize) -> Self {
        let samples = dataset
            .iter()
            .zip(paths)
            .flat_map(|(h, path)| {
                h.acts.iter().enumerate().skip(burn_in).map(move |(t, &a)| ChoiceSample {
                    z: h.obs[t],
                    a,
                    stencil: grid.stencil(path.beliefs[t].probs()),
                })
            })
            .collect();
        ChoiceData { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ChoiceSample] {
        &self.samples
    }
}

const NODE_CHUNK: usize = 16;
const SAMPLE_CHUNK: usize = 4096;

/// `ℓ̂(θ1) = Σ log π(a_t | z_t, x_t)` with frozen beliefs.
pub fn pseudo_log_likelihood(q: &QTable, data: &ChoiceData) -> f64 {
    let (nn, na) = (q.grid().len(), q.n_actions());
    let partial: Vec<f64> = data
        .samples
        .par_chunks(SAMPLE_CHUNK)
        .map(|chunk| {
            let mut row = vec![0.0; na];
            chunk
                .iter()
                .map(|s| {
                    interpolate_row(q.values(), nn, na, s.z, &s.stencil, &mut row);
                    row[s.a] - log_sum_exp(&row)
                })
                .sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

/// `∇θ1 Q` tabulated at lattice nodes, flattened `[z][node][a][k]`.
#[derive(Debug, Clone)]
pub struct GradQTable {
    n_params: usize,
    values: Vec<f64>,
    iterations: usize,
    residual: f64,
}

impl GradQTable {
    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// `∇Q(z, node, a)`.
    pub fn get(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.n_params..(cell + 1) * self.n_params]
    }

    /// Largest Euclidean norm over cells.
    pub fn sup_norm(&self) -> f64 {
        self.values
            .chunks(self.n_params.max(1))
            .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// The linear map `g ↦ ∇r + β Σ σ Σ π g` for a fixed solved `Q`.
pub struct GradOperator<'a> {
    dynamics: &'a BeliefDynamics,
    // π(a' | z', x') per successor slot
    succ_policy: Vec<f64>,
}

impl<'a> GradOperator<'a> {
    pub fn new(dynamics: &'a BeliefDynamics, q_values: &[f64]) -> Self {
        let (nn, na) = (dynamics.grid().len(), dynamics.n_actions());
        let succ_policy: Vec<f64> = (0..dynamics.n_successors())
            .into_par_iter()
            .flat_map_iter(|j| {
                let (zn, _, nodes, weights) = dynamics.successor(j);
                let stencil: Stencil = nodes.iter().copied().zip(weights.iter().copied()).collect();
                let mut row = vec![0.0; na];
                interpolate_row(q_values, nn, na, zn, &stencil, &mut row);
                let mut pi = vec![0.0; na];
                softmax_into(&row, &mut pi);
                pi
            })
            .collect();
        GradOperator { dynamics, succ_policy }
    }

    fn apply_cells(&self, features: &[f64], g: &[f64], first: usize, out: &mut [f64], p: usize) {
        let d = self.dynamics;
        let (nn, na, beta) = (d.grid().len(), d.n_actions(), d.discount());
        let mut acc = vec![0.0; p];
        for (local, slot) in out.chunks_mut(p).enumerate() {
            let c = first + local;
            acc.iter_mut().for_each(|v| *v = 0.0);
            if beta > 0.0 {
                for j in d.successor_range(c) {
                    let (zn, sigma, nodes, weights) = d.successor(j);
                    let pi = &self.succ_policy[j * na..(j + 1) * na];
                    for (&k, &w) in nodes.iter().zip(weights) {
                        for (a2, &pa) in pi.iter().enumerate() {
                            let coef = sigma * w * pa;
                            let base = ((zn * nn + k) * na + a2) * p;
                            for (v, gv) in acc.iter_mut().zip(&g[base..base + p]) {
                                *v += coef * gv;
                            }
                        }
                    }
                }
            }
            for ((o, f), v) in slot.iter_mut().zip(&features[c * p..(c + 1) * p]).zip(&acc) {
                *o = f + beta * v;
            }
        }
    }

    /// `out = features + β Σ σ Σ π g`, all flattened `[cell][k]`.
    pub fn apply(&self, features: &[f64], g: &[f64], out: &mut [f64], n_params: usize) {
        let cells = self.dynamics.grid().len() * self.dynamics.n_actions();
        out.par_chunks_mut(cells * n_params)
            .enumerate()
            .for_each(|(z, chunk)| self.apply_cells(features, g, z * cells, chunk, n_params));
    }

    fn gauss_seidel_sweep(&self, features: &[f64], g: &mut [f64], scratch: &mut [f64], p: usize, inner_tol: f64) -> f64 {
        let d = self.dynamics;
        let cells = d.grid().len() * d.n_actions();
        let chunk = d.n_actions() * NODE_CHUNK;
        let mut step: f64 = 0.0;
        for z in (0..d.n_obs()).rev() {
            let range = z * cells * p..(z + 1) * cells * p;
            let before = g[range.clone()].to_vec();
            for _ in 0..INNER_MAX {
                let snapshot: &[f64] = g;
                scratch[..cells * p]
                    .par_chunks_mut(chunk * p)
                    .enumerate()
                    .for_each(|(i, out)| self.apply_cells(features, snapshot, z * cells + i * chunk, out, p));
                let inner = crate::bellman::sup_distance(&scratch[..cells * p], &g[range.clone()]);
                g[range.clone()].copy_from_slice(&scratch[..cells * p]);
                if inner <= inner_tol {
                    break;
                }
            }
            step = step.max(crate::bellman::sup_distance(&before, &g[range]));
        }
        step
    }

    /// Fixed point from `init` (zeros when absent) with the same sweep
    /// schedule as [`BeliefDynamics::solve`]: Gauss-Seidel sweeps, then a
    /// plain step accepted once `β‖g_{k+1} − g_k‖∞ ≤ tol`.
    pub fn solve(&self, features: &[f64], n_params: usize, init: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<GradQTable> {
        let mut current = match init {
            Some(v) => v.to_vec(),
            None => vec![0.0; features.len()],
        };
        let mut next = vec![0.0; current.len()];
        let beta = self.dynamics.discount();
        let multi = self.dynamics.n_obs() > 1 && beta > 0.0;
        let mut gauss_seidel = multi;
        let mut residual = f64::INFINITY;
        let mut iter = 0;
        while iter < max_iter {
            iter += 1;
            if gauss_seidel {
                residual = beta * self.gauss_seidel_sweep(features, &mut current, &mut next, n_params, tol);
                gauss_seidel = residual > tol;
                continue;
            }
            self.apply(features, &current, &mut next, n_params);
            let step = crate::bellman::sup_distance(&next, &current);
            std::mem::swap(&mut current, &mut next);
            residual = beta * step;
            if residual <= tol {
                return Ok(GradQTable {
                    n_params,
                    values: current,
                    iterations: iter,
                    residual,
                });
            }
            gauss_seidel = multi;
        }
        Err(Error::MaxIterExceeded {
            iterations: max_iter,
            residual,
        })
    }
}

/// `∇θ1 Q` at a solved table `q` for rewards given by `reward`.
pub fn grad_q(model: &PomdpModel, reward: &LinearReward, q: &QTable, tol: f64, max_iter: usize) -> Result<GradQTable> {
    let dynamics = BeliefDynamics::new(model, q.grid().clone())?;
    let features = reward.node_features(&dynamics);
    GradOperator::new(&dynamics, q.values()).solve(&features, reward.n_params(), None, tol, max_iter)
}

/// Writes the interpolated `∇Q(z, x, ·)` rows (`[a][k]`) into `out`.
fn interpolate_grad(gradq: &GradQTable, nn: usize, na: usize, z: usize, stencil: &Stencil, out: &mut [f64]) {
    let p = gradq.n_params;
    out.iter_mut().for_each(|v| *v = 0.0);
    for &(k, w) in stencil {
        let base = (z * nn + k) * na * p;
        for (o, g) in out.iter_mut().zip(&gradq.values[base..base + na * p]) {
            *o += w * g;
        }
    }
}

/// Score `∇θ1 log π(a | z, x)`.
pub fn grad_log_pi(gradq: &GradQTable, q: &QTable, z: usize, x: &Belief, a: usize) -> Vec<f64> {
    let stencil = q.grid().stencil(x.probs());
    let (nn, na, p) = (q.grid().len(), q.n_actions(), gradq.n_params);
    let mut row = vec![0.0; na];
    let mut pi = vec![0.0; na];
    let mut grads = vec![0.0; na * p];
    let mut out = vec![0.0; p];
    score_at(q, gradq, nn, na, z, a, &stencil, &mut row, &mut pi, &mut grads, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn score_at(
    q: &QTable,
    gradq: &GradQTable,
    nn: usize,
    na: usize,
    z: usize,
    a: usize,
    stencil: &Stencil,
    row: &mut [f64],
    pi: &mut [f64],
    grads: &mut [f64],
    out: &mut [f64],
) {
    let p = gradq.n_params;
    interpolate_row(q.values(), nn, na, z, stencil, row);
    softmax_into(row, pi);
    interpolate_grad(gradq, nn, na, z, stencil, grads);
    out.copy_from_slice(&grads[a * p..(a + 1) * p]);
    for (a2, &pa) in pi.iter().enumerate() {
        for (o, g) in out.iter_mut().zip(&grads[a2 * p..(a2 + 1) * p]) {
            *o -= pa * g;
        }
    }
}

/// `∇ℓ̂(θ1) = Σ ∇log π(a_t | z_t, x_t)` over the frozen samples.
pub fn pseudo_score(q: &QTable, gradq: &GradQTable, data: &ChoiceData) -> Vec<f64> {
    let (nn, na, p) = (q.grid().len(), q.n_actions(), gradq.n_params);
    let partial: Vec<Vec<f64>> = data
        .samples
        .par_chunks(SAMPLE_CHUNK)
        .map(|chunk| {
            let mut row = vec![0.0; na];
            let mut pi = vec![0.0; na];
            let mut grads = vec![0.0; na * p];
            let mut out = vec![0.0; p];
            let mut total = vec![0.0; p];
            for s in chunk {
                score_at(q, gradq, nn, na, s.z, s.a, &s.stencil, &mut row, &mut pi, &mut grads, &mut out);
                total.iter_mut().zip(&out).for_each(|(t, o)| *t += o);
            }
            total
        })
        .collect();
    let mut total = vec![0.0; p];
    for part in partial {
        total.iter_mut().zip(&part).for_each(|(t, v)| *t += v);
    }
    total
}

/// Curvature constants of the pseudo-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SmoothnessConstants {
    pub l_r1: f64,
    pub l_r2: f64,
    pub l_q: f64,
    pub l_vbar: f64,
    /// Lipschitz constant of `∇ℓ̂`.
    pub l: f64,
}

pub fn smoothness_constants(l_r1: f64, l_r2: f64, discount: f64, n_histories: usize, horizon: usize) -> SmoothnessConstants {
    let one_minus = 1.0 - discount;
    let cubed = one_minus.powi(3);
    let l_q = l_r2 / one_minus + 2.0 * discount * l_r1 * l_r1 / cubed;
    let l_vbar = l_r2 / one_minus + 2.0 * l_r1 * l_r1 / cubed;
    SmoothnessConstants {
        l_r1,
        l_r2,
        l_q,
        l_vbar,
        l: (n_histories * horizon) as f64 * (l_q + l_vbar),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::{ccp, solve};
    use crate::model::tests::random_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_reward(seed: u64, ns: usize, nz: usize, na: usize, p: usize) -> LinearReward {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = ns * nz * na;
        let features = (0..cells * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offset = (0..cells).map(|_| rng.gen_range(-0.5..0.5)).collect();
        LinearReward::new(ns, nz, na, (0..p).map(|k| format!("t{k}")).collect(), features, offset).unwrap()
    }

    fn random_history(rng: &mut ChaCha8Rng, ns: usize, nz: usize, na: usize, t: usize) -> History {
        let raw: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.1..1.0)).collect();
        let x0 = Belief::normalized(raw);
        let obs = (0..=t).map(|_| rng.gen_range(0..nz)).collect();
        let acts = (0..t).map(|_| rng.gen_range(0..na)).collect();
        History::new(x0, obs, acts).unwrap()
    }

    #[test]
    fn empty_history() {
        let m = random_model(1, 2, 3, 2, 0.9);
        let h = History::new(Belief::uniform(2), vec![1], vec![]).unwrap();
        let path = filter(&m, &h).unwrap();
        assert_eq!(path.beliefs, vec![Belief::uniform(2)]);
        assert!(path.sigmas.is_empty());
        let grid = Arc::new(BeliefGrid::new(2, 5).unwrap());
        let terms = log_likelihood(&m, grid, &[h], 1e-9).unwrap();
        assert_eq!((terms.obs_term, terms.choice_term), (0.0, 0.0));
    }

    #[test]
    fn impossible_data_gives_negative_infinity() {
        let kernel = vec![
            0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, //
            0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25,
        ];
        let m = PomdpModel::new(2, 2, 1, 0.5, kernel, vec![0.0; 4]).unwrap();
        let good = History::new(Belief::uniform(2), vec![0, 0, 1], vec![0, 0]).unwrap();
        let bad = History::new(Belief::uniform(2), vec![0, 1], vec![0]).unwrap();
        assert!(filter(&m, &bad).is_err());
        let grid = Arc::new(BeliefGrid::new(2, 5).unwrap());
        let terms = log_likelihood(&m, grid, &[good.clone(), bad.clone()], 1e-9).unwrap();
        assert_eq!(terms.total, f64::NEG_INFINITY);
        assert_eq!(observation_term(&m, &[good, bad], 0), f64::NEG_INFINITY);
    }

    /// Probability of a history by summing over hidden state paths, with the
    /// agent's belief recomputed from the joint rather than the filter.
    fn brute_force_log_prob(m: &PomdpModel, q: &QTable, h: &History) -> f64 {
        let ns = m.n_states();
        let t_len = h.len();
        let mut total_obs = 0.0;
        let mut choice = 0.0;
        for t in 0..=t_len {
            // P(s_t, z_1..z_t | z_0, a, x0) by enumerating s_0..s_t
            let mut joint = vec![0.0; ns];
            let paths = ns.pow(t as u32 + 1);
            for code in 0..paths {
                let mut states = Vec::with_capacity(t + 1);
                let mut c = code;
                for _ in 0..=t {
                    states.push(c % ns);
                    c /= ns;
                }
                let mut p = h.x0.probs()[states[0]];
                for k in 0..t {
                    p *= m.prob(h.acts[k], h.obs[k], states[k], h.obs[k + 1], states[k + 1]);
                }
                joint[states[t]] += p;
            }
            let mass: f64 = joint.iter().sum();
            if t == t_len {
                total_obs = mass.ln();
            } else {
                let x = Belief::normalized(joint);
                choice += ccp(q, h.obs[t], &x)[h.acts[t]].ln();
            }
        }
        total_obs + choice
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let m = random_model(42, 2, 3, 2, 0.9);
        let grid = Arc::new(BeliefGrid::new(2, 21).unwrap());
        let q = solve(&m, grid, 1e-10, 100_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..5 {
            let h = random_history(&mut rng, 2, 3, 2, 3);
            let terms = log_likelihood_with(&m, &q, std::slice::from_ref(&h)).unwrap();
            let oracle = brute_force_log_prob(&m, &q, &h);
            assert!((terms.total - oracle).abs() <= 1e-10, "{} vs {}", terms.total, oracle);
            assert_eq!(terms.total, terms.obs_term + terms.choice_term + terms.prior_term);
        }
    }

    #[test]
    fn pseudo_likelihood_consistency() {
        let m = random_model(4, 2, 3, 2, 0.8);
        let grid = Arc::new(BeliefGrid::new(2, 11).unwrap());
        let q = solve(&m, grid.clone(), 1e-10, 100_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<History> = (0..6).map(|_| random_history(&mut rng, 2, 3, 2, 7)).collect();
        let paths = filter_all(&m, &data).unwrap();
        let choice = ChoiceData::new(&data, &paths, &grid, 0);
        let terms = log_likelihood_with(&m, &q, &data).unwrap();
        assert!((pseudo_log_likelihood(&q, &choice) - terms.choice_term).abs() < 1e-9);

        // uniform action values
        let flat = QTable::zeros(grid.clone(), 3, 2);
        let expect = 42.0 * 0.5f64.ln();
        assert!((pseudo_log_likelihood(&flat, &choice) - expect).abs() < 1e-10);
    }

    #[test]
    fn myopic_gradient_is_reward_gradient() {
        let m = random_model(7, 2, 3, 2, 0.0);
        let reward = random_reward(8, 2, 3, 2, 2);
        let m = m.with_rewards(reward.table(&[0.3, -0.2])).unwrap();
        let grid = Arc::new(BeliefGrid::new(2, 6).unwrap());
        let q = solve(&m, grid.clone(), 1e-10, 1000).unwrap();
        let g = grad_q(&m, &reward, &q, 1e-10, 1000).unwrap();
        let dynamics = BeliefDynamics::new(&m, grid).unwrap();
        let features = reward.node_features(&dynamics);
        assert_eq!(g.values(), &features[..]);
    }

    #[test]
    fn symmetric_score_and_single_action() {
        let grid = Arc::new(BeliefGrid::new(1, 1).unwrap());
        let q = QTable::zeros(grid.clone(), 1, 2);
        let gq = GradQTable {
            n_params: 1,
            values: vec![3.0, 1.0],
            iterations: 0,
            residual: 0.0,
        };
        let s = grad_log_pi(&gq, &q, 0, &Belief::vertex(1, 0), 0);
        assert!((s[0] - 1.0).abs() < 1e-15);

        let q1 = QTable::zeros(grid, 1, 1);
        let gq1 = GradQTable {
            n_params: 2,
            values: vec![4.0, -2.0],
            iterations: 0,
            residual: 0.0,
        };
        assert_eq!(grad_log_pi(&gq1, &q1, 0, &Belief::vertex(1, 0), 0), vec![0.0, 0.0]);
    }

    /// Central differences of `log π` through a full re-solve of the Bellman
    /// equation.
    #[allow(clippy::too_many_arguments)]
    fn fd_log_pi(m: &PomdpModel, reward: &LinearReward, grid: &Arc<BeliefGrid>, theta: &[f64], z: usize, x: &Belief, a: usize, h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|k| {
                let eval = |d: f64| {
                    let mut t = theta.to_vec();
                    t[k] += d;
                    let mk = m.with_rewards(reward.table(&t)).unwrap();
                    let q = solve(&mk, grid.clone(), 1e-13, 1_000_000).unwrap();
                    ccp(&q, z, x)[a].ln()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn score_matches_finite_differences() {
        let base = random_model(31, 2, 4, 2, 0.9);
        let reward = random_reward(32, 2, 4, 2, 3);
        let grid = Arc::new(BeliefGrid::new(2, 11).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..4 {
            let theta: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = base.with_rewards(reward.table(&theta)).unwrap();
            let q = solve(&m, grid.clone(), 1e-13, 1_000_000).unwrap();
            let gq = grad_q(&m, &reward, &q, 1e-12, 1_000_000).unwrap();
            let x = Belief::normalized(vec![rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0)]);
            let z = rng.gen_range(0..4);
            let a = rng.gen_range(0..2);
            let analytic = grad_log_pi(&gq, &q, z, &x, a);
            let numeric = fd_log_pi(&base, &reward, &grid, &theta, z, &x, a, 1e-5);
            let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-3);
            for (an, nu) in analytic.iter().zip(&numeric) {
                assert!((an - nu).abs() / scale <= 1e-4, "{analytic:?} vs {numeric:?}");
            }

            // score identity
            let pi = ccp(&q, z, &x);
            let mut mean = [0.0; 3];
            for (a2, pa) in pi.iter().enumerate() {
                for (m, s) in mean.iter_mut().zip(grad_log_pi(&gq, &q, z, &x, a2)) {
                    *m += pa * s;
                }
            }
            assert!(mean.iter().all(|v| v.abs() < 1e-10));
        }
    }

    #[test]
    fn gradient_operator_contracts() {
        let m = random_model(51, 2, 3, 2, 0.85);
        let reward = random_reward(52, 2, 3, 2, 2);
        let m = m.with_rewards(reward.table(&[1.0, -1.0])).unwrap();
        let grid = Arc::new(BeliefGrid::new(2, 9).unwrap());
        let q = solve(&m, grid.clone(), 1e-11, 100_000).unwrap();
        let dynamics = BeliefDynamics::new(&m, grid).unwrap();
        let features = reward.node_features(&dynamics);
        let op = GradOperator::new(&dynamics, q.values());
        let mut prev = vec![0.0; features.len()];
        let mut cur = vec![0.0; features.len()];
        op.apply(&features, &prev, &mut cur, 2);
        let mut last_step = crate::bellman::sup_distance(&cur, &prev);
        for _ in 0..40 {
            prev.copy_from_slice(&cur);
            op.apply(&features, &prev, &mut cur, 2);
            let step = crate::bellman::sup_distance(&cur, &prev);
            if last_step > 1e-300 {
                assert!(step / last_step <= 0.85 + 1e-9);
            }
            last_step = step;
        }
        let gq = op.solve(&features, 2, None, 1e-10, 10_000).unwrap();
        let bound = reward.gradient_bound() / (1.0 - 0.85);
        assert!(gq.sup_norm() <= bound + 1e-9);
    }

    #[test]
    fn smoothness_examples() {
        let c = smoothness_constants(1.0, 0.0, 0.95, 1, 1);
        assert!((c.l_q - 15_200.0).abs() < 1e-6);
        assert!((c.l_vbar - 16_000.0).abs() < 1e-6);
        assert!((c.l - 31_200.0).abs() < 1e-6);
        let z = smoothness_constants(0.0, 0.0, 0.95, 10, 10);
        assert_eq!((z.l_q, z.l_vbar, z.l), (0.0, 0.0, 0.0));
        let c = smoothness_constants(0.5, 0.2, 0.9, 3, 4);
        assert!((c.l - 12.0 * (c.l_q + c.l_vbar)).abs() < 1e-9);
    }
}
