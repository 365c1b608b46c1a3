//! Soft Bellman fixed point on the belief lattice.
//!
//! `[HQ](z, x, a) = r(z, x, a) + β Σ_{z'} σ(z', z, x, a) V̄(z', λ(z', z, x, a))`
//! with `V̄(z, x) = γ + log Σ_a exp Q(z, x, a)`. `Q` is tabulated at lattice
//! nodes and interpolated everywhere else; successor beliefs and their
//! interpolation stencils are precomputed once per kernel in
//! [`BeliefDynamics`], so repeated solves with different rewards only redo
//! the sweeps.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BeliefGrid, Stencil};
use crate::model::{Belief, PomdpModel, EULER_GAMMA, SIGMA_FLOOR};

/// Default sup-norm tolerance on the Bellman residual.
pub const DEFAULT_TOL: f64 = 1e-9;
/// Default number of lattice nodes per simplex edge.
/// Lattice nodes per parallel task inside one observation block.
const NODE_CHUNK: usize = 16;
pub(crate) const INNER_MAX: usize = 10_000;

pub const DEFAULT_RESOLUTION: usize = 101;

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax of `xs` written into `out`.
pub fn softmax_into(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Tabulated soft action values `Q(z, node, a)`.
#[derive(Debug, Clone)]
pub struct QTable {
    grid: Arc<BeliefGrid>,
    n_obs: usize,
    n_actions: usize,
    values: Vec<f64>,
    iterations: usize,
    residual: f64,
    model_hash: Option<String>,
}

impl QTable {
    pub fn zeros(grid: Arc<BeliefGrid>, n_obs: usize, n_actions: usize) -> Self {
        let len = n_obs * grid.len() * n_actions;
        Self::from_values(grid, n_obs, n_actions, vec![0.0; len]).expect("sizes agree")
    }

    /// Wraps a flat `[z][node][a]` value vector.
    pub fn from_values(grid: Arc<BeliefGrid>, n_obs: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_obs * grid.len() * n_actions {
            return Err(Error::InvalidParams(format!(
                "{} values for a {}x{}x{} table",
                values.len(),
                n_obs,
                grid.len(),
                n_actions
            )));
        }
        Ok(QTable {
            grid,
            n_obs,
            n_actions,
            values,
            iterations: 0,
            residual: f64::NAN,
            model_hash: None,
        })
    }

    pub fn grid(&self) -> &Arc<BeliefGrid> {
        &self.grid
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub(crate) fn set_diagnostics(&mut self, iterations: usize, residual: f64) {
        self.iterations = iterations;
        self.residual = residual;
    }

    /// Sweeps performed by the solver that produced this table.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Sup-norm bound on `HQ - Q` reported by the solver.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    #[inline]
    pub fn get(&self, z: usize, node: usize, a: usize) -> f64 {
        self.values[(z * self.grid.len() + node) * self.n_actions + a]
    }

    /// Action values at an arbitrary belief.
    pub fn action_values(&self, z: usize, x: &[f64]) -> Vec<f64> {
        let stencil = self.grid.stencil(x);
        self.action_values_at(z, &stencil)
    }

    pub fn action_values_at(&self, z: usize, stencil: &Stencil) -> Vec<f64> {
        let mut out = vec![0.0; self.n_actions];
        interpolate_row(&self.values, self.grid.len(), self.n_actions, z, stencil, &mut out);
        out
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        sup_distance(&self.values, &other.values)
    }

    pub fn to_file(&self) -> QTableFile {
        let nn = self.grid.len();
        let values = (0..self.n_obs)
            .map(|z| {
                (0..nn)
                    .map(|k| (0..self.n_actions).map(|a| self.get(z, k, a)).collect())
                    .collect()
            })
            .collect();
        QTableFile {
            n_states: self.grid.n_states(),
            resolution: self.grid.resolution(),
            n_obs: self.n_obs,
            n_actions: self.n_actions,
            model_hash: self.model_hash.clone().unwrap_or_default(),
            iterations: self.iterations,
            residual: self.residual,
            values,
        }
    }

    pub fn from_file(file: QTableFile) -> Result<Self> {
        let grid = Arc::new(BeliefGrid::new(file.n_states, file.resolution)?);
        let nn = grid.len();
        if file.values.len() != file.n_obs
            || file.values.iter().any(|r| r.len() != nn || r.iter().any(|c| c.len() != file.n_actions))
        {
            return Err(Error::InvalidParams("Q table values do not match declared sizes".into()));
        }
        let values = file.values.into_iter().flatten().flatten().collect();
        let mut q = QTable::from_values(grid, file.n_obs, file.n_actions, values)?;
        q.iterations = file.iterations;
        q.residual = file.residual;
        q.model_hash = Some(file.model_hash).filter(|h| !h.is_empty());
        Ok(q)
    }

    pub fn model_hash(&self) -> Option<&str> {
        self.model_hash.as_deref()
    }
}

/// JSON layout of a solved table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QTableFile {
    pub n_states: usize,
    pub resolution: usize,
    pub n_obs: usize,
    pub n_actions: usize,
    pub model_hash: String,
    pub iterations: usize,
    pub residual: f64,
    /// `[z][node][a]`
    pub values: Vec<Vec<Vec<f64>>>,
}

#[inline]
pub(crate) fn interpolate_row(values: &[f64], n_nodes: usize, n_actions: usize, z: usize, stencil: &Stencil, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for &(k, w) in stencil {
        let base = (z * n_nodes + k) * n_actions;
        for (o, q) in out.iter_mut().zip(&values[base..base + n_actions]) {
            *o += w * q;
        }
    }
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `V̄(z, x) = γ + logsumexp_a Q(z, x, a)`.
pub fn soft_value(q: &QTable, z: usize, x: &Belief) -> f64 {
    EULER_GAMMA + log_sum_exp(&q.action_values(z, x.probs()))
}

/// Conditional choice probabilities `π(· | z, x)`.
pub fn ccp(q: &QTable, z: usize, x: &Belief) -> Vec<f64> {
    let row = q.action_values(z, x.probs());
    let mut out = vec![0.0; row.len()];
    softmax_into(&row, &mut out);
    out
}

/// Kernel-dependent part of the Bellman operator on a fixed lattice: for every
/// `(z, node, a)` the reachable `z'`, `σ(z', z, x_node, a)` and the stencil of
/// `λ(z', z, x_node, a)`.
#[derive(Debug, Clone)]
pub struct BeliefDynamics {
    grid: Arc<BeliefGrid>,
    n_obs: usize,
    n_actions: usize,
    discount: f64,
    cell_start: Vec<usize>,
    succ_obs: Vec<usize>,
    succ_sigma: Vec<f64>,
    stencil_start: Vec<usize>,
    stencil_node: Vec<usize>,
    stencil_weight: Vec<f64>,
}

impl BeliefDynamics {
    pub fn new(model: &PomdpModel, grid: Arc<BeliefGrid>) -> Result<Self> {
        if grid.n_states() != model.n_states() {
            return Err(Error::InvalidParams(format!(
                "grid over {} states used with a {}-state model",
                grid.n_states(),
                model.n_states()
            )));
        }
        let (nz, nn, na, ns) = (model.n_obs(), grid.len(), model.n_actions(), model.n_states());

        struct Cell {
            succ: Vec<(usize, f64, Stencil)>,
        }
        let cells: Vec<Cell> = (0..nz * nn * na)
            .into_par_iter()
            .map(|c| {
                let a = c % na;
                let node = (c / na) % nn;
                let z = c / (na * nn);
                let x = grid.node(node).probs();
                let mut post = vec![0.0; ns];
                let succ = model
                    .successors(z, a)
                    .iter()
                    .filter_map(|&zn| {
                        let sigma = model.propagate_raw(zn, z, x, a, &mut post);
                        if sigma < SIGMA_FLOOR {
                            return None;
                        }
                        let normalized: Vec<f64> = post.iter().map(|p| p / sigma).collect();
                        Some((zn, sigma, grid.stencil(&normalized)))
                    })
                    .collect();
                Cell { succ }
            })
            .collect();

        let mut dynamics = BeliefDynamics {
            grid,
            n_obs: nz,
            n_actions: na,
            discount: model.discount(),
            cell_start: Vec::with_capacity(cells.len() + 1),
            succ_obs: Vec::new(),
            succ_sigma: Vec::new(),
            stencil_start: Vec::new(),
            stencil_node: Vec::new(),
            stencil_weight: Vec::new(),
        };
        dynamics.cell_start.push(0);
        dynamics.stencil_start.push(0);
        for cell in cells {
            for (zn, sigma, stencil) in cell.succ {
                dynamics.succ_obs.push(zn);
                dynamics.succ_sigma.push(sigma);
                for (k, w) in stencil {
                    dynamics.stencil_node.push(k);
                    dynamics.stencil_weight.push(w);
                }
                dynamics.stencil_start.push(dynamics.stencil_node.len());
            }
            dynamics.cell_start.push(dynamics.succ_obs.len());
        }
        Ok(dynamics)
    }

    pub fn grid(&self) -> &Arc<BeliefGrid> {
        &self.grid
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn n_cells(&self) -> usize {
        self.cell_start.len() - 1
    }

    /// `r(z, x_node, a)` for every cell.
    pub fn node_rewards(&self, model: &PomdpModel) -> Vec<f64> {
        let (nn, na) = (self.grid.len(), self.n_actions);
        (0..self.n_cells())
            .map(|c| {
                let (z, node, a) = (c / (na * nn), (c / na) % nn, c % na);
                model.expected_reward_raw(z, self.grid.node(node).probs(), a)
            })
            .collect()
    }

    pub(crate) fn n_successors(&self) -> usize {
        self.succ_obs.len()
    }

    /// Successor slots `j` belonging to cell `c`.
    #[inline]
    pub(crate) fn successor_range(&self, c: usize) -> std::ops::Range<usize> {
        self.cell_start[c]..self.cell_start[c + 1]
    }

    /// `(z', σ, stencil nodes, stencil weights)` of successor slot `j`.
    #[inline]
    pub(crate) fn successor(&self, j: usize) -> (usize, f64, &[usize], &[f64]) {
        let range = self.stencil_start[j]..self.stencil_start[j + 1];
        (
            self.succ_obs[j],
            self.succ_sigma[j],
            &self.stencil_node[range.clone()],
            &self.stencil_weight[range],
        )
    }

    /// `out[i] = (H values)(first + i)` for a run of consecutive cells.
    fn apply_cells(&self, rewards: &[f64], values: &[f64], first: usize, out: &mut [f64]) {
        let (nn, na) = (self.grid.len(), self.n_actions);
        let beta = self.discount;
        let mut row = vec![0.0; na];
        for (local, slot) in out.iter_mut().enumerate() {
            let c = first + local;
            let mut cont = 0.0;
            if beta > 0.0 {
                for j in self.successor_range(c) {
                    let (zn, sigma, nodes, weights) = self.successor(j);
                    row.iter_mut().for_each(|r| *r = 0.0);
                    for (&k, &w) in nodes.iter().zip(weights) {
                        let base = (zn * nn + k) * na;
                        for (r, q) in row.iter_mut().zip(&values[base..base + na]) {
                            *r += w * q;
                        }
                    }
                    cont += sigma * (EULER_GAMMA + log_sum_exp(&row));
                }
            }
            *slot = rewards[c] + beta * cont;
        }
    }

    /// One sweep `out = H(values)` for the given cell rewards.
    pub fn apply(&self, rewards: &[f64], values: &[f64], out: &mut [f64]) {
        let block = self.grid.len() * self.n_actions;
        out.par_chunks_mut(block)
            .enumerate()
            .for_each(|(z, chunk)| self.apply_cells(rewards, values, z * block, chunk));
    }

    /// In-place sweep over observation blocks from the highest index down,
    /// each block reading the already updated ones and iterated until its own
    /// change drops to `inner_tol` (or `INNER_MAX` passes). Returns the
    /// largest change of the sweep.
    fn gauss_seidel_sweep(&self, rewards: &[f64], values: &mut [f64], scratch: &mut [f64], inner_tol: f64) -> f64 {
        let block = self.grid.len() * self.n_actions;
        let chunk = self.n_actions * NODE_CHUNK;
        let mut step: f64 = 0.0;
        for z in (0..self.n_obs).rev() {
            let range = z * block..(z + 1) * block;
            let before = values[range.clone()].to_vec();
            for _ in 0..INNER_MAX {
                let snapshot: &[f64] = values;
                scratch[..block]
                    .par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, out)| self.apply_cells(rewards, snapshot, range.start + i * chunk, out));
                let inner = sup_distance(&scratch[..block], &values[range.clone()]);
                values[range.clone()].copy_from_slice(&scratch[..block]);
                if inner <= inner_tol {
                    break;
                }
            }
            step = step.max(sup_distance(&before, &values[range]));
        }
        step
    }

    /// Iterates from `init` (zeros when absent) until the returned table is
    /// within `tol` of its image under `H`.
    ///
    /// Sweeps are block Gauss-Seidel over observations in descending order,
    /// which is still a `β`-contraction and needs only a handful of sweeps
    /// when observations mostly move upward (mileage). Each block is
    /// iterated on its own first, so self-loops such as a saturating top
    /// bin do not slow the sweep count. Once a sweep moves
    /// less than `tol / β`, a plain step `Q_{k+1} = HQ_k` is taken and the
    /// table is returned if `β‖Q_{k+1} − Q_k‖∞ ≤ tol`, which bounds
    /// `‖HQ_{k+1} − Q_{k+1}‖∞`. Every sweep counts towards `max_iter`.
    pub fn solve(&self, rewards: &[f64], init: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, usize, f64)> {
        if tol <= 0.0 || tol.is_nan() {
            return Err(Error::InvalidParams(format!("tolerance {tol} must be positive")));
        }
        let mut current = match init {
            Some(v) => v.to_vec(),
            None => vec![0.0; rewards.len()],
        };
        let mut next = vec![0.0; current.len()];
        let beta = self.discount;
        let mut residual = f64::INFINITY;
        let mut iter = 0;
        let multi = self.n_obs > 1 && beta > 0.0;
        let mut gauss_seidel = multi;
        while iter < max_iter {
            iter += 1;
            if gauss_seidel {
                let step = self.gauss_seidel_sweep(rewards, &mut current, &mut next, tol);
                residual = beta * step;
                gauss_seidel = residual > tol;
                continue;
            }
            self.apply(rewards, &current, &mut next);
            let step = sup_distance(&next, &current);
            std::mem::swap(&mut current, &mut next);
            residual = beta * step;
            if residual <= tol {
                return Ok((current, iter, residual));
            }
            gauss_seidel = multi;
        }
        Err(Error::MaxIterExceeded {
            iterations: max_iter,
            residual,
        })
    }
}

/// A-priori sweep count from `Q₀ = 0`:
/// `⌈log(tol(1−β)/‖HQ₀−Q₀‖∞)/log β⌉`.
pub fn iteration_bound(discount: f64, tol: f64, initial_residual: f64) -> usize {
    if discount == 0.0 || initial_residual <= tol * (1.0 - discount) {
        return 1;
    }
    ((tol * (1.0 - discount) / initial_residual).ln() / discount.ln()).ceil() as usize + 1
}

/// Applies the soft Bellman operator once.
pub fn bellman_apply(q: &QTable, model: &PomdpModel) -> Result<QTable> {
    check_shapes(q, model)?;
    let dynamics = BeliefDynamics::new(model, q.grid.clone())?;
    let rewards = dynamics.node_rewards(model);
    let mut out = vec![0.0; q.values.len()];
    dynamics.apply(&rewards, &q.values, &mut out);
    QTable::from_values(q.grid.clone(), q.n_obs, q.n_actions, out)
}

fn check_shapes(q: &QTable, model: &PomdpModel) -> Result<()> {
    if q.n_obs != model.n_obs() || q.n_actions != model.n_actions() || q.grid.n_states() != model.n_states() {
        return Err(Error::InvalidParams("Q table shape does not match model".into()));
    }
    Ok(())
}

/// Solves `Q = HQ` from `Q₀ = 0` by successive approximation.
pub fn solve(model: &PomdpModel, grid: Arc<BeliefGrid>, tol: f64, max_iter: usize) -> Result<QTable> {
    let dynamics = BeliefDynamics::new(model, grid.clone())?;
    let rewards = dynamics.node_rewards(model);
    let (values, iterations, residual) = dynamics.solve(&rewards, None, tol, max_iter)?;
    let mut q = QTable::from_values(grid, model.n_obs(), model.n_actions(), values)?;
    q.iterations = iterations;
    q.residual = residual;
    q.model_hash = Some(model.content_hash());
    Ok(q)
}

/// Backward induction `Q_t = H Q_{t+1}` from `terminal_q = Q_horizon`.
/// Returns `Q_0, …, Q_horizon`.
pub fn finite_horizon_solve(model: &PomdpModel, horizon: usize, terminal_q: &QTable) -> Result<Vec<QTable>> {
    if horizon == 0 {
        return Err(Error::InvalidParams("horizon must be at least 1".into()));
    }
    check_shapes(terminal_q, model)?;
    let dynamics = BeliefDynamics::new(model, terminal_q.grid.clone())?;
    let rewards = dynamics.node_rewards(model);
    let mut seq = vec![terminal_q.values.clone()];
    for _ in 0..horizon {
        let mut out = vec![0.0; rewards.len()];
        dynamics.apply(&rewards, seq.last().expect("non-empty"), &mut out);
        seq.push(out);
    }
    seq.reverse();
    seq.into_iter()
        .map(|v| QTable::from_values(terminal_q.grid.clone(), model.n_obs(), model.n_actions(), v))
        .collect()
}
