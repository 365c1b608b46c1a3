//! Parametric model families: rewards linear in `θ1`, dynamics given by an
//! unconstrained parameterization of `θ2`.

use std::fmt::Debug;
use std::sync::Arc;

use crate::bellman::BeliefDynamics;
use crate::error::{Error, Result};
use crate::model::PomdpModel;

/// `r(z, s, a) = offset(z, s, a) + φ(z, s, a)ᵀ θ1`.
#[derive(Debug, Clone)]
pub struct LinearReward {
    n_states: usize,
    n_obs: usize,
    n_params: usize,
    /// `[a][z][s][k]`
    features: Vec<f64>,
    /// `[a][z][s]`
    offset: Vec<f64>,
    names: Vec<String>,
}

impl LinearReward {
    pub fn new(
        n_states: usize,
        n_obs: usize,
        n_actions: usize,
        names: Vec<String>,
        features: Vec<f64>,
        offset: Vec<f64>,
    ) -> Result<Self> {
        let cells = n_states * n_obs * n_actions;
        let n_params = names.len();
        if features.len() != cells * n_params || offset.len() != cells {
            return Err(Error::InvalidParams("reward feature tensor has the wrong size".into()));
        }
        Ok(LinearReward {
            n_states,
            n_obs,
            n_params,
            features,
            offset,
            names,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    #[inline]
    pub fn feature(&self, z: usize, s: usize, a: usize) -> &[f64] {
        let base = ((a * self.n_obs + z) * self.n_states + s) * self.n_params;
        &self.features[base..base + self.n_params]
    }

    /// Reward table in `[a][z][s]` order.
    pub fn table(&self, theta1: &[f64]) -> Vec<f64> {
        assert_eq!(theta1.len(), self.n_params, "θ1 has the wrong length");
        self.offset
            .iter()
            .enumerate()
            .map(|(cell, off)| {
                let phi = &self.features[cell * self.n_params..(cell + 1) * self.n_params];
                off + phi.iter().zip(theta1).map(|(f, t)| f * t).sum::<f64>()
            })
            .collect()
    }

    /// `sup ‖∇θ1 r(z, x, a)‖₂`. The gradient is affine in `x`, so the
    /// supremum over the simplex is attained at a vertex.
    pub fn gradient_bound(&self) -> f64 {
        self.features
            .chunks(self.n_params.max(1))
            .map(|phi| phi.iter().map(|f| f * f).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// `∇θ1 r(z, x_node, a)` for every lattice cell, flattened `[cell][k]`.
    pub fn node_features(&self, dynamics: &BeliefDynamics) -> Vec<f64> {
        let grid = dynamics.grid();
        let (nn, na, p) = (grid.len(), dynamics.n_actions(), self.n_params);
        let mut out = vec![0.0; dynamics.n_cells() * p];
        for (c, slot) in out.chunks_mut(p.max(1)).enumerate().take(dynamics.n_cells()) {
            let (z, node, a) = (c / (na * nn), (c / na) % nn, c % na);
            for (s, &xs) in grid.node(node).probs().iter().enumerate() {
                for (o, f) in slot.iter_mut().zip(self.feature(z, s, a)) {
                    *o += xs * f;
                }
            }
        }
        out
    }
}

/// Hidden-state dynamics `P_θ2(z', s' | z, s, a)` over unconstrained
/// parameters.
pub trait DynamicsFamily: Send + Sync + Debug {
    fn n_states(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn n_params(&self) -> usize;

    /// Dense kernel in `[a][z][s][z'][s']` order.
    fn kernel(&self, params: &[f64]) -> Vec<f64>;

    /// Interpretable probabilities reported for `params`.
    fn natural(&self, params: &[f64]) -> Vec<f64>;

    fn natural_names(&self) -> Vec<String>;

    /// Starting point with uniform probability rows.
    fn initial_params(&self) -> Vec<f64> {
        vec![0.0; self.n_params()]
    }
}

#[derive(Debug, Clone)]
pub struct ModelFamily {
    pub dynamics: Arc<dyn DynamicsFamily>,
    pub reward: LinearReward,
    pub discount: f64,
}

impl ModelFamily {
    pub fn n_states(&self) -> usize {
        self.dynamics.n_states()
    }

    pub fn model(&self, theta1: &[f64], theta2: &[f64]) -> Result<PomdpModel> {
        let d = &self.dynamics;
        PomdpModel::new(
            d.n_states(),
            d.n_obs(),
            d.n_actions(),
            self.discount,
            d.kernel(theta2),
            self.reward.table(theta1),
        )
    }

    /// Model with zero rewards; enough for filtering.
    pub fn kernel_model(&self, theta2: &[f64]) -> Result<PomdpModel> {
        self.model(&vec![0.0; self.reward.n_params()], theta2)
    }
}

/// Numerically stable `log(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Probability vector from log-odds against the last category.
pub fn softmax_with_reference(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(0.0, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|u| (u - max).exp()).collect();
    out.push((-max).exp());
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Inverse of [`softmax_with_reference`]; entries must be positive.
pub fn log_odds_against_last(probs: &[f64]) -> Vec<f64> {
    let last = *probs.last().expect("non-empty probability vector");
    probs[..probs.len() - 1].iter().map(|p| (p / last).ln()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reparameterizations_invert() {
        let p = [0.039, 0.333, 0.590, 0.038];
        let back = softmax_with_reference(&log_odds_against_last(&p));
        for (a, b) in p.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!((sigmoid(logit(0.949)) - 0.949).abs() < 1e-14);
        assert_eq!(softmax_with_reference(&[0.0, 0.0, 0.0]), vec![0.25; 4]);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn linear_reward_table_and_bound() {
        // one state, two obs, one action, two params
        let r = LinearReward::new(1, 2, 1, vec!["a".into(), "b".into()], vec![1.0, 0.0, 3.0, 4.0], vec![0.5, 0.0])
            .unwrap();
        assert_eq!(r.table(&[2.0, 1.0]), vec![2.5, 10.0]);
        assert_eq!(r.gradient_bound(), 5.0);
    }
}
