//! POMDP model with additive extreme-value reward shocks.
//!
//! The shocks are integrated out analytically, so the model only carries the
//! joint kernel `P(z', s' | z, s, a)`, the state reward `r(z, s, a)` and the
//! discount factor. Everything downstream is expressed through two maps:
//! the observation probability [`PomdpModel::sigma`] and the Bayes filter
//! [`PomdpModel::lambda_update`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Location correction of the standard Gumbel distribution.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Observation probabilities below this are treated as exact zeros.
pub const SIGMA_FLOOR: f64 = 1e-300;

const KERNEL_TOL: f64 = 1e-12;
const BELIEF_TOL: f64 = 1e-9;

/// A point on the probability simplex over hidden states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Belief(Vec<f64>);

impl Belief {
    /// Validates and renormalizes a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidBelief("empty probability vector".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidBelief(format!("entry {p} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > BELIEF_TOL {
            return Err(Error::InvalidBelief(format!("entries sum to {total}")));
        }
        Ok(Self::normalized(probs))
    }

    /// Degenerate belief concentrated on `state`.
    pub fn vertex(n_states: usize, state: usize) -> Self {
        let mut probs = vec![0.0; n_states];
        probs[state] = 1.0;
        Belief(probs)
    }

    pub fn uniform(n_states: usize) -> Self {
        Belief(vec![1.0 / n_states as f64; n_states])
    }

    /// Draw from the flat distribution on the simplex.
    pub fn random<R: rand::Rng + ?Sized>(rng: &mut R, n_states: usize) -> Self {
        let raw = (0..n_states).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        Self::normalized(raw)
    }

    /// Scales a non-negative vector with positive mass onto the simplex.
    pub(crate) fn normalized(mut probs: Vec<f64>) -> Self {
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        Belief(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn n_states(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Belief {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Belief::new(probs)
    }
}

impl From<Belief> for Vec<f64> {
    fn from(b: Belief) -> Self {
        b.0
    }
}

/// One publicly observed trajectory: prior, observations `z_0..z_T` and
/// actions `a_0..a_{T-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub x0: Belief,
    #[serde(rename = "z")]
    pub obs: Vec<usize>,
    #[serde(rename = "a")]
    pub acts: Vec<usize>,
}

impl History {
    pub fn new(x0: Belief, obs: Vec<usize>, acts: Vec<usize>) -> Result<Self> {
        let h = History { x0, obs, acts };
        h.check_shape()?;
        Ok(h)
    }

    /// Number of decision epochs `T`.
    pub fn len(&self) -> usize {
        self.acts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acts.is_empty()
    }

    fn check_shape(&self) -> Result<()> {
        if self.obs.len() != self.acts.len() + 1 {
            return Err(Error::InvalidHistory(format!(
                "{} observations for {} actions",
                self.obs.len(),
                self.acts.len()
            )));
        }
        Ok(())
    }

    /// Checks lengths and index ranges against a model.
    pub fn validate(&self, model: &PomdpModel) -> Result<()> {
        self.check_shape()?;
        if self.x0.n_states() != model.n_states() {
            return Err(Error::InvalidHistory(format!(
                "prior has {} states, model has {}",
                self.x0.n_states(),
                model.n_states()
            )));
        }
        if let Some(z) = self.obs.iter().find(|&&z| z >= model.n_obs()) {
            return Err(Error::InvalidHistory(format!("observation {z} out of range")));
        }
        if let Some(a) = self.acts.iter().find(|&&a| a >= model.n_actions()) {
            return Err(Error::InvalidHistory(format!("action {a} out of range")));
        }
        Ok(())
    }
}

/// Finite POMDP with Gumbel reward shocks.
///
/// `kernel` is stored densely in `[a][z][s][z'][s']` order and `reward` in
/// `[a][z][s]` order. The model is immutable after construction.
#[derive(Debug, Clone)]
pub struct PomdpModel {
    n_states: usize,
    n_obs: usize,
    n_actions: usize,
    discount: f64,
    kernel: Vec<f64>,
    reward: Vec<f64>,
    // z' values reachable with positive probability, per (a, z)
    support: Vec<Vec<usize>>,
}

impl PomdpModel {
    pub fn new(
        n_states: usize,
        n_obs: usize,
        n_actions: usize,
        discount: f64,
        kernel: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_obs == 0 || n_actions == 0 {
            return Err(Error::InvalidModel("all spaces must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidModel(format!("discount {discount} outside [0, 1)")));
        }
        let row = n_obs * n_states;
        let expected = n_actions * n_obs * n_states * row;
        if kernel.len() != expected {
            return Err(Error::InvalidModel(format!(
                "kernel has {} entries, expected {expected}",
                kernel.len()
            )));
        }
        if reward.len() != n_actions * n_obs * n_states {
            return Err(Error::InvalidModel(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                n_actions * n_obs * n_states
            )));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidModel(format!("reward entry {r} is not finite")));
        }
        for (i, chunk) in kernel.chunks(row).enumerate() {
            if chunk.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidModel(format!("kernel row {i} has a negative entry")));
            }
            let total: f64 = chunk.iter().sum();
            if (total - 1.0).abs() > KERNEL_TOL {
                return Err(Error::InvalidModel(format!("kernel row {i} sums to {total}")));
            }
        }

        let mut support = Vec::with_capacity(n_actions * n_obs);
        for a in 0..n_actions {
            for z in 0..n_obs {
                let reachable = (0..n_obs)
                    .filter(|&zn| {
                        (0..n_states).any(|s| {
                            let base = (((a * n_obs + z) * n_states + s) * n_obs + zn) * n_states;
                            kernel[base..base + n_states].iter().any(|&p| p > 0.0)
                        })
                    })
                    .collect();
                support.push(reachable);
            }
        }

        Ok(PomdpModel {
            n_states,
            n_obs,
            n_actions,
            discount,
            kernel,
            reward,
            support,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
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

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// `P(z', s' | z, s, a)`.
    #[inline]
    pub fn prob(&self, a: usize, z: usize, s: usize, z_next: usize, s_next: usize) -> f64 {
        self.kernel[self.block(a, z, s, z_next) + s_next]
    }

    /// Start of the `s'` block for fixed `(a, z, s, z')`.
    #[inline]
    fn block(&self, a: usize, z: usize, s: usize, z_next: usize) -> usize {
        (((a * self.n_obs + z) * self.n_states + s) * self.n_obs + z_next) * self.n_states
    }

    /// `r(z, s, a)` for a hidden state.
    #[inline]
    pub fn reward(&self, z: usize, s: usize, a: usize) -> f64 {
        self.reward[(a * self.n_obs + z) * self.n_states + s]
    }

    /// Observations reachable from `z` under action `a`.
    pub fn successors(&self, z: usize, a: usize) -> &[usize] {
        &self.support[a * self.n_obs + z]
    }

    /// Observation probability `σ(z', z, x, a) = Σ_s Σ_s' x(s) P(z', s' | z, s, a)`.
    pub fn sigma(&self, z_next: usize, z: usize, x: &Belief, a: usize) -> f64 {
        self.sigma_raw(z_next, z, x.probs(), a)
    }

    #[inline]
    pub(crate) fn sigma_raw(&self, z_next: usize, z: usize, x: &[f64], a: usize) -> f64 {
        let mut total = 0.0;
        for (s, &xs) in x.iter().enumerate() {
            if xs == 0.0 {
                continue;
            }
            let base = self.block(a, z, s, z_next);
            let mass: f64 = self.kernel[base..base + self.n_states].iter().sum();
            total += xs * mass;
        }
        total
    }

    /// Writes the unnormalized posterior `x P(z', z, a)` into `out` and
    /// returns its mass, which equals `σ(z', z, x, a)`.
    #[inline]
    pub(crate) fn propagate_raw(
        &self,
        z_next: usize,
        z: usize,
        x: &[f64],
        a: usize,
        out: &mut [f64],
    ) -> f64 {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (s, &xs) in x.iter().enumerate() {
            if xs == 0.0 {
                continue;
            }
            let base = self.block(a, z, s, z_next);
            for (o, &p) in out.iter_mut().zip(&self.kernel[base..base + self.n_states]) {
                *o += xs * p;
            }
        }
        out.iter().sum()
    }

    /// Bayes update `λ(z', z, x, a)`.
    pub fn lambda_update(&self, z_next: usize, z: usize, x: &Belief, a: usize) -> Result<Belief> {
        let mut out = vec![0.0; self.n_states];
        let sigma = self.propagate_raw(z_next, z, x.probs(), a, &mut out);
        if sigma < SIGMA_FLOOR {
            return Err(Error::ZeroObservationProbability {
                step: 0,
                z,
                z_next,
                action: a,
            });
        }
        Ok(Belief::normalized(out))
    }

    /// Expected reward `Σ_s x(s) r(z, s, a)`.
    pub fn expected_reward(&self, z: usize, x: &Belief, a: usize) -> f64 {
        self.expected_reward_raw(z, x.probs(), a)
    }

    #[inline]
    pub(crate) fn expected_reward_raw(&self, z: usize, x: &[f64], a: usize) -> f64 {
        let base = (a * self.n_obs + z) * self.n_states;
        x.iter().zip(&self.reward[base..base + self.n_states]).map(|(p, r)| p * r).sum()
    }

    /// Folds [`Self::lambda_update`] over a window of `M` steps.
    ///
    /// `obs` holds `M + 1` observations starting with the one paired with
    /// `x_start`; `acts` holds the `M` actions in between.
    pub fn apply_lambda_m(&self, obs: &[usize], acts: &[usize], x_start: &Belief) -> Result<Belief> {
        if obs.len() != acts.len() + 1 {
            return Err(Error::InvalidHistory(format!(
                "window has {} observations for {} actions",
                obs.len(),
                acts.len()
            )));
        }
        let mut x = x_start.clone();
        for (step, (pair, &a)) in obs.windows(2).zip(acts).enumerate() {
            x = self.lambda_update(pair[1], pair[0], &x, a).map_err(|e| match e {
                Error::ZeroObservationProbability { z, z_next, action, .. } => {
                    Error::ZeroObservationProbability { step, z, z_next, action }
                }
                other => other,
            })?;
        }
        Ok(x)
    }

    /// Same model with a different reward table.
    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        if reward.len() != self.reward.len() {
            return Err(Error::InvalidModel("reward table has the wrong size".into()));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidModel(format!("reward entry {r} is not finite")));
        }
        Ok(PomdpModel { reward, ..self.clone() })
    }

    /// True when `P(·|z, s, a)` does not depend on `s` for every `(z, a)`.
    pub fn is_rank_one(&self) -> bool {
        let row = self.n_obs * self.n_states;
        (0..self.n_actions).all(|a| {
            (0..self.n_obs).all(|z| {
                let first = self.block(a, z, 0, 0);
                (1..self.n_states).all(|s| {
                    let other = self.block(a, z, s, 0);
                    (0..row).all(|k| (self.kernel[first + k] - self.kernel[other + k]).abs() <= KERNEL_TOL)
                })
            })
        })
    }

    pub fn to_file(&self) -> ModelFile {
        let (ns, nz, na) = (self.n_states, self.n_obs, self.n_actions);
        let kernel = (0..na)
            .map(|a| {
                (0..nz)
                    .map(|z| {
                        (0..ns)
                            .map(|s| {
                                (0..nz)
                                    .map(|zn| (0..ns).map(|sn| self.prob(a, z, s, zn, sn)).collect())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let reward = (0..na)
            .map(|a| (0..nz).map(|z| (0..ns).map(|s| self.reward(z, s, a)).collect()).collect())
            .collect();
        ModelFile {
            n_states: ns,
            n_obs: nz,
            n_actions: na,
            discount: self.discount,
            kernel,
            reward,
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_file()).expect("model file serializes");
        hex_digest(&bytes)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// On-disk JSON layout of a tabular model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub n_states: usize,
    pub n_obs: usize,
    pub n_actions: usize,
    pub discount: f64,
    /// `[a][z][s][z'][s']`
    pub kernel: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `[a][z][s]`
    pub reward: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<ModelFile> for PomdpModel {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        let (ns, nz, na) = (file.n_states, file.n_obs, file.n_actions);
        let shape_err = |what: &str| Error::InvalidModel(format!("{what} does not match declared sizes"));
        if file.kernel.len() != na || file.reward.len() != na {
            return Err(shape_err("action dimension"));
        }
        let mut kernel = Vec::with_capacity(na * nz * ns * nz * ns);
        for by_z in &file.kernel {
            if by_z.len() != nz {
                return Err(shape_err("kernel z dimension"));
            }
            for by_s in by_z {
                if by_s.len() != ns {
                    return Err(shape_err("kernel s dimension"));
                }
                for by_zn in by_s {
                    if by_zn.len() != nz {
                        return Err(shape_err("kernel z' dimension"));
                    }
                    for by_sn in by_zn {
                        if by_sn.len() != ns {
                            return Err(shape_err("kernel s' dimension"));
                        }
                        kernel.extend_from_slice(by_sn);
                    }
                }
            }
        }
        let mut reward = Vec::with_capacity(na * nz * ns);
        for by_z in &file.reward {
            if by_z.len() != nz {
                return Err(shape_err("reward z dimension"));
            }
            for by_s in by_z {
                if by_s.len() != ns {
                    return Err(shape_err("reward s dimension"));
                }
                reward.extend_from_slice(by_s);
            }
        }
        PomdpModel::new(ns, nz, na, file.discount, kernel, reward)
    }
}
