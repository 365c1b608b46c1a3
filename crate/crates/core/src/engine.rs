//! Bus-engine replacement model and synthetic data generation.
//!
//! Hidden engine condition `s ∈ {good, bad}`, observed mileage bin `z`
//! (2500-mile bins, saturating at `z_max − 1`) and actions `keep = 0`,
//! `replace = 1`. Mileage increments `Δ ∈ {0, 1, 2, 3}` are drawn from a
//! condition-specific distribution; replacement resets both mileage and
//! condition.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bellman::{softmax_into, QTable};
use crate::error::{Error, Result};
use crate::family::{log_odds_against_last, logit, sigmoid, softmax_with_reference, DynamicsFamily, LinearReward, ModelFamily};
use crate::grid::BeliefGrid;
use crate::model::{Belief, History, PomdpModel};

pub const KEEP: usize = 0;
pub const REPLACE: usize = 1;
pub const N_INCREMENTS: usize = 4;
/// Cost features are scaled by this factor per mileage bin.
pub const COST_SCALE: f64 = 0.001;

pub const DEFAULT_Z_MAX: usize = 200;
pub const DEFAULT_DISCOUNT: f64 = 0.95;

fn default_z_max() -> usize {
    DEFAULT_Z_MAX
}

fn default_discount() -> f64 {
    DEFAULT_DISCOUNT
}

/// Structural parameters of the replacement model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineParams {
    /// Persistence `P(s' = s | s, keep)` of the good and bad condition.
    pub theta2: [f64; 2],
    /// Mileage increment probabilities per condition, `Δ = 0..3`.
    pub theta3: [[f64; N_INCREMENTS]; 2],
    /// Maintenance cost slopes in the good and bad condition.
    pub theta1: [f64; 2],
    /// Replacement cost.
    pub rc: f64,
    #[serde(default = "default_z_max")]
    pub z_max: usize,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

impl EngineParams {
    /// Ground-truth values of the synthetic recovery experiment.
    pub fn reference() -> Self {
        EngineParams {
            theta2: [0.949, 0.988],
            theta3: [[0.039, 0.333, 0.590, 0.038], [0.181, 0.757, 0.061, 0.001]],
            theta1: [0.2, 1.2],
            rc: 9.243,
            z_max: DEFAULT_Z_MAX,
            discount: DEFAULT_DISCOUNT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        for (s, row) in self.theta3.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("theta3 row {s} has an entry outside [0, 1]"));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return bad(format!("theta3 row {s} sums to {total}"));
            }
        }
        if self.theta2.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("theta2 entries must lie in [0, 1]".into());
        }
        if !(self.rc > 0.0) || !self.rc.is_finite() {
            return bad(format!("replacement cost {} must be positive", self.rc));
        }
        if self.theta1.iter().any(|t| !t.is_finite()) {
            return bad("theta1 must be finite".into());
        }
        if self.z_max < 4 {
            return bad(format!("z_max {} must be at least 4", self.z_max));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!("discount {} outside [0, 1)", self.discount));
        }
        Ok(())
    }

    /// `(θ1_good, θ1_bad, RC)`.
    pub fn reward_params(&self) -> Vec<f64> {
        vec![self.theta1[0], self.theta1[1], self.rc]
    }

    /// Dynamics in reporting order: `θ3_{0,0..2}, θ3_{1,0..2}, θ2_0, θ2_1`.
    pub fn dynamics_natural(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(8);
        out.extend_from_slice(&self.theta3[0][..3]);
        out.extend_from_slice(&self.theta3[1][..3]);
        out.extend_from_slice(&self.theta2);
        out
    }

    /// Unconstrained parameters for [`EngineDynamics`]. Requires interior
    /// probabilities.
    pub fn dynamics_params(&self) -> Result<Vec<f64>> {
        let interior = self.theta3.iter().flatten().chain(&self.theta2).all(|&p| p > 0.0 && p < 1.0);
        if !interior {
            return Err(Error::InvalidParams("dynamics must be strictly inside the simplex to reparameterize".into()));
        }
        let mut u = log_odds_against_last(&self.theta3[0]);
        u.extend(log_odds_against_last(&self.theta3[1]));
        u.push(logit(self.theta2[0]));
        u.push(logit(self.theta2[1]));
        Ok(u)
    }

    /// Replaces the dynamics with those encoded by unconstrained `u`.
    pub fn with_dynamics_params(&self, u: &[f64]) -> Self {
        let (theta3, theta2) = decode_engine(u);
        EngineParams {
            theta2,
            theta3,
            ..self.clone()
        }
    }

    pub fn with_reward_params(&self, theta1: &[f64]) -> Self {
        EngineParams {
            theta1: [theta1[0], theta1[1]],
            rc: theta1[2],
            ..self.clone()
        }
    }
}

fn decode_engine(u: &[f64]) -> ([[f64; N_INCREMENTS]; 2], [f64; 2]) {
    let mut theta3 = [[0.0; N_INCREMENTS]; 2];
    for (s, row) in theta3.iter_mut().enumerate() {
        row.copy_from_slice(&softmax_with_reference(&u[3 * s..3 * s + 3]));
    }
    (theta3, [sigmoid(u[6]), sigmoid(u[7])])
}

fn engine_kernel(z_max: usize, theta3: &[[f64; N_INCREMENTS]; 2], theta2: [f64; 2]) -> Vec<f64> {
    let ns = 2;
    let row = z_max * ns;
    let mut kernel = vec![0.0; 2 * z_max * ns * row];
    let hidden = [[theta2[0], 1.0 - theta2[0]], [1.0 - theta2[1], theta2[1]]];
    for z in 0..z_max {
        for s in 0..ns {
            let keep = ((KEEP * z_max + z) * ns + s) * row;
            for (delta, &p) in theta3[s].iter().enumerate() {
                let zn = (z + delta).min(z_max - 1);
                for sn in 0..ns {
                    kernel[keep + zn * ns + sn] += p * hidden[s][sn];
                }
            }
            let replace = ((REPLACE * z_max + z) * ns + s) * row;
            kernel[replace] = 1.0;
        }
    }
    kernel
}

/// Builds the tabular POMDP for `params`.
pub fn build_engine_model(params: &EngineParams) -> Result<PomdpModel> {
    params.validate()?;
    let kernel = engine_kernel(params.z_max, &params.theta3, params.theta2);
    let reward = engine_reward(params.z_max).table(&params.reward_params());
    PomdpModel::new(2, params.z_max, 2, params.discount, kernel, reward)
}

/// Reward `−0.001 θ1_s z` for keeping and `−RC` for replacing.
pub fn engine_reward(z_max: usize) -> LinearReward {
    let (ns, na, p) = (2, 2, 3);
    let mut features = vec![0.0; na * z_max * ns * p];
    for z in 0..z_max {
        for s in 0..ns {
            let keep = ((KEEP * z_max + z) * ns + s) * p;
            features[keep + s] = -COST_SCALE * z as f64;
            let replace = ((REPLACE * z_max + z) * ns + s) * p;
            features[replace + 2] = -1.0;
        }
    }
    let names = vec!["theta1_0".into(), "theta1_1".into(), "rc".into()];
    LinearReward::new(ns, z_max, na, names, features, vec![0.0; na * z_max * ns]).expect("sizes agree")
}

/// Two hidden conditions; parameters are increment log-odds per condition
/// followed by the persistence logits.
#[derive(Debug, Clone)]
pub struct EngineDynamics {
    pub z_max: usize,
}

impl DynamicsFamily for EngineDynamics {
    fn n_states(&self) -> usize {
        2
    }

    fn n_obs(&self) -> usize {
        self.z_max
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn n_params(&self) -> usize {
        8
    }

    fn kernel(&self, params: &[f64]) -> Vec<f64> {
        let (theta3, theta2) = decode_engine(params);
        engine_kernel(self.z_max, &theta3, theta2)
    }

    fn natural(&self, params: &[f64]) -> Vec<f64> {
        let (theta3, theta2) = decode_engine(params);
        let mut out = theta3[0][..3].to_vec();
        out.extend_from_slice(&theta3[1][..3]);
        out.extend_from_slice(&theta2);
        out
    }

    fn natural_names(&self) -> Vec<String> {
        ["theta3_0_0", "theta3_0_1", "theta3_0_2", "theta3_1_0", "theta3_1_1", "theta3_1_2", "theta2_0", "theta2_1"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

pub fn engine_family(z_max: usize, discount: f64) -> ModelFamily {
    ModelFamily {
        dynamics: Arc::new(EngineDynamics { z_max }),
        reward: engine_reward(z_max),
        discount,
    }
}

/// Fully observed mileage model: a single hidden state, so beliefs are
/// trivial and the mileage process is Markov.
#[derive(Debug, Clone)]
pub struct MileageDynamics {
    pub z_max: usize,
}

impl DynamicsFamily for MileageDynamics {
    fn n_states(&self) -> usize {
        1
    }

    fn n_obs(&self) -> usize {
        self.z_max
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn n_params(&self) -> usize {
        3
    }

    fn kernel(&self, params: &[f64]) -> Vec<f64> {
        let probs = softmax_with_reference(params);
        let z_max = self.z_max;
        let mut kernel = vec![0.0; 2 * z_max * z_max];
        for z in 0..z_max {
            let keep = (KEEP * z_max + z) * z_max;
            for (delta, &p) in probs.iter().enumerate() {
                kernel[keep + (z + delta).min(z_max - 1)] += p;
            }
            kernel[(REPLACE * z_max + z) * z_max] = 1.0;
        }
        kernel
    }

    fn natural(&self, params: &[f64]) -> Vec<f64> {
        softmax_with_reference(params)
    }

    fn natural_names(&self) -> Vec<String> {
        (0..N_INCREMENTS).map(|d| format!("theta3_{d}")).collect()
    }
}

/// Reward `−0.001 θ1 z` for keeping and `−RC` for replacing.
pub fn mileage_reward(z_max: usize) -> LinearReward {
    let (na, p) = (2, 2);
    let mut features = vec![0.0; na * z_max * p];
    for z in 0..z_max {
        features[(KEEP * z_max + z) * p] = -COST_SCALE * z as f64;
        features[(REPLACE * z_max + z) * p + 1] = -1.0;
    }
    LinearReward::new(1, z_max, na, vec!["theta1".into(), "rc".into()], features, vec![0.0; na * z_max])
        .expect("sizes agree")
}

pub fn mileage_family(z_max: usize, discount: f64) -> ModelFamily {
    ModelFamily {
        dynamics: Arc::new(MileageDynamics { z_max }),
        reward: mileage_reward(z_max),
        discount,
    }
}

/// How each simulated history draws its prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorPolicy {
    Fixed(Vec<f64>),
    /// Uniform on the simplex (uniform good-state probability for two states).
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_histories: usize,
    pub horizon: usize,
    pub seed: u64,
    #[serde(default = "default_prior")]
    pub prior: PriorPolicy,
    #[serde(default)]
    pub z0: usize,
}

fn default_prior() -> PriorPolicy {
    PriorPolicy::Uniform
}

impl SimConfig {
    pub fn new(n_histories: usize, horizon: usize, seed: u64) -> Self {
        SimConfig {
            n_histories,
            horizon,
            seed,
            prior: PriorPolicy::Uniform,
            z0: 0,
        }
    }

    fn validate(&self, model: &PomdpModel) -> Result<()> {
        if self.n_histories == 0 || self.horizon == 0 {
            return Err(Error::InvalidParams("need at least one history and one period".into()));
        }
        if self.z0 >= model.n_obs() {
            return Err(Error::InvalidParams(format!("z0 = {} out of range", self.z0)));
        }
        if let PriorPolicy::Fixed(p) = &self.prior {
            if p.len() != model.n_states() {
                return Err(Error::InvalidParams("fixed prior has the wrong dimension".into()));
            }
            Belief::new(p.clone())?;
        }
        Ok(())
    }
}

/// A simulated history together with the latent path that produced it.
#[derive(Debug, Clone)]
pub struct SimulatedHistory {
    pub history: History,
    /// `s_0..s_T`
    pub states: Vec<usize>,
    /// `x_0..x_T`
    pub beliefs: Vec<Belief>,
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last category with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn draw_prior<R: Rng>(rng: &mut R, policy: &PriorPolicy, n_states: usize) -> Belief {
    match policy {
        PriorPolicy::Fixed(p) => Belief::normalized(p.clone()),
        PriorPolicy::Uniform if n_states == 2 => {
            let good: f64 = rng.gen();
            Belief::normalized(vec![good, 1.0 - good])
        }
        PriorPolicy::Uniform => Belief::random(rng, n_states),
    }
}

/// Simulates histories from any model whose choices follow the softmax
/// policy of `q`. History `i` uses stream `i` of the master seed, so the
/// output does not depend on the thread count.
pub fn simulate_model(model: &PomdpModel, q: &QTable, sim: &SimConfig) -> Result<Vec<SimulatedHistory>> {
    sim.validate(model)?;
    let (ns, na) = (model.n_states(), model.n_actions());
    let out = (0..sim.n_histories)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
            rng.set_stream(i as u64);
            let x0 = draw_prior(&mut rng, &sim.prior, ns);
            let mut s = sample_index(&mut rng, x0.probs());
            let mut z = sim.z0;
            let mut x = x0.clone();
            let mut obs = vec![z];
            let mut acts = Vec::with_capacity(sim.horizon);
            let mut states = vec![s];
            let mut beliefs = vec![x.clone()];
            let mut pi = vec![0.0; na];
            let mut joint = Vec::new();
            for _ in 0..sim.horizon {
                softmax_into(&q.action_values(z, x.probs()), &mut pi);
                let a = sample_index(&mut rng, &pi);
                joint.clear();
                for &zn in model.successors(z, a) {
                    for sn in 0..ns {
                        joint.push(((zn, sn), model.prob(a, z, s, zn, sn)));
                    }
                }
                let probs: Vec<f64> = joint.iter().map(|(_, p)| *p).collect();
                let (zn, sn) = joint[sample_index(&mut rng, &probs)].0;
                x = model.lambda_update(zn, z, &x, a)?;
                z = zn;
                s = sn;
                obs.push(z);
                acts.push(a);
                states.push(s);
                beliefs.push(x.clone());
            }
            Ok(SimulatedHistory {
                history: History { x0, obs, acts },
                states,
                beliefs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out)
}

/// Solves the engine model at `params` and simulates `sim.n_histories`
/// histories, keeping only the public record.
pub fn simulate(params: &EngineParams, sim: &SimConfig, resolution: usize, tol: f64) -> Result<Vec<History>> {
    Ok(simulate_with_latent(params, sim, resolution, tol)?
        .into_iter()
        .map(|h| h.history)
        .collect())
}

pub fn simulate_with_latent(params: &EngineParams, sim: &SimConfig, resolution: usize, tol: f64) -> Result<Vec<SimulatedHistory>> {
    let model = build_engine_model(params)?;
    let grid = Arc::new(BeliefGrid::new(2, resolution)?);
    let q = crate::bellman::solve(&model, grid, tol, usize::MAX)?;
    simulate_model(&model, &q, sim)
}

/// Writes one JSON object per line: `{"x0": [...], "z": [...], "a": [...]}`.
pub fn write_dataset<W: Write>(dataset: &[History], mut out: W) -> Result<()> {
    for h in dataset {
        serde_json::to_writer(&mut out, h)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_dataset(dataset: &[History], path: &Path) -> Result<()> {
    write_dataset(dataset, BufWriter::new(File::create(path)?))
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<History>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let h: History = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: number,
            message: e.to_string(),
        })?;
        if h.obs.len() != h.acts.len() + 1 {
            return Err(Error::Schema {
                line: number,
                message: format!("{} observations for {} actions", h.obs.len(), h.acts.len()),
            });
        }
        out.push(h);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<History>> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Published log-likelihoods on the real bus data: (POMDP, MDP).
pub const REAL_DATA_LOG_LIKELIHOOD: (f64, f64) = (-3819.0, -4495.0);

/// Loads the real bus histories once they have been binned into the JSON
/// lines format of [`load_dataset`]. The raw odometer records are not shipped
/// and their conversion is not implemented.
pub fn load_real_data(path: &Path) -> Result<Vec<History>> {
    if !path.is_file() {
        return Err(Error::DataUnavailable(format!(
            "{} not found; the bus data must be obtained and binned separately",
            path.display()
        )));
    }
    load_dataset(path)
}

/// Replaces every prior with the single-state belief, as used by the
/// fully observed baseline.
pub fn strip_priors(dataset: &[History]) -> Vec<History> {
    dataset
        .iter()
        .map(|h| History {
            x0: Belief::vertex(1, 0),
            ..h.clone()
        })
        .collect()
}
