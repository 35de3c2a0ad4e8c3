//! Feed-forward pump policy with hand-written reverse mode.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::controllers::{MlPolicy, PolicyInput};
use crate::error::{LaocError, Result};
use crate::model::{Episode, SystemParams};

pub const N_FEATURES: usize = 7;
pub const HIDDEN: usize = 12;
pub const N_PARAMS: usize = HIDDEN * N_FEATURES + HIDDEN + HIDDEN * HIDDEN + HIDDEN + HIDDEN + 1;

const W1: usize = 0;
const B1: usize = W1 + HIDDEN * N_FEATURES;
const W2: usize = B1 + HIDDEN;
const B2: usize = W2 + HIDDEN * HIDDEN;
const W3: usize = B2 + HIDDEN;
const B3: usize = W3 + HIDDEN;

/// Scales applied to the raw context before it enters the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub e_ref: f64,
    pub p_ref: f64,
    pub w_ref: f64,
    /// Length of the trailing demand window, hours.
    pub demand_window: usize,
}

impl Default for Normalizers {
    fn default() -> Self {
        Self { e_ref: 300.0, p_ref: 0.09, w_ref: 3.0, demand_window: 8 }
    }
}

impl Normalizers {
    /// Means over the training set; zero means fall back to 1.
    pub fn from_episodes(episodes: &[Episode]) -> Self {
        let n = episodes.iter().map(|e| e.steps.len()).sum::<usize>().max(1) as f64;
        let mean = |f: fn(&crate::model::TraceStep) -> f64| {
            let m = episodes.iter().flat_map(|e| e.steps.iter()).map(f).sum::<f64>() / n;
            if m > 0.0 {
                m
            } else {
                1.0
            }
        };
        Self { e_ref: mean(|s| s.carbon_intensity), p_ref: mean(|s| s.price), w_ref: mean(|s| s.demand), demand_window: 8 }
    }
}

/// Causal input features at round `h` and level `x`.
pub fn features(params: &SystemParams, norm: &Normalizers, episode: &Episode, h: usize, x: f64) -> [f64; N_FEATURES] {
    let step = &episode.steps[h];
    let phase = 2.0 * PI * (h % 24) as f64 / 24.0;
    let start = h.saturating_sub(norm.demand_window);
    let trailing = if h == 0 {
        1.0
    } else {
        let past = &episode.steps[start..h];
        past.iter().map(|s| s.demand).sum::<f64>() / past.len() as f64 / norm.w_ref
    };
    [
        x / params.tank_capacity,
        phase.sin(),
        phase.cos(),
        step.carbon_intensity / norm.e_ref,
        step.price / norm.p_ref,
        trailing,
        h as f64 / episode.horizon() as f64,
    ]
}

/// Derivative of the feature vector with respect to the level.
pub fn feature_level_slope(params: &SystemParams) -> f64 {
    1.0 / params.tank_capacity
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: [f64; N_FEATURES],
    a1: [f64; HIDDEN],
    a2: [f64; HIDDEN],
    sigmoid: f64,
    pub output: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub theta: Vec<f64>,
    pub normalizers: Normalizers,
}

impl PolicyNet {
    pub fn zeros(normalizers: Normalizers) -> Self {
        Self { theta: vec![0.0; N_PARAMS], normalizers }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(seed: u64, normalizers: Normalizers) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; N_PARAMS];
        for (offset, fan_in, fan_out) in [(W1, N_FEATURES, HIDDEN), (W2, HIDDEN, HIDDEN), (W3, HIDDEN, 1)] {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut theta[offset..offset + fan_in * fan_out] {
                *w = dist.sample(&mut rng);
            }
        }
        Self { theta, normalizers }
    }

    pub fn forward(&self, u_max: f64, input: &[f64; N_FEATURES]) -> Result<f64> {
        if let Some(v) = input.iter().find(|v| !v.is_finite()) {
            return Err(LaocError::InvalidInput(format!("non-finite policy feature {v}")));
        }
        Ok(self.forward_cached(u_max, input).output)
    }

    pub fn forward_cached(&self, u_max: f64, input: &[f64; N_FEATURES]) -> ForwardCache {
        let t = &self.theta;
        let mut a1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            let row = &t[W1 + i * N_FEATURES..W1 + (i + 1) * N_FEATURES];
            let z: f64 = row.iter().zip(input).map(|(w, f)| w * f).sum::<f64>() + t[B1 + i];
            a1[i] = z.tanh();
        }
        let mut a2 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            let row = &t[W2 + i * HIDDEN..W2 + (i + 1) * HIDDEN];
            let z: f64 = row.iter().zip(&a1).map(|(w, a)| w * a).sum::<f64>() + t[B2 + i];
            a2[i] = z.tanh();
        }
        let z3: f64 = t[W3..W3 + HIDDEN].iter().zip(&a2).map(|(w, a)| w * a).sum::<f64>() + t[B3];
        let sigmoid = 1.0 / (1.0 + (-z3).exp());
        ForwardCache { input: *input, a1, a2, sigmoid, output: u_max * sigmoid }
    }

    /// Accumulate `d_out · ∂u/∂θ` into `grad` and return `d_out · ∂u/∂input`.
    pub fn backward(&self, u_max: f64, cache: &ForwardCache, d_out: f64, grad: &mut [f64]) -> [f64; N_FEATURES] {
        let t = &self.theta;
        let dz3 = d_out * u_max * cache.sigmoid * (1.0 - cache.sigmoid);
        let mut dz2 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            grad[W3 + i] += dz3 * cache.a2[i];
            dz2[i] = dz3 * t[W3 + i] * (1.0 - cache.a2[i] * cache.a2[i]);
        }
        grad[B3] += dz3;
        let mut da1 = [0.0; HIDDEN];
        for i in 0..HIDDEN {
            grad[B2 + i] += dz2[i];
            for j in 0..HIDDEN {
                grad[W2 + i * HIDDEN + j] += dz2[i] * cache.a1[j];
                da1[j] += dz2[i] * t[W2 + i * HIDDEN + j];
            }
        }
        let mut d_input = [0.0; N_FEATURES];
        for i in 0..HIDDEN {
            let dz1 = da1[i] * (1.0 - cache.a1[i] * cache.a1[i]);
            grad[B1 + i] += dz1;
            for j in 0..N_FEATURES {
                grad[W1 + i * N_FEATURES + j] += dz1 * cache.input[j];
                d_input[j] += dz1 * t[W1 + i * N_FEATURES + j];
            }
        }
        d_input
    }
}

impl MlPolicy for PolicyNet {
    fn act(&self, params: &SystemParams, input: &PolicyInput) -> f64 {
        let f = features(params, &self.normalizers, input.episode, input.h, input.x);
        self.forward_cached(params.u_max, &f).output
    }
}

/// Layer shapes recorded next to θ.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    pub activation: String,
    pub output_squash: String,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { inputs: N_FEATURES, hidden: vec![HIDDEN, HIDDEN], outputs: 1, activation: "tanh".into(), output_squash: "scaled_logistic".into() }
    }
}

/// How a policy was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHeader {
    pub mode: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: Option<f64>,
    pub prior: Option<String>,
    pub loss_curve: Vec<f64>,
}

pub const POLICY_FORMAT_VERSION: u32 = 1;

/// On-disk policy: header plus flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub format_version: u32,
    pub architecture: Architecture,
    pub n_params: usize,
    pub training: TrainingHeader,
    pub system: SystemParams,
    pub policy: PolicyNet,
}

impl PolicyFile {
    pub fn new(policy: PolicyNet, system: SystemParams, training: TrainingHeader) -> Self {
        Self { format_version: POLICY_FORMAT_VERSION, architecture: Architecture::default(), n_params: policy.theta.len(), training, system, policy }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != POLICY_FORMAT_VERSION {
            return Err(LaocError::InvalidInput(format!("unsupported policy format version {}", self.format_version)));
        }
        if self.architecture != Architecture::default() {
            return Err(LaocError::InvalidInput(format!("unsupported architecture {:?}", self.architecture)));
        }
        if self.n_params != N_PARAMS || self.policy.theta.len() != N_PARAMS {
            return Err(LaocError::InvalidInput(format!(
                "expected {N_PARAMS} parameters, header says {} and vector has {}",
                self.n_params,
                self.policy.theta.len()
            )));
        }
        if self.policy.theta.iter().any(|v| !v.is_finite()) {
            return Err(LaocError::InvalidInput("policy parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parameter_count() {
        assert_eq!(N_PARAMS, 265);
        assert_eq!(B3 + 1, N_PARAMS);
    }

    #[test]
    fn zero_weights_give_half_capacity() {
        let net = PolicyNet::zeros(Normalizers::default());
        for f in [[0.0; N_FEATURES], [1.0, -3.0, 2.0, 5.0, 0.1, 9.0, 0.5]] {
            assert_eq!(net.forward(12.0, &f).unwrap(), 6.0);
        }
    }

    #[test]
    fn outputs_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..10_000 {
            let mut net = PolicyNet::init(i, Normalizers::default());
            for w in net.theta.iter_mut() {
                *w *= rng.random_range(0.0..20.0);
            }
            let f: [f64; N_FEATURES] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
            let u = net.forward(12.0, &f).unwrap();
            assert!((0.0..=12.0).contains(&u));
            assert_eq!(u, net.forward(12.0, &f).unwrap());
        }
    }

    #[test]
    fn rejects_non_finite_features() {
        let net = PolicyNet::zeros(Normalizers::default());
        let mut f = [0.0; N_FEATURES];
        f[3] = f64::NAN;
        assert!(net.forward(12.0, &f).is_err());
    }

    #[test]
    fn backward_matches_differences() {
        let net = PolicyNet::init(11, Normalizers::default());
        let f = [0.5, 0.3, -0.2, 1.1, 0.9, 1.2, 0.4];
        let cache = net.forward_cached(12.0, &f);
        let mut grad = vec![0.0; N_PARAMS];
        let d_in = net.backward(12.0, &cache, 1.0, &mut grad);
        for k in 0..N_PARAMS {
            let mut a = net.clone();
            let mut b = net.clone();
            a.theta[k] += 1e-6;
            b.theta[k] -= 1e-6;
            let fd = (a.forward(12.0, &f).unwrap() - b.forward(12.0, &f).unwrap()) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
        for j in 0..N_FEATURES {
            let mut a = f;
            let mut b = f;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (net.forward(12.0, &a).unwrap() - net.forward(12.0, &b).unwrap()) / 2e-6;
            assert!((fd - d_in[j]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn policy_file_round_trip_and_shape_check() {
        let net = PolicyNet::init(5, Normalizers::default());
        let header = TrainingHeader {
            mode: "pure".into(),
            epochs: 400,
            learning_rate: 5e-4,
            batch_size: 20,
            seed: 5,
            lambda: None,
            prior: None,
            loss_curve: vec![1.0, 0.5],
        };
        let file = PolicyFile::new(net, SystemParams::default(), header);
        let back = PolicyFile::from_json(&file.to_json().unwrap()).unwrap();
        assert_eq!(back, file);
        let mut bad = file.clone();
        bad.policy.theta.pop();
        assert!(PolicyFile::from_json(&bad.to_json().unwrap()).is_err());
        let mut bad = file;
        bad.architecture.hidden = vec![12];
        assert!(PolicyFile::from_json(&bad.to_json().unwrap()).is_err());
    }
}
