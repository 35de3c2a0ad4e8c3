//! Training by unrolling episodes through the policy.
//!
//! Both modes share one unroll. In pure mode the policy's proposal is
//! applied directly; in safe mode it goes through the LAOC mapping and the
//! mapping's sensitivities to the proposal, the level and the cumulative
//! risk are carried through the backward pass.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{feature_level_slope, features, ForwardCache, Normalizers, PolicyNet, N_PARAMS};
use crate::controllers::{safe_action, Mapping};
use crate::error::{LaocError, Result};
use crate::model::{loss, loss_grad, next_level, risk, risk_grad, Episode, SystemParams};
use crate::priors::{ControlPrior, PriorConfig};
use crate::safeset::{SafeSetInputs, SafeSetParams};

/// Below this the constraint is treated as flat in `ρ`.
pub const FLAT_CONSTRAINT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 5e-4, epochs: 400, batch_size: 20, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(LaocError::InvalidInput(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(LaocError::InvalidInput("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(LaocError::InvalidInput("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Safe-mode context of an unroll.
#[derive(Debug, Clone, Copy)]
pub struct SafeContext<'a> {
    pub safe: &'a SafeSetParams,
    pub prior: &'a PriorConfig,
    pub mapping: Mapping,
}

/// Counters collected while unrolling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnrollStats {
    pub rounds: usize,
    pub binding_rounds: usize,
    /// Binding rounds whose constraint was flat in `ρ`.
    pub flat_rounds: usize,
    /// Executed actions outside the safe set. Must stay zero.
    pub unsafe_rounds: usize,
}

impl UnrollStats {
    fn add(&mut self, other: &UnrollStats) {
        self.rounds += other.rounds;
        self.binding_rounds += other.binding_rounds;
        self.flat_rounds += other.flat_rounds;
        self.unsafe_rounds += other.unsafe_rounds;
    }
}

/// Per-round record of the forward pass.
struct Tape {
    cache: ForwardCache,
    x: f64,
    u: f64,
    /// ∂u/∂ũ, ∂u/∂x and ∂u/∂R_{h-1} of the mapping.
    m_ml: f64,
    m_x: f64,
    m_r: f64,
}

/// Episode loss `J_H` under `net`, accumulating `∂J/∂θ` into `grad`.
pub fn episode_gradient(
    net: &PolicyNet,
    params: &SystemParams,
    episode: &Episode,
    safe: Option<SafeContext>,
    grad: &mut [f64],
    stats: &mut UnrollStats,
) -> Result<f64> {
    let horizon = episode.horizon();
    let u_max = params.u_max;
    let mut tape = Vec::with_capacity(horizon);
    let mut prior = safe.map(|s| {
        let mut p = s.prior.build(params);
        p.reset(episode);
        p
    });
    let mut x = params.initial_level;
    let mut xp = params.initial_level;
    let (mut cum, mut cum_prior) = (0.0, 0.0);
    let mut total = 0.0;

    for h in 0..horizon {
        let step = &episode.steps[h];
        let f = features(params, &net.normalizers, episode, h, x);
        let cache = net.forward_cached(u_max, &f);
        let u_ml = cache.output;
        let (u, m_ml, m_x, m_r) = match (safe, prior.as_mut()) {
            (Some(ctx), Some(prior)) => {
                let up = prior.act(episode, h, xp);
                cum_prior += risk(params, xp, up);
                let inputs = SafeSetInputs {
                    prev_risk: cum,
                    prior_risk: cum_prior,
                    x,
                    x_prior: xp,
                    u_prior: up,
                    q: ctx.safe.q_at(h),
                    lambda: ctx.safe.lambda,
                };
                let (u, rho) =
                    safe_action(params, &inputs, u_ml, ctx.mapping).map_err(|e| LaocError::InvariantViolation(format!("round {h}: {e}")))?;
                if !inputs.contains(params, u) {
                    stats.unsafe_rounds += 1;
                }
                xp = next_level(params, xp, up, step.demand);
                if rho < 1.0 {
                    stats.binding_rounds += 1;
                    let (m, flat) = mapping_sensitivity(params, &inputs, u_ml, u, rho);
                    if flat {
                        stats.flat_rounds += 1;
                        log::debug!("flat safe-set constraint at round {h} of {}", episode.id);
                    }
                    (u, m.0, m.1, m.2)
                } else {
                    (u, 1.0, 0.0, 0.0)
                }
            }
            _ => (u_ml, 1.0, 0.0, 0.0),
        };
        total += loss(params, x, u, step).total;
        cum += risk(params, x, u);
        tape.push(Tape { cache, x, u, m_ml, m_x, m_r });
        x = next_level(params, x, u, step.demand);
    }
    stats.rounds += horizon;

    // a = ∂J/∂x_{h+1}, b = ∂J/∂R_h, both through later rounds only.
    let mut a = 0.0;
    let mut b = 0.0;
    let level_slope = feature_level_slope(params);
    for h in (0..horizon).rev() {
        let t = &tape[h];
        let step = &episode.steps[h];
        let (cx, cu) = loss_grad(params, t.x, step);
        let (rx, ru) = risk_grad(params, t.x, t.u);
        let d_u = cu + params.pump_curve.slope(t.u) * a + b * ru;
        let d_x = cx + a + b * rx;
        let d_ml = d_u * t.m_ml;
        let d_features = if d_ml != 0.0 { net.backward(u_max, &t.cache, d_ml, grad) } else { [0.0; super::policy::N_FEATURES] };
        a = d_x + d_u * t.m_x + d_features[0] * level_slope;
        b += d_u * t.m_r;
    }
    Ok(total)
}

/// Sensitivities `(∂u/∂ũ, ∂u/∂x, ∂u/∂R_{h-1})` of a binding mapping,
/// obtained by differentiating `G(ρ, ũ, x, R_{h-1}) = 0`. The flag reports a
/// flat constraint, where only the explicit `ρ` dependence is kept.
fn mapping_sensitivity(params: &SystemParams, inputs: &SafeSetInputs, u_ml: f64, u: f64, rho: f64) -> ((f64, f64, f64), bool) {
    let g = &params.pump_curve;
    let d = inputs.x + g.eval(u) - inputs.x_prior - g.eval(inputs.u_prior);
    let (rx, ru) = risk_grad(params, inputs.x, u);
    let g_u = ru + 2.0 * inputs.q * d * g.slope(u);
    let g_x = rx + 2.0 * inputs.q * d;
    let g_rho = g_u * (u_ml - inputs.u_prior);
    if g_rho.abs() < FLAT_CONSTRAINT_TOL {
        return ((rho, 0.0, 0.0), true);
    }
    // u = u† + ρ(ũ - u†) with ∂ρ/∂ũ = -ρ G_u / G_ρ cancels the direct term.
    ((0.0, -g_x / g_u, -1.0 / g_u), false)
}

/// Mean episode loss over `batch` and its gradient.
pub fn batch_gradient(
    net: &PolicyNet,
    params: &SystemParams,
    batch: &[&Episode],
    safe: Option<SafeContext>,
    grad: &mut [f64],
    stats: &mut UnrollStats,
) -> Result<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut total = 0.0;
    let mut local = UnrollStats::default();
    for ep in batch {
        total += episode_gradient(net, params, ep, safe, grad, &mut local)?;
    }
    stats.add(&local);
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(total / n)
}

/// Mean episode loss without gradients.
pub fn mean_loss(net: &PolicyNet, params: &SystemParams, episodes: &[Episode], safe: Option<SafeContext>) -> Result<f64> {
    let mut grad = vec![0.0; N_PARAMS];
    let refs: Vec<&Episode> = episodes.iter().collect();
    batch_gradient(net, params, &refs, safe, &mut grad, &mut UnrollStats::default())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub policy: PolicyNet,
    /// Mean episode loss seen during each epoch.
    pub loss_curve: Vec<f64>,
    pub stats: UnrollStats,
}

fn run_training(
    mut net: PolicyNet,
    dataset: &[Episode],
    params: &SystemParams,
    safe: Option<SafeContext>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LaocError::InvalidInput("training set is empty".into()));
    }
    for ep in dataset {
        ep.validate(params)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut adam = Adam::new(net.theta.len(), config.learning_rate);
    let mut grad = vec![0.0; net.theta.len()];
    let mut curve = Vec::with_capacity(config.epochs);
    let mut stats = UnrollStats::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Episode> = chunk.iter().map(|i| &dataset[*i]).collect();
            let value = batch_gradient(&net, params, &batch, safe, &mut grad, &mut stats)?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(LaocError::Divergence { epoch, detail: format!("batch loss {value}, last epoch loss {:?}", curve.last()) });
            }
            epoch_loss += value * chunk.len() as f64;
            if config.learning_rate > 0.0 {
                adam.step(&mut net.theta, &grad);
            }
        }
        curve.push(epoch_loss / dataset.len() as f64);
        log::debug!("epoch {epoch}: mean loss {:.6}", curve[epoch]);
    }
    if stats.flat_rounds > 0 {
        log::info!("{} binding rounds had a flat constraint; their implicit gradient was dropped", stats.flat_rounds);
    }
    Ok(TrainReport { policy: net, loss_curve: curve, stats })
}

/// Fit a fresh policy to the average episode loss.
pub fn train_pure(dataset: &[Episode], params: &SystemParams, config: &TrainConfig) -> Result<TrainReport> {
    let net = PolicyNet::init(config.seed, Normalizers::from_episodes(dataset));
    run_training(net, dataset, params, None, config)
}

/// Continue training a policy through the safe mapping, so the loss of the
/// actions LAOC actually executes is minimised.
pub fn finetune_safe(
    init: &PolicyNet,
    dataset: &[Episode],
    params: &SystemParams,
    safe: &SafeSetParams,
    prior: &PriorConfig,
    config: &TrainConfig,
) -> Result<TrainReport> {
    safe.validate()?;
    let ctx = SafeContext { safe, prior, mapping: Mapping::Linear };
    let report = run_training(init.clone(), dataset, params, Some(ctx), config)?;
    if report.stats.unsafe_rounds > 0 {
        return Err(LaocError::InvariantViolation(format!("{} finetuning rounds executed actions outside the safe set", report.stats.unsafe_rounds)));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TraceStep;

    fn toy(h: usize, seed: u64) -> (SystemParams, Vec<Episode>) {
        let p = SystemParams { horizon: h, ..SystemParams::default() };
        let eps = (0..3)
            .map(|i| {
                Episode::new(
                    format!("toy{seed}-{i}"),
                    (0..h).map(|k| TraceStep::new(2.0 + (k + i) as f64, 150.0 + 40.0 * k as f64, 0.04 + 0.03 * i as f64)).collect(),
                )
            })
            .collect();
        (p, eps)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (p, eps) = toy(4, 1);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, ..TrainConfig::default() };
        let report = train_pure(&eps, &p, &cfg).unwrap();
        let init = PolicyNet::init(cfg.seed, Normalizers::from_episodes(&eps));
        assert_eq!(report.policy.theta, init.theta);
    }

    #[test]
    fn training_is_deterministic() {
        let (p, eps) = toy(4, 2);
        let cfg = TrainConfig { epochs: 5, batch_size: 2, seed: 9, ..TrainConfig::default() };
        let a = train_pure(&eps, &p, &cfg).unwrap();
        let b = train_pure(&eps, &p, &cfg).unwrap();
        assert_eq!(a.policy.theta, b.policy.theta);
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn vacuous_constraint_gives_pure_gradient() {
        let (p, eps) = toy(6, 3);
        let net = PolicyNet::init(4, Normalizers::from_episodes(&eps));
        let safe = SafeSetParams::new(&p, 1e6).unwrap();
        let prior = PriorConfig::ogd();
        let ctx = SafeContext { safe: &safe, prior: &prior, mapping: Mapping::Linear };
        let refs: Vec<&Episode> = eps.iter().collect();
        let mut g_pure = vec![0.0; N_PARAMS];
        let mut g_safe = vec![0.0; N_PARAMS];
        let mut stats = UnrollStats::default();
        let a = batch_gradient(&net, &p, &refs, None, &mut g_pure, &mut stats).unwrap();
        let b = batch_gradient(&net, &p, &refs, Some(ctx), &mut g_safe, &mut stats).unwrap();
        assert_eq!(stats.binding_rounds, 0);
        assert!((a - b).abs() < 1e-10);
        for (x, y) in g_pure.iter().zip(&g_safe) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let p = SystemParams::default();
        assert!(train_pure(&[], &p, &TrainConfig::default()).is_err());
    }
}
