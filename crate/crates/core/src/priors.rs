//! Trusted control priors.
//!
//! A prior runs on its own virtual trajectory: it sees the same revealed
//! demands as the live controller but its level evolves under its own
//! actions. Every prior here targets the safety risk, not the cost.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{deviation_risk, deviation_risk_grad, next_level, Episode, SystemParams};
use crate::solver::{minimize_box, BoxSolverOptions};

/// Prior selection, as written in configs and policy files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorConfig {
    /// One projected gradient step per round on the previous round's risk.
    Ogd {
        /// Defaults to `0.5 / β`.
        #[serde(default)]
        step_size: Option<f64>,
        /// Demand guess used to seed the first action.
        #[serde(default = "default_demand_estimate")]
        demand_estimate: f64,
    },
    /// Regularised one-step lookahead with a perfect demand forecast.
    Robd {
        /// Defaults to `gamma_w`.
        #[serde(default)]
        lambda1: Option<f64>,
    },
    /// Receding-horizon risk minimisation on noisy demand forecasts.
    Mpc {
        #[serde(default = "default_window")]
        window: usize,
        /// Standard deviation of the additive forecast noise, m³.
        #[serde(default)]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Refill to the nominal level plus the trailing mean demand.
    Greedy {
        #[serde(default = "default_trailing_window")]
        window: usize,
        #[serde(default = "default_demand_estimate")]
        demand_estimate: f64,
    },
}

fn default_demand_estimate() -> f64 {
    3.0
}
fn default_window() -> usize {
    4
}
fn default_trailing_window() -> usize {
    8
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::Ogd { step_size: None, demand_estimate: default_demand_estimate() }
    }
}

impl PriorConfig {
    pub fn ogd() -> Self {
        Self::default()
    }

    pub fn robd() -> Self {
        PriorConfig::Robd { lambda1: None }
    }

    pub fn mpc(window: usize, noise_std: f64, seed: u64) -> Self {
        PriorConfig::Mpc { window, noise_std, seed }
    }

    pub fn greedy() -> Self {
        PriorConfig::Greedy { window: default_trailing_window(), demand_estimate: default_demand_estimate() }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PriorConfig::Ogd { .. } => "ogd",
            PriorConfig::Robd { .. } => "robd",
            PriorConfig::Mpc { .. } => "mpc",
            PriorConfig::Greedy { .. } => "greedy",
        }
    }

    /// Parse a short name (`ogd`, `robd`, `mpc`, `greedy`) with defaults.
    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ogd" => Some(Self::ogd()),
            "robd" => Some(Self::robd()),
            "mpc" => Some(Self::mpc(default_window(), 0.0, 0)),
            "greedy" => Some(Self::greedy()),
            _ => None,
        }
    }

    pub fn build(&self, params: &SystemParams) -> Prior {
        Prior { config: self.clone(), params: params.clone(), state: PriorState::default() }
    }
}

/// Per-episode memory of a prior.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorState {
    /// Last action taken, `u_{h-1}^†`.
    pub last_action: Option<f64>,
    /// Revealed demands so far.
    pub demand_history: Vec<f64>,
    /// Seed for this episode's forecast noise.
    pub noise_seed: u64,
}

/// Anything that can act as the trusted prior inside a controller.
pub trait ControlPrior {
    /// Clear per-episode memory.
    fn reset(&mut self, episode: &Episode);

    /// Action for round `h` at level `x`. Only demands before `h` may be
    /// used, except by priors that are defined to see forecasts.
    fn act(&mut self, episode: &Episode, h: usize, x: f64) -> f64;
}

/// A configured prior with its episode state.
#[derive(Debug, Clone)]
pub struct Prior {
    pub config: PriorConfig,
    params: SystemParams,
    state: PriorState,
}

impl Prior {
    pub fn state(&self) -> &PriorState {
        &self.state
    }
}

impl ControlPrior for Prior {
    fn reset(&mut self, episode: &Episode) {
        let noise_seed = match self.config {
            PriorConfig::Mpc { seed, .. } => mix_seed(seed, &episode.id),
            _ => 0,
        };
        self.state = PriorState { last_action: None, demand_history: Vec::new(), noise_seed };
    }

    fn act(&mut self, episode: &Episode, h: usize, x: f64) -> f64 {
        let p = &self.params;
        if h > 0 {
            self.state.demand_history.push(episode.steps[h - 1].demand);
        }
        let u = match &self.config {
            PriorConfig::Ogd { step_size, demand_estimate } => match self.state.last_action {
                None => p.clamp_action(p.nominal_level - x + demand_estimate),
                Some(prev) => {
                    let step = step_size.unwrap_or(0.5 / p.beta());
                    ogd_step(p, x, prev, step)
                }
            },
            PriorConfig::Robd { lambda1 } => {
                let l1 = lambda1.unwrap_or(p.gamma_w);
                let prev = self.state.last_action.unwrap_or(0.0);
                robd_step(p, x, episode.steps[h].demand, prev, l1)
            }
            PriorConfig::Mpc { window, noise_std, .. } => {
                let remaining = episode.horizon() - h;
                let len = (*window).min(remaining).max(1);
                let forecast = noisy_forecast(episode, h, remaining, *noise_std, self.state.noise_seed);
                let terminal = h + window >= episode.horizon();
                mpc_step(p, x, &forecast[..len], terminal)
            }
            PriorConfig::Greedy { window, demand_estimate } => {
                let hist = &self.state.demand_history;
                let mean = if hist.is_empty() {
                    *demand_estimate
                } else {
                    let tail = &hist[hist.len().saturating_sub(*window)..];
                    tail.iter().sum::<f64>() / tail.len() as f64
                };
                greedy_level_tracker(p, x, mean)
            }
        };
        self.state.last_action = Some(u);
        u
    }
}

/// Projected gradient step on the hitting risk of the previous action:
/// `d/du [dist(x_{h-1} + g(u) - w_{h-1}) + γ_b (ηu)²]` at `u_{h-1}`.
/// `x` is the level that action produced, i.e. the current level.
pub fn ogd_step(params: &SystemParams, x: f64, u_prev: f64, step_size: f64) -> f64 {
    let grad = deviation_risk_grad(params, x) * params.pump_curve.slope(u_prev) + 2.0 * params.power_weight() * u_prev;
    params.clamp_action(u_prev - step_size * grad)
}

/// `argmin_{u∈[0,u_max]} dist(x + g(u) - w) + γ_b(ηu)² + λ1 (u - u_prev)²`.
pub fn robd_step(params: &SystemParams, x: f64, w: f64, u_prev: f64, lambda1: f64) -> f64 {
    let objective = |u: f64| deviation_risk(params, next_level(params, x, u, w)) + params.power_weight() * u * u + lambda1 * (u - u_prev).powi(2);
    if !params.pump_curve.is_identity() {
        return golden_section(objective, 0.0, params.u_max);
    }
    let (lo, hi) = params.deviation_weights();
    let pw = params.power_weight();
    // Stationary point of each quadratic branch, plus the kink.
    let offset = x - w - params.nominal_level;
    let mut candidates = vec![-offset, 0.0, params.u_max];
    for k in [lo, hi] {
        let denom = k + pw + lambda1;
        if denom > 0.0 {
            candidates.push((lambda1 * u_prev - k * offset) / denom);
        }
    }
    candidates
        .into_iter()
        .map(|u| params.clamp_action(u))
        .map(|u| (objective(u), u))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)))
        .map(|(_, u)| u)
        .unwrap_or(0.0)
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-10 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}

/// Window risk for a candidate plan: the risk of every round in the window,
/// plus the deviation of the state right after it when the episode goes on.
pub fn mpc_objective(params: &SystemParams, x: f64, forecast: &[f64], plan: &[f64], terminal: bool, grad: &mut [f64]) -> f64 {
    let n = plan.len();
    let pw = params.power_weight();
    let mut levels = Vec::with_capacity(n + 1);
    levels.push(x);
    for k in 0..n {
        levels.push(next_level(params, levels[k], plan[k], forecast[k]));
    }
    let last = if terminal { n - 1 } else { n };
    let mut value: f64 = (0..=last).map(|j| deviation_risk(params, levels[j])).sum();
    value += plan.iter().map(|u| pw * u * u).sum::<f64>();
    // Backward accumulation of the state sensitivities.
    let mut downstream = 0.0;
    for k in (0..n).rev() {
        if k < last {
            downstream += deviation_risk_grad(params, levels[k + 1]);
        }
        grad[k] = 2.0 * pw * plan[k] + params.pump_curve.slope(plan[k]) * downstream;
    }
    value
}

/// First action of the window plan minimising [`mpc_objective`].
pub fn mpc_step(params: &SystemParams, x: f64, forecast: &[f64], terminal: bool) -> f64 {
    mpc_plan(params, x, forecast, terminal)[0]
}

pub fn mpc_plan(params: &SystemParams, x: f64, forecast: &[f64], terminal: bool) -> Vec<f64> {
    let n = forecast.len();
    let (lo, hi) = params.deviation_weights();
    let gmax = lo.max(hi);
    let sigma_u = params.sigma_u();
    // Trace bound on the Hessian.
    let states = if terminal { n - 1 } else { n };
    let lipschitz = 2.0 * params.power_weight() + 2.0 * gmax * sigma_u * sigma_u * (states * (states + 1)) as f64 / 2.0;
    let start: Vec<f64> = forecast.iter().map(|w| params.clamp_action(*w)).collect();
    let sol = minimize_box(
        |u, g| mpc_objective(params, x, forecast, u, terminal, g),
        &start,
        0.0,
        params.u_max,
        lipschitz.max(1e-12),
        BoxSolverOptions { tolerance: 1e-8, max_iterations: 10_000 },
    );
    if !sol.converged {
        log::debug!("mpc solve stopped with residual {:.3e}", sol.residual);
    }
    sol.x
}

/// `clamp(x̄ - x + mean_demand, [0, u_max])`.
pub fn greedy_level_tracker(params: &SystemParams, x: f64, mean_demand: f64) -> f64 {
    params.clamp_action(params.nominal_level - x + mean_demand)
}

fn mix_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a over the episode id, folded with the configured seed.
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in id.bytes() {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Forecast `ŵ_{h..h+len}` issued at round `h`: truth plus Gaussian noise,
/// clamped at zero. Deterministic in `(seed, h)`.
pub fn noisy_forecast(episode: &Episode, h: usize, len: usize, noise_std: f64, seed: u64) -> Vec<f64> {
    let truth = episode.steps[h..h + len].iter().map(|s| s.demand);
    if noise_std == 0.0 {
        return truth.collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((h as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    truth
        .map(|w| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (w + noise_std * z).max(0.0)
        })
        .collect()
}

/// Realised normalised forecast error
/// `mean_h ‖w_{h:H} - ŵ_{h:H}‖ / ((H-h) w_max)` over a set of episodes.
pub fn forecast_error(episodes: &[Episode], noise_std: f64, seed: u64) -> f64 {
    let w_max = episodes.iter().flat_map(|e| e.demands()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut total = 0.0;
    let mut count = 0usize;
    for ep in episodes {
        let ep_seed = mix_seed(seed, &ep.id);
        for h in 0..ep.horizon() {
            let len = ep.horizon() - h;
            let forecast = noisy_forecast(ep, h, len, noise_std, ep_seed);
            let err: f64 = ep.steps[h..].iter().zip(&forecast).map(|(s, f)| (s.demand - f).powi(2)).sum::<f64>().sqrt();
            total += err / (len as f64 * w_max);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Noise level whose realised forecast error on `episodes` is within 1% of
/// `target`, found by bisection.
pub fn calibrate_noise(episodes: &[Episode], target: f64, seed: u64) -> f64 {
    if target <= 0.0 || episodes.is_empty() {
        return 0.0;
    }
    let mut hi = 0.1;
    while forecast_error(episodes, hi, seed) < target && hi < 1e6 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let eps = forecast_error(episodes, mid, seed);
        if (eps / target - 1.0).abs() < 0.01 {
            return mid;
        }
        if eps < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
