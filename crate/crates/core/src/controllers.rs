//! Episode-level controllers.
//!
//! Every controller runs through the same per-round loop: the prior advances
//! on its virtual trajectory, its risk is booked, the ML policy proposes an
//! action, and a controller-specific rule turns the proposal into the action
//! actually applied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LaocError, Result};
use crate::model::{loss, loss_grad, next_level, risk, risk_grad, Episode, LossBreakdown, SystemParams};
use crate::priors::{ControlPrior, PriorConfig};
use crate::safeset::{map_linear_safe, naive_safe_interval, safe_interval, SafeSetInputs, SafeSetParams};
use crate::solver::{minimize_box, BoxSolverOptions};

/// Ledger comparison slack.
pub const VIOLATION_TOL: f64 = 1e-8;
/// A round binds when the applied action moved this far from the proposal.
pub const BINDING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Laoc,
    Lin,
    LinPlus,
    PureMl,
    PriorOnly,
    Opt,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Laoc => "laoc",
            ControllerKind::Lin => "lin",
            ControllerKind::LinPlus => "lin_plus",
            ControllerKind::PureMl => "pure_ml",
            ControllerKind::PriorOnly => "prior",
            ControllerKind::Opt => "opt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "laoc" => Some(ControllerKind::Laoc),
            "lin" => Some(ControllerKind::Lin),
            "lin_plus" | "linplus" | "lin+" => Some(ControllerKind::LinPlus),
            "pure_ml" | "ml" => Some(ControllerKind::PureMl),
            "prior" | "prior_only" => Some(ControllerKind::PriorOnly),
            "opt" => Some(ControllerKind::Opt),
            _ => None,
        }
    }

    /// Whether the controller's actions depend on λ.
    pub fn uses_lambda(self) -> bool {
        matches!(self, ControllerKind::Laoc | ControllerKind::LinPlus)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mapping {
    Projection,
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Safety margin. For controllers that ignore it, it only sets the
    /// threshold of the reported violation flags.
    pub lambda: f64,
    /// Weight on the ML action for Lin.
    pub rho: f64,
    pub mapping: Mapping,
    pub prior: PriorConfig,
    /// Lin only: query the prior at the live level instead of its own.
    pub lin_prior_on_live_state: bool,
}

impl ControllerConfig {
    pub fn new(kind: ControllerKind, lambda: f64, prior: PriorConfig) -> Self {
        Self { kind, lambda, rho: 0.5, mapping: Mapping::default(), prior, lin_prior_on_live_state: false }
    }

    pub fn laoc(lambda: f64, prior: PriorConfig) -> Self {
        Self::new(ControllerKind::Laoc, lambda, prior)
    }

    pub fn lin(rho: f64, lambda: f64, prior: PriorConfig) -> Self {
        Self { rho, ..Self::new(ControllerKind::Lin, lambda, prior) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(LaocError::InvalidSafety(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.kind == ControllerKind::LinPlus && self.lambda == 0.0 {
            return Err(LaocError::InvalidSafety("Lin+ needs lambda > 0".into()));
        }
        if self.kind == ControllerKind::Lin && !(0.0..=1.0).contains(&self.rho) {
            return Err(LaocError::InvalidInput(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        Ok(())
    }
}

/// What an ML policy sees at round `h`.
#[derive(Debug, Clone, Copy)]
pub struct PolicyInput<'a> {
    pub episode: &'a Episode,
    pub h: usize,
    /// Live level `x_h`.
    pub x: f64,
    /// `u_h^†`, for policies defined relative to the prior.
    pub prior_action: f64,
}

/// A learned or synthetic proposal policy. Only past demands may be read
/// from the episode.
pub trait MlPolicy: Send + Sync {
    fn act(&self, params: &SystemParams, input: &PolicyInput) -> f64;
}

/// Always proposes the same action.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub f64);

impl MlPolicy for ConstantPolicy {
    fn act(&self, params: &SystemParams, _input: &PolicyInput) -> f64 {
        params.clamp_action(self.0)
    }
}

/// Proposes exactly the prior's action.
#[derive(Debug, Clone, Copy)]
pub struct PriorMirror;

impl MlPolicy for PriorMirror {
    fn act(&self, _params: &SystemParams, input: &PolicyInput) -> f64 {
        input.prior_action
    }
}

/// Uniform random actions on `[0, u_max]`, a deterministic function of
/// `(seed, episode id, h)`.
#[derive(Debug, Clone, Copy)]
pub struct UniformRandomPolicy {
    pub seed: u64,
}

impl MlPolicy for UniformRandomPolicy {
    fn act(&self, params: &SystemParams, input: &PolicyInput) -> f64 {
        let mut hash = self.seed ^ 0xcbf2_9ce4_8422_2325;
        for b in input.episode.id.bytes().chain((input.h as u64).to_le_bytes()) {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(hash).random_range(0.0..=params.u_max)
    }
}

/// Trajectories, ledgers and per-round flags of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub controller: String,
    pub trace_id: String,
    pub lambda: f64,
    /// `x_0 ..= x_H`.
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// Proposal of the ML policy (equal to `u` for controllers without one).
    pub u_ml: Vec<f64>,
    pub x_prior: Vec<f64>,
    pub u_prior: Vec<f64>,
    pub losses: Vec<LossBreakdown>,
    pub risks: Vec<f64>,
    pub prior_risks: Vec<f64>,
    /// `R_h` after each round.
    pub cum_risk: Vec<f64>,
    /// `R_h^†` after each round.
    pub cum_prior_risk: Vec<f64>,
    pub total_loss: f64,
    pub violations: Vec<bool>,
    pub binding: Vec<bool>,
    /// Weight on the ML action actually used (1 where nothing was mapped).
    pub rho: Vec<f64>,
    /// Rounds where the reservation-free set was empty (Lin+ only).
    pub empty_events: Vec<usize>,
    /// Rounds whose level left `[0, tank_capacity]`.
    pub excursions: Vec<usize>,
}

impl EpisodeResult {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    pub fn total_risk(&self) -> f64 {
        self.cum_risk.last().copied().unwrap_or(0.0)
    }

    pub fn total_prior_risk(&self) -> f64 {
        self.cum_prior_risk.last().copied().unwrap_or(0.0)
    }

    /// `R_H / R_H^†`; 1 when both vanish.
    pub fn risk_ratio(&self) -> f64 {
        ratio(self.total_risk(), self.total_prior_risk())
    }

    pub fn energy_usd(&self) -> f64 {
        self.losses.iter().map(|l| l.energy_usd).sum()
    }

    pub fn carbon_g(&self) -> f64 {
        self.losses.iter().map(|l| l.carbon_g).sum()
    }

    pub fn violated(&self) -> bool {
        self.violations.iter().any(|v| *v)
    }

    pub fn binding_count(&self) -> usize {
        self.binding.iter().filter(|b| **b).count()
    }

    /// Per-round violation flags against another margin.
    pub fn violations_at(&self, lambda: f64) -> Vec<bool> {
        self.cum_risk.iter().zip(&self.cum_prior_risk).map(|(r, rp)| is_violation(*r, *rp, lambda)).collect()
    }
}

pub fn is_violation(risk: f64, prior_risk: f64, lambda: f64) -> bool {
    risk > (1.0 + lambda) * prior_risk + VIOLATION_TOL
}

pub(crate) fn ratio(risk: f64, prior_risk: f64) -> f64 {
    if prior_risk > 0.0 {
        risk / prior_risk
    } else if risk <= VIOLATION_TOL {
        1.0
    } else {
        f64::INFINITY
    }
}

/// State handed to a controller's decision rule.
struct Round {
    h: usize,
    x: f64,
    x_prior: f64,
    u_prior: f64,
    /// R_{h-1}
    prev_risk: f64,
    /// R_h^†
    prior_risk: f64,
    u_ml: f64,
}

struct Decision {
    action: f64,
    rho: f64,
    empty: bool,
}

impl Decision {
    fn take(action: f64, rho: f64) -> Self {
        Self { action, rho, empty: false }
    }
}

fn run_loop<F>(
    name: &str,
    episode: &Episode,
    params: &SystemParams,
    prior: &PriorConfig,
    lambda: f64,
    ml: Option<&dyn MlPolicy>,
    mut decide: F,
) -> Result<EpisodeResult>
where
    F: FnMut(&Round) -> Result<Decision>,
{
    episode.validate(params)?;
    let horizon = episode.horizon();
    let mut prior = prior.build(params);
    prior.reset(episode);
    let mut out = EpisodeResult {
        controller: name.to_string(),
        trace_id: episode.id.clone(),
        lambda,
        x: Vec::with_capacity(horizon + 1),
        u: Vec::with_capacity(horizon),
        u_ml: Vec::with_capacity(horizon),
        x_prior: Vec::with_capacity(horizon + 1),
        u_prior: Vec::with_capacity(horizon),
        losses: Vec::with_capacity(horizon),
        risks: Vec::with_capacity(horizon),
        prior_risks: Vec::with_capacity(horizon),
        cum_risk: Vec::with_capacity(horizon),
        cum_prior_risk: Vec::with_capacity(horizon),
        total_loss: 0.0,
        violations: Vec::with_capacity(horizon),
        binding: Vec::with_capacity(horizon),
        rho: Vec::with_capacity(horizon),
        empty_events: Vec::new(),
        excursions: Vec::new(),
    };
    let mut x = params.initial_level;
    let mut xp = params.initial_level;
    let (mut cum, mut cum_prior) = (0.0, 0.0);
    out.x.push(x);
    out.x_prior.push(xp);

    for h in 0..horizon {
        let step = &episode.steps[h];
        let up = prior.act(episode, h, xp);
        let rp = risk(params, xp, up);
        cum_prior += rp;

        let u_ml = match ml {
            Some(policy) => policy.act(params, &PolicyInput { episode, h, x, prior_action: up }),
            None => up,
        };
        if !u_ml.is_finite() {
            return Err(LaocError::InvalidInput(format!("ML policy returned {u_ml} at round {h}")));
        }
        let decision = decide(&Round { h, x, x_prior: xp, u_prior: up, prev_risk: cum, prior_risk: cum_prior, u_ml })?;
        let u = decision.action;

        let r = risk(params, x, u);
        cum += r;
        let l = loss(params, x, u, step);
        out.total_loss += l.total;

        out.u.push(u);
        out.u_ml.push(u_ml);
        out.u_prior.push(up);
        out.losses.push(l);
        out.risks.push(r);
        out.prior_risks.push(rp);
        out.cum_risk.push(cum);
        out.cum_prior_risk.push(cum_prior);
        out.violations.push(is_violation(cum, cum_prior, lambda));
        out.binding.push((u - u_ml).abs() > BINDING_TOL);
        out.rho.push(decision.rho);
        if decision.empty {
            out.empty_events.push(h);
        }
        if !(0.0..=params.tank_capacity).contains(&x) {
            out.excursions.push(h);
        }

        x = next_level(params, x, u, step.demand);
        xp = next_level(params, xp, up, step.demand);
        out.x.push(x);
        out.x_prior.push(xp);
    }
    Ok(out)
}

/// Learning-augmented online control.
///
/// `safe` may be `None` only for `λ = 0`, where the controller copies the
/// prior. A safe set that comes out empty, or that excludes the prior's
/// action, is reported as an invariant violation.
pub fn laoc_run(
    episode: &Episode,
    params: &SystemParams,
    safe: Option<&SafeSetParams>,
    prior: &PriorConfig,
    mapping: Mapping,
    ml: &dyn MlPolicy,
) -> Result<EpisodeResult> {
    let Some(safe) = safe else {
        return run_loop("laoc", episode, params, prior, 0.0, Some(ml), |r| Ok(Decision::take(r.u_prior, 0.0)));
    };
    if safe.q.len() != episode.horizon() + 1 {
        return Err(LaocError::InvalidSafety(format!("reservation schedule has {} entries for horizon {}", safe.q.len(), episode.horizon())));
    }
    if mapping == Mapping::Projection && !params.pump_curve.is_identity() {
        return Err(LaocError::InvalidInput("projection mapping needs the identity pump curve".into()));
    }
    let lambda = safe.lambda;
    run_loop("laoc", episode, params, prior, lambda, Some(ml), |r| {
        let inputs = SafeSetInputs {
            prev_risk: r.prev_risk,
            prior_risk: r.prior_risk,
            x: r.x,
            x_prior: r.x_prior,
            u_prior: r.u_prior,
            q: safe.q_at(r.h),
            lambda,
        };
        let (action, rho) =
            safe_action(params, &inputs, r.u_ml, mapping).map_err(|e| LaocError::InvariantViolation(format!("round {}: {e}", r.h)))?;
        Ok(Decision::take(action, rho))
    })
}

/// One LAOC round: keep `u_ml` when it lies in the safe set, otherwise map
/// it. Returns the action and the weight it puts on `u_ml`.
///
/// Fails when the set is empty or excludes the prior's action.
pub fn safe_action(params: &SystemParams, inputs: &SafeSetInputs, u_ml: f64, mapping: Mapping) -> Result<(f64, f64)> {
    let u_prior = inputs.u_prior;
    if !inputs.contains(params, u_prior) {
        return Err(LaocError::InvariantViolation(format!(
            "prior action {u_prior} is outside the safe set (excess {:.3e})",
            inputs.excess(params, u_prior)
        )));
    }
    if !params.pump_curve.is_identity() {
        if inputs.contains(params, u_ml) {
            return Ok((u_ml, 1.0));
        }
        let m = map_linear_safe(params, inputs, u_ml)?;
        return Ok((m.action, m.rho));
    }
    let (lo, hi) = match safe_interval(params, inputs) {
        Ok(s) => s.feasible_interval,
        Err(LaocError::EmptySet { detail, .. }) => return Err(LaocError::InvariantViolation(format!("empty safe set: {detail}"))),
        Err(e) => return Err(e),
    };
    if (lo..=hi).contains(&u_ml) {
        return Ok((u_ml, 1.0));
    }
    match mapping {
        Mapping::Projection => {
            let u = u_ml.clamp(lo, hi);
            let rho = if u_ml != u_prior { (u - u_prior) / (u_ml - u_prior) } else { 1.0 };
            Ok((u, rho))
        }
        Mapping::Linear => {
            let m = map_linear_safe(params, inputs, u_ml)?;
            Ok((m.action, m.rho))
        }
    }
}

/// Fixed-weight combination `ρũ + (1-ρ)u^†`. Makes no safety promise.
pub fn lin_run(
    episode: &Episode,
    params: &SystemParams,
    rho: f64,
    lambda: f64,
    prior: &PriorConfig,
    prior_on_live_state: bool,
    ml: &dyn MlPolicy,
) -> Result<EpisodeResult> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(LaocError::InvalidInput(format!("rho must lie in [0, 1], got {rho}")));
    }
    let mut live_prior = prior.build(params);
    live_prior.reset(episode);
    run_loop("lin", episode, params, prior, lambda, Some(ml), |r| {
        let anchor = if prior_on_live_state { live_prior.act(episode, r.h, r.x) } else { r.u_prior };
        let u = if rho == 1.0 {
            r.u_ml
        } else if rho == 0.0 {
            anchor
        } else {
            rho * r.u_ml + (1.0 - rho) * anchor
        };
        Ok(Decision::take(u, rho))
    })
}

/// Switch between the ML and prior actions using the reservation-free set.
pub fn lin_plus_run(episode: &Episode, params: &SystemParams, lambda: f64, prior: &PriorConfig, ml: &dyn MlPolicy) -> Result<EpisodeResult> {
    if !(lambda > 0.0) {
        return Err(LaocError::InvalidSafety(format!("Lin+ needs lambda > 0, got {lambda}")));
    }
    run_loop("lin_plus", episode, params, prior, lambda, Some(ml), |r| match naive_safe_interval(params, r.prev_risk, r.prior_risk, r.x, lambda) {
        None => Ok(Decision { action: r.u_prior, rho: 0.0, empty: true }),
        Some((lo, hi)) if (lo..=hi).contains(&r.u_ml) => Ok(Decision::take(r.u_ml, 1.0)),
        Some((lo, hi)) if (lo..=hi).contains(&r.u_prior) => Ok(Decision::take(r.u_prior, 0.0)),
        Some((lo, hi)) => Ok(Decision::take(r.u_ml.clamp(lo, hi), f64::NAN)),
    })
}

pub fn pure_ml_run(episode: &Episode, params: &SystemParams, lambda: f64, prior: &PriorConfig, ml: &dyn MlPolicy) -> Result<EpisodeResult> {
    run_loop("pure_ml", episode, params, prior, lambda, Some(ml), |r| Ok(Decision::take(r.u_ml, 1.0)))
}

pub fn prior_only_run(episode: &Episode, params: &SystemParams, lambda: f64, prior: &PriorConfig) -> Result<EpisodeResult> {
    run_loop("prior", episode, params, prior, lambda, None, |r| Ok(Decision::take(r.u_prior, 0.0)))
}

/// Offline optimum with full knowledge of the trace, replayed through the
/// common loop so its ledgers are comparable.
pub fn opt_run(episode: &Episode, params: &SystemParams, lambda: f64, prior: &PriorConfig) -> Result<EpisodeResult> {
    let (plan, _) = opt_offline(episode, params, OptObjective::Loss)?;
    run_loop("opt", episode, params, prior, lambda, None, |r| Ok(Decision::take(plan[r.h], 1.0)))
}

/// Dispatch on the configured controller kind.
pub fn run_controller(
    config: &ControllerConfig,
    episode: &Episode,
    params: &SystemParams,
    safe: Option<&SafeSetParams>,
    ml: &dyn MlPolicy,
) -> Result<EpisodeResult> {
    config.validate()?;
    let prior = &config.prior;
    let lambda = config.lambda;
    match config.kind {
        ControllerKind::Laoc => {
            if lambda == 0.0 {
                laoc_run(episode, params, None, prior, config.mapping, ml)
            } else {
                match safe {
                    Some(s) => laoc_run(episode, params, Some(s), prior, config.mapping, ml),
                    None => {
                        let s = SafeSetParams::new(params, lambda)?;
                        laoc_run(episode, params, Some(&s), prior, config.mapping, ml)
                    }
                }
            }
        }
        ControllerKind::Lin => lin_run(episode, params, config.rho, lambda, prior, config.lin_prior_on_live_state, ml),
        ControllerKind::LinPlus => lin_plus_run(episode, params, lambda, prior, ml),
        ControllerKind::PureMl => pure_ml_run(episode, params, lambda, prior, ml),
        ControllerKind::PriorOnly => prior_only_run(episode, params, lambda, prior),
        ControllerKind::Opt => opt_run(episode, params, lambda, prior),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptObjective {
    /// Total loss `Σ c_h`.
    Loss,
    /// Total risk `Σ r_h`.
    Risk,
}

/// Objective value and gradient of an open-loop plan.
pub fn plan_objective(episode: &Episode, params: &SystemParams, objective: OptObjective, plan: &[f64], grad: &mut [f64]) -> f64 {
    let n = plan.len();
    let mut xs = Vec::with_capacity(n);
    let mut x = params.initial_level;
    for (u, s) in plan.iter().zip(&episode.steps) {
        xs.push(x);
        x = next_level(params, x, *u, s.demand);
    }
    let mut value = 0.0;
    // Adjoint of the level: derivative of the remaining objective w.r.t. x_{h+1}.
    let mut adjoint = 0.0;
    for h in (0..n).rev() {
        let step = &episode.steps[h];
        let (dx, du) = match objective {
            OptObjective::Loss => {
                value += loss(params, xs[h], plan[h], step).total;
                loss_grad(params, xs[h], step)
            }
            OptObjective::Risk => {
                value += risk(params, xs[h], plan[h]);
                risk_grad(params, xs[h], plan[h])
            }
        };
        grad[h] = du + params.pump_curve.slope(plan[h]) * adjoint;
        adjoint += dx;
    }
    value
}

/// Minimise the episode objective over `[0, u_max]^H` with the whole trace
/// known. Returns the plan and its objective value.
pub fn opt_offline(episode: &Episode, params: &SystemParams, objective: OptObjective) -> Result<(Vec<f64>, f64)> {
    episode.validate(params)?;
    let n = episode.horizon();
    let (lo, hi) = params.deviation_weights();
    let curvature = match objective {
        OptObjective::Loss => params.gamma1,
        OptObjective::Risk => lo.max(hi),
    };
    let sigma_u = params.sigma_u();
    // Trace of the Hessian bounds its largest eigenvalue.
    let mut lipschitz = curvature * sigma_u * sigma_u * (n * n.saturating_sub(1)) as f64;
    if objective == OptObjective::Risk {
        lipschitz += 2.0 * params.power_weight() * n as f64;
    }
    // Start from demand tracking.
    let start: Vec<f64> = episode.steps.iter().map(|s| params.clamp_action(s.demand)).collect();
    let sol = minimize_box(
        |u, g| plan_objective(episode, params, objective, u, g),
        &start,
        0.0,
        params.u_max,
        lipschitz.max(1e-9),
        BoxSolverOptions { tolerance: 1e-8, max_iterations: 100_000 },
    );
    if !sol.converged {
        log::warn!("offline optimum for {} stopped at residual {:.3e}", episode.id, sol.residual);
    }
    Ok((sol.x, sol.value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TraceStep;

    fn episode(id: &str, demands: &[f64]) -> Episode {
        Episode::new(id, demands.iter().enumerate().map(|(h, w)| TraceStep::new(*w, 150.0 + 10.0 * h as f64, 0.05)).collect())
    }

    fn params(h: usize) -> SystemParams {
        SystemParams { horizon: h, ..SystemParams::default() }
    }

    #[test]
    fn prior_copy_and_mirror_match_prior_only() {
        let p = params(6);
        let ep = episode("a", &[3.0, 4.0, 1.0, 6.0, 2.0, 5.0]);
        let prior = PriorConfig::ogd();
        let base = prior_only_run(&ep, &p, 0.0, &prior).unwrap();
        let zero = laoc_run(&ep, &p, None, &prior, Mapping::Linear, &ConstantPolicy(12.0)).unwrap();
        assert_eq!(base.u, zero.u);
        assert_eq!(base.x, zero.x);
        let safe = SafeSetParams::new(&p, 0.4).unwrap();
        let mirror = laoc_run(&ep, &p, Some(&safe), &prior, Mapping::Linear, &PriorMirror).unwrap();
        assert_eq!(base.u, mirror.u);
        assert_eq!(mirror.binding_count(), 0);
    }

    #[test]
    fn lin_endpoints() {
        let p = params(6);
        let ep = episode("b", &[3.0, 4.0, 1.0, 6.0, 2.0, 5.0]);
        let prior = PriorConfig::ogd();
        let ml = ConstantPolicy(7.0);
        let l0 = lin_run(&ep, &p, 0.0, 0.4, &prior, false, &ml).unwrap();
        let l1 = lin_run(&ep, &p, 1.0, 0.4, &prior, false, &ml).unwrap();
        assert_eq!(l0.u, prior_only_run(&ep, &p, 0.4, &prior).unwrap().u);
        assert_eq!(l1.u, pure_ml_run(&ep, &p, 0.4, &prior, &ml).unwrap().u);
    }

    #[test]
    fn laoc_is_safe_against_constant_extremes() {
        let p = params(24);
        let demands: Vec<f64> = (0..24).map(|h| 3.0 + 2.0 * (h as f64 / 4.0).sin()).collect();
        let ep = episode("c", &demands);
        for lambda in [0.1, 0.4, 2.0] {
            let safe = SafeSetParams::new(&p, lambda).unwrap();
            for mapping in [Mapping::Projection, Mapping::Linear] {
                for c in [0.0, 12.0] {
                    let r = laoc_run(&ep, &p, Some(&safe), &PriorConfig::ogd(), mapping, &ConstantPolicy(c)).unwrap();
                    assert!(!r.violated());
                }
            }
        }
    }

    #[test]
    fn opt_zero_demand_is_idle() {
        let p = params(5);
        let ep = episode("d", &[0.0; 5]);
        let (plan, value) = opt_offline(&ep, &p, OptObjective::Loss).unwrap();
        assert!(plan.iter().all(|u| *u == 0.0));
        assert_eq!(value, 0.0);
    }

    #[test]
    fn opt_tracks_constant_demand_without_costs() {
        let p = SystemParams { gamma2: 0.0, gamma3: 0.0, ..params(6) };
        let ep = episode("e", &[4.0; 6]);
        let (plan, value) = opt_offline(&ep, &p, OptObjective::Loss).unwrap();
        for u in &plan {
            assert!((u - 4.0).abs() < 1e-6);
        }
        assert!(value.abs() < 1e-10);
    }

    #[test]
    fn plan_gradient_matches_differences() {
        let p = params(4);
        let ep = episode("f", &[3.0, 5.0, 2.0, 4.0]);
        let plan = [2.0, 6.5, 1.0, 3.0];
        for obj in [OptObjective::Loss, OptObjective::Risk] {
            let mut g = [0.0; 4];
            plan_objective(&ep, &p, obj, &plan, &mut g);
            let mut scratch = [0.0; 4];
            for i in 0..4 {
                let mut a = plan;
                let mut b = plan;
                a[i] += 1e-5;
                b[i] -= 1e-5;
                let fd = (plan_objective(&ep, &p, obj, &a, &mut scratch) - plan_objective(&ep, &p, obj, &b, &mut scratch)) / 2e-5;
                assert!((fd - g[i]).abs() < 1e-5, "{obj:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::lin(1.5, 0.4, PriorConfig::ogd()).validate().is_err());
        assert!(ControllerConfig::laoc(-0.1, PriorConfig::ogd()).validate().is_err());
        assert!(ControllerConfig::new(ControllerKind::LinPlus, 0.0, PriorConfig::ogd()).validate().is_err());
        assert!(ControllerConfig::laoc(0.0, PriorConfig::ogd()).validate().is_ok());
    }
}
