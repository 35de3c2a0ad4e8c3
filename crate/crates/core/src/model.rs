//! Water-tank model: domain types, dynamics, per-round loss and risk.
//!
//! Units are fixed throughout the crate: hours, m³, kWh, grams of CO₂ and
//! US dollars. The water level is never clamped to the tank bounds; an
//! excursion shows up as deviation risk instead.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, LaocError, Result};

/// How deviation from the nominal level is penalised in the risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistMode {
    /// `gamma_w * (x - x̄)²` on both sides.
    #[default]
    Symmetric,
    /// `gamma_w_lo` below the nominal level, `gamma_w_hi` above it.
    Asymmetric,
}

/// Maps the control signal to delivered volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PumpCurve {
    #[default]
    Identity,
    /// Monotone piecewise-linear curve through `(u, g(u))` knots sorted by `u`.
    /// The first knot must sit at `u = 0`; the curve is extended flat past the
    /// last knot.
    PiecewiseLinear { points: Vec<(f64, f64)> },
}

impl PumpCurve {
    pub fn is_identity(&self) -> bool {
        matches!(self, PumpCurve::Identity)
    }

    pub fn eval(&self, u: f64) -> f64 {
        match self {
            PumpCurve::Identity => u,
            PumpCurve::PiecewiseLinear { points } => {
                let (i, t) = Self::locate(points, u);
                let (u0, g0) = points[i];
                let (u1, g1) = points[(i + 1).min(points.len() - 1)];
                if u1 > u0 {
                    g0 + (g1 - g0) * (t - u0) / (u1 - u0)
                } else {
                    g0
                }
            }
        }
    }

    /// Right derivative of the curve (the slope of the segment containing `u`).
    pub fn slope(&self, u: f64) -> f64 {
        match self {
            PumpCurve::Identity => 1.0,
            PumpCurve::PiecewiseLinear { points } => {
                let (i, _) = Self::locate(points, u);
                let (u0, g0) = points[i];
                let (u1, g1) = points[(i + 1).min(points.len() - 1)];
                if u1 > u0 {
                    (g1 - g0) / (u1 - u0)
                } else {
                    0.0
                }
            }
        }
    }

    /// Lipschitz constant of the curve.
    pub fn lipschitz(&self) -> f64 {
        match self {
            PumpCurve::Identity => 1.0,
            PumpCurve::PiecewiseLinear { points } => {
                points.windows(2).filter(|w| w[1].0 > w[0].0).map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).fold(0.0, f64::max)
            }
        }
    }

    fn locate(points: &[(f64, f64)], u: f64) -> (usize, f64) {
        let last = points.len() - 1;
        if u >= points[last].0 {
            return (last, points[last].0);
        }
        let i = points.windows(2).position(|w| u < w[1].0).unwrap_or(last);
        (i, u)
    }

    fn validate(&self) -> Result<()> {
        if let PumpCurve::PiecewiseLinear { points } = self {
            if points.len() < 2 {
                return Err(LaocError::InvalidInput("pump curve needs at least two knots".into()));
            }
            if points[0].0 != 0.0 {
                return Err(LaocError::InvalidInput("pump curve must start at u = 0".into()));
            }
            for w in points.windows(2) {
                if !(w[1].0 > w[0].0) || w[1].1 < w[0].1 {
                    return Err(LaocError::InvalidInput("pump curve knots must be strictly increasing in u and monotone in g".into()));
                }
            }
        }
        Ok(())
    }
}

/// Physical and weighting constants of the rooftop tank model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemParams {
    /// m³
    pub tank_capacity: f64,
    /// x̄, m³
    pub nominal_level: f64,
    /// Level at the start of every episode, m³.
    pub initial_level: f64,
    /// m³ per hour
    pub u_max: f64,
    /// kWh per m³ pumped
    pub eta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma_w: f64,
    pub gamma_b: f64,
    pub gamma_w_lo: f64,
    pub gamma_w_hi: f64,
    pub dist_mode: DistMode,
    pub pump_curve: PumpCurve,
    /// Rounds per episode.
    pub horizon: usize,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            tank_capacity: 80.0,
            nominal_level: 40.0,
            initial_level: 40.0,
            u_max: 12.0,
            eta: 0.272,
            gamma1: 0.1,
            gamma2: 0.02,
            gamma3: 60.0,
            gamma_w: 1.0,
            gamma_b: 1.0,
            gamma_w_lo: 1.0,
            gamma_w_hi: 1.0,
            dist_mode: DistMode::Symmetric,
            pump_curve: PumpCurve::Identity,
            horizon: 24,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tank_capacity", self.tank_capacity),
            ("nominal_level", self.nominal_level),
            ("initial_level", self.initial_level),
            ("u_max", self.u_max),
            ("eta", self.eta),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("gamma_w", self.gamma_w),
            ("gamma_b", self.gamma_b),
            ("gamma_w_lo", self.gamma_w_lo),
            ("gamma_w_hi", self.gamma_w_hi),
        ] {
            ensure_finite(name, v)?;
        }
        if !(self.nominal_level > 0.0 && self.nominal_level <= self.tank_capacity) {
            return Err(LaocError::InvalidInput(format!("nominal level {} must lie in (0, {}]", self.nominal_level, self.tank_capacity)));
        }
        if self.u_max <= 0.0 {
            return Err(LaocError::InvalidInput("u_max must be positive".into()));
        }
        if self.eta <= 0.0 {
            return Err(LaocError::InvalidInput("eta must be positive".into()));
        }
        let gammas = [self.gamma1, self.gamma2, self.gamma3, self.gamma_w, self.gamma_b, self.gamma_w_lo, self.gamma_w_hi];
        if gammas.iter().any(|g| *g < 0.0) {
            return Err(LaocError::InvalidInput("loss and risk weights must be non-negative".into()));
        }
        if self.horizon == 0 {
            return Err(LaocError::InvalidInput("horizon must be at least 1".into()));
        }
        let (alpha, beta) = (self.alpha(), self.beta());
        if !(alpha > 0.0 && beta >= alpha) {
            return Err(LaocError::InvalidInput(format!("risk must be strongly convex and smooth (alpha = {alpha}, beta = {beta})")));
        }
        self.pump_curve.validate()
    }

    /// Deviation weights below and above the nominal level.
    pub fn deviation_weights(&self) -> (f64, f64) {
        match self.dist_mode {
            DistMode::Symmetric => (self.gamma_w, self.gamma_w),
            DistMode::Asymmetric => (self.gamma_w_lo, self.gamma_w_hi),
        }
    }

    /// Curvature of the power-load term in `u`, `gamma_b * eta²`.
    pub fn power_weight(&self) -> f64 {
        self.gamma_b * self.eta * self.eta
    }

    /// Smoothness constant of the risk in `(x, u)`.
    pub fn beta(&self) -> f64 {
        let (lo, hi) = self.deviation_weights();
        2.0 * lo.max(hi).max(self.power_weight())
    }

    /// Strong-convexity constant of the risk in `(x, u)`.
    pub fn alpha(&self) -> f64 {
        let (lo, hi) = self.deviation_weights();
        2.0 * lo.min(hi).min(self.power_weight())
    }

    /// Lipschitz constant of the dynamics in the level (always 1 for a tank).
    pub fn sigma_x(&self) -> f64 {
        1.0
    }

    /// Lipschitz constant of the dynamics in the action.
    pub fn sigma_u(&self) -> f64 {
        self.pump_curve.lipschitz()
    }

    pub fn clamp_action(&self, u: f64) -> f64 {
        u.clamp(0.0, self.u_max)
    }
}

/// One hour of context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// w_h, m³
    pub demand: f64,
    /// e_h, g/kWh
    pub carbon_intensity: f64,
    /// p_h, $/kWh
    pub price: f64,
}

impl TraceStep {
    pub fn new(demand: f64, carbon_intensity: f64, price: f64) -> Self {
        Self { demand, carbon_intensity, price }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("demand", self.demand), ("carbon_intensity", self.carbon_intensity), ("price", self.price)] {
            ensure_finite(name, v)?;
            if v < 0.0 {
                return Err(LaocError::InvalidInput(format!("{name} must be non-negative ({v})")));
            }
        }
        Ok(())
    }
}

/// An H-step sequence of trace steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub steps: Vec<TraceStep>,
}

impl Episode {
    pub fn new(id: impl Into<String>, steps: Vec<TraceStep>) -> Self {
        Self { id: id.into(), steps }
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn demands(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.demand)
    }

    pub fn validate(&self, params: &SystemParams) -> Result<()> {
        if self.steps.len() != params.horizon {
            return Err(LaocError::InvalidInput(format!("episode {} has {} steps, expected {}", self.id, self.steps.len(), params.horizon)));
        }
        self.steps.iter().try_for_each(TraceStep::validate)
    }
}

/// Level after one hour: `x + g(u) - w`.
pub fn step_dynamics(params: &SystemParams, x: f64, u: f64, w: f64) -> Result<f64> {
    ensure_finite("level", x)?;
    ensure_finite("action", u)?;
    ensure_finite("demand", w)?;
    if u < 0.0 || u > params.u_max {
        return Err(LaocError::InvalidInput(format!("action {u} outside [0, {}]", params.u_max)));
    }
    Ok(next_level(params, x, u, w))
}

/// Unchecked form of [`step_dynamics`] for inner loops.
#[inline]
pub fn next_level(params: &SystemParams, x: f64, u: f64, w: f64) -> f64 {
    x + params.pump_curve.eval(u) - w
}

/// Per-round loss split into its weighted terms plus the raw quantities
/// used for metric accounting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `gamma1 * (x - x̄)²`
    pub deviation: f64,
    /// `gamma2 * e * eta * u`
    pub carbon: f64,
    /// `gamma3 * p * eta * u`
    pub energy: f64,
    pub total: f64,
    /// Emitted CO₂ in grams.
    pub carbon_g: f64,
    /// Energy bill in dollars.
    pub energy_usd: f64,
}

pub fn loss(params: &SystemParams, x: f64, u: f64, step: &TraceStep) -> LossBreakdown {
    let dev = x - params.nominal_level;
    let kwh = params.eta * u;
    let carbon_g = step.carbon_intensity * kwh;
    let energy_usd = step.price * kwh;
    let deviation = params.gamma1 * dev * dev;
    let carbon = params.gamma2 * carbon_g;
    let energy = params.gamma3 * energy_usd;
    LossBreakdown { deviation, carbon, energy, total: deviation + carbon + energy, carbon_g, energy_usd }
}

/// Partial derivatives of the loss, `(∂c/∂x, ∂c/∂u)`.
pub fn loss_grad(params: &SystemParams, x: f64, step: &TraceStep) -> (f64, f64) {
    let dx = 2.0 * params.gamma1 * (x - params.nominal_level);
    let du = params.eta * (params.gamma2 * step.carbon_intensity + params.gamma3 * step.price);
    (dx, du)
}

/// Deviation part of the risk, `dist(x, x̄)`.
#[inline]
pub fn deviation_risk(params: &SystemParams, x: f64) -> f64 {
    let (lo, hi) = params.deviation_weights();
    let d = x - params.nominal_level;
    if d <= 0.0 {
        lo * d * d
    } else {
        hi * d * d
    }
}

#[inline]
pub fn deviation_risk_grad(params: &SystemParams, x: f64) -> f64 {
    let (lo, hi) = params.deviation_weights();
    let d = x - params.nominal_level;
    if d <= 0.0 {
        2.0 * lo * d
    } else {
        2.0 * hi * d
    }
}

/// Per-round safety risk: deviation penalty plus quadratic power load.
#[inline]
pub fn risk(params: &SystemParams, x: f64, u: f64) -> f64 {
    deviation_risk(params, x) + params.power_weight() * u * u
}

/// Partial derivatives of the risk, `(∂r/∂x, ∂r/∂u)`.
#[inline]
pub fn risk_grad(params: &SystemParams, x: f64, u: f64) -> (f64, f64) {
    (deviation_risk_grad(params, x), 2.0 * params.power_weight() * u)
}

/// Running totals for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RiskLedger {
    /// Cumulative risk of the live policy, R_h.
    pub risk: f64,
    /// Cumulative risk of the prior's virtual trajectory, R_h^†.
    pub prior_risk: f64,
    /// Cumulative loss, J_h.
    pub loss: f64,
    /// Rounds recorded so far.
    pub rounds: usize,
}

impl RiskLedger {
    pub fn record(&mut self, live_risk: f64, prior_risk: f64, loss: f64) -> Result<()> {
        if !(live_risk >= 0.0 && prior_risk >= 0.0 && loss >= 0.0) {
            return Err(LaocError::InvariantViolation(format!(
                "negative or NaN ledger increment at round {} (risk {live_risk}, prior {prior_risk}, loss {loss})",
                self.rounds
            )));
        }
        self.risk += live_risk;
        self.prior_risk += prior_risk;
        self.loss += loss;
        self.rounds += 1;
        Ok(())
    }

    /// Remaining risk allowance `(1+λ)R_h^† - R_{h-1}` once the prior's risk
    /// for the current round has been booked.
    pub fn budget(&self, lambda: f64) -> f64 {
        (1.0 + lambda) * self.prior_risk - self.risk
    }
}
