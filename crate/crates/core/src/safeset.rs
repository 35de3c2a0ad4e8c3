//! Safe action sets with a reservation term.
//!
//! At round `h` an action `u` is admissible when
//!
//! ```text
//! R_{h-1} + r_h(x_h, u) + q_h (f(x_h, u) - f(x_h^†, u_h^†))² <= (1+λ) R_h^†
//! ```
//!
//! The reservation coefficients `q_h` shrink towards the end of the episode
//! and keep the prior's own action admissible at every later round, so the
//! set can never run empty as long as every executed action came from it.
//! The disturbance `w_h` enters both next states and cancels, which is what
//! makes the set computable before `w_h` is revealed.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{LaocError, Result};
use crate::model::{deviation_risk, risk, SystemParams};

/// Upper end of the search range for `C2`.
pub const C2_MAX: f64 = 10.0;
const C2_TOL: f64 = 1e-6;
const C2_LOWER: f64 = 1.0 + 1e-6;
/// Minimum bisection resolution on the combination weight.
pub const RHO_TOL: f64 = 1e-10;

/// Constants of the reservation function for one `(λ, horizon)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeSetParams {
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    /// `√(1+λ) - 1`, computed without cancellation, kept for cross-checks of
    /// the reservation algebra.
    pub lambda0: f64,
    /// `q_0 ..= q_H`, with `q_H = 0`.
    pub q: Vec<f64>,
}

impl SafeSetParams {
    /// Reservation constants with `C1 = 1 + 1/√(1+λ)` and `C2` minimising the
    /// action-sensitivity factor over the full horizon.
    pub fn new(params: &SystemParams, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(LaocError::InvalidSafety(format!("lambda must be positive and finite, got {lambda}")));
        }
        let c1 = optimal_c1(lambda);
        let c2 = choose_c2(params, lambda, params.horizon);
        Self::with_constants(params, lambda, c1, c2)
    }

    pub fn with_constants(params: &SystemParams, lambda: f64, c1: f64, c2: f64) -> Result<Self> {
        let q = compute_q_schedule(params, lambda, c1, c2)?;
        Ok(Self { lambda, c1, c2, lambda0: lambda / ((1.0 + lambda).sqrt() + 1.0), q })
    }

    /// Reservation coefficient for round `h` (zero past the horizon).
    pub fn q_at(&self, h: usize) -> f64 {
        self.q.get(h).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(LaocError::InvalidSafety("lambda must be positive".into()));
        }
        if self.c1 < 1.0 || self.c2 < 1.0 {
            return Err(LaocError::InvalidSafety(format!("C1 = {}, C2 = {} must both be >= 1", self.c1, self.c2)));
        }
        if self.q.iter().any(|q| !(*q >= 0.0)) {
            return Err(LaocError::InvalidSafety("reservation coefficients must be non-negative".into()));
        }
        if self.q.windows(2).any(|w| w[1] > w[0]) {
            return Err(LaocError::InvalidSafety("reservation coefficients must be non-increasing".into()));
        }
        Ok(())
    }
}

/// Optional overrides of the reservation constants. Unset fields take the
/// values chosen by [`SafeSetParams::new`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReservationConstants {
    pub c1: Option<f64>,
    pub c2: Option<f64>,
}

impl ReservationConstants {
    pub fn build(&self, params: &SystemParams, lambda: f64) -> Result<SafeSetParams> {
        let base = SafeSetParams::new(params, lambda)?;
        if self.c1.is_none() && self.c2.is_none() {
            return Ok(base);
        }
        SafeSetParams::with_constants(params, lambda, self.c1.unwrap_or(base.c1), self.c2.unwrap_or(base.c2))
    }
}

pub fn optimal_c1(lambda: f64) -> f64 {
    1.0 + 1.0 / (1.0 + lambda).sqrt()
}

/// `Σ_{k=0}^{n-1} ratio^k`, using the limit `n` at `ratio = 1`.
fn geometric_sum(ratio: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    if (ratio - 1.0).abs() < 1e-12 {
        n as f64
    } else {
        (1.0 - ratio.powi(n as i32)) / (1.0 - ratio)
    }
}

/// `q_h = C1 (1 + 1/λ) (β/2) Σ_{k=0}^{H-h-1} (C2 σ_x²)^k` for `h = 0..=H`.
pub fn compute_q_schedule(params: &SystemParams, lambda: f64, c1: f64, c2: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(LaocError::InvalidSafety(format!("lambda must be positive, got {lambda}")));
    }
    if !(c1 >= 1.0 && c2 >= 1.0) {
        return Err(LaocError::InvalidSafety(format!("C1 = {c1}, C2 = {c2} must both be >= 1")));
    }
    let horizon = params.horizon;
    let scale = c1 * (1.0 + 1.0 / lambda) * params.beta() / 2.0;
    let ratio = c2 * params.sigma_x().powi(2);
    Ok((0..=horizon).map(|h| scale * geometric_sum(ratio, horizon - h)).collect())
}

/// Objective minimised by `C2`:
/// `c/(c-1) σ_u² (1 - (c σ_x²)^H) / (1 - c σ_x²)`.
pub fn c2_objective(params: &SystemParams, c: f64, horizon: usize) -> f64 {
    let sigma_u2 = params.sigma_u().powi(2);
    c / (c - 1.0) * sigma_u2 * geometric_sum(c * params.sigma_x().powi(2), horizon)
}

/// Golden-section search for `C2` on `(1, C2_MAX]`.
///
/// When the objective keeps decreasing up to `C2_MAX` (zero state
/// sensitivity or a single-round horizon) the upper end is returned.
pub fn choose_c2(params: &SystemParams, _lambda: f64, horizon: usize) -> f64 {
    let f = |c: f64| c2_objective(params, c, horizon);
    if f(C2_MAX - C2_TOL) >= f(C2_MAX) {
        debug!("C2 objective is non-increasing up to {C2_MAX}; using the upper end");
        return C2_MAX;
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (C2_LOWER, C2_MAX);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > C2_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// `φ_h(u) = q_h (f(x_h, u) - f(x_h^†, u_h^†))²`. The demand cancels.
pub fn reservation_phi(params: &SystemParams, u: f64, x: f64, x_prior: f64, u_prior: f64, q: f64) -> f64 {
    let g = &params.pump_curve;
    let d = x + g.eval(u) - x_prior - g.eval(u_prior);
    q * d * d
}

/// Everything needed to evaluate the safe set at one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeSetInputs {
    /// R_{h-1} of the live policy.
    pub prev_risk: f64,
    /// R_h^†, including the prior's risk for the current round.
    pub prior_risk: f64,
    /// x_h
    pub x: f64,
    /// x_h^†
    pub x_prior: f64,
    /// u_h^†
    pub u_prior: f64,
    /// q_h
    pub q: f64,
    pub lambda: f64,
}

impl SafeSetInputs {
    /// `(1+λ)R_h^† - R_{h-1}`.
    pub fn budget(&self) -> f64 {
        (1.0 + self.lambda) * self.prior_risk - self.prev_risk
    }

    /// Constraint value; the action is admissible when this is `<= tolerance()`.
    pub fn excess(&self, params: &SystemParams, u: f64) -> f64 {
        risk(params, self.x, u) + reservation_phi(params, u, self.x, self.x_prior, self.u_prior, self.q) - self.budget()
    }

    /// Floating-point slack for the feasibility test, scaled to the
    /// magnitude of the ledger so rounding never empties the set.
    pub fn tolerance(&self) -> f64 {
        let scale = self.prev_risk.abs().max((1.0 + self.lambda) * self.prior_risk.abs()).max(1.0);
        (64.0 * f64::EPSILON * scale).max(1e-10)
    }

    pub fn contains(&self, params: &SystemParams, u: f64) -> bool {
        (0.0..=params.u_max).contains(&u) && self.excess(params, u) <= self.tolerance()
    }
}

/// The safe set at one round in the scalar-action case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeSetSnapshot {
    pub budget: f64,
    pub prior_state: f64,
    pub prior_action: f64,
    pub live_state: f64,
    /// `[u_lo, u_hi] ⊆ [0, u_max]`.
    pub feasible_interval: (f64, f64),
}

/// Closed-form safe interval for the identity pump curve.
///
/// Solves `dev(x_h) + γ_b η² u² + q_h (Δ + u)² <= budget` with
/// `Δ = x_h - x_h^† - u_h^†` and intersects the result with `[0, u_max]`.
pub fn safe_interval(params: &SystemParams, inputs: &SafeSetInputs) -> Result<SafeSetSnapshot> {
    if !params.pump_curve.is_identity() {
        return Err(LaocError::InvalidInput("closed-form safe interval needs the identity pump curve; use the linear mapping".into()));
    }
    let snapshot = |interval| SafeSetSnapshot {
        budget: inputs.budget(),
        prior_state: inputs.x_prior,
        prior_action: inputs.u_prior,
        live_state: inputs.x,
        feasible_interval: interval,
    };
    let empty = |detail: String| LaocError::EmptySet { round: usize::MAX, detail };

    let pw = params.power_weight();
    let q = inputs.q;
    let delta = inputs.x - inputs.x_prior - inputs.u_prior;
    // Room left for the action-dependent part.
    let room = inputs.budget() - deviation_risk(params, inputs.x) + inputs.tolerance();
    let a = pw + q;
    if a <= 0.0 {
        return if room >= 0.0 {
            Ok(snapshot((0.0, params.u_max)))
        } else {
            Err(empty(format!("action-independent risk exceeds the budget by {}", -room)))
        };
    }
    // pw u² + q (u + Δ)² = a (u - centre)² + floor
    let centre = -q * delta / a;
    let floor = q * pw * delta * delta / a;
    if room < floor {
        return Err(empty(format!("minimum constraint value exceeds the budget by {}", floor - room)));
    }
    let half = ((room - floor) / a).sqrt();
    let lo = (centre - half).max(0.0);
    let hi = (centre + half).min(params.u_max);
    if lo > hi {
        return Err(empty(format!("feasible band [{}, {}] misses [0, u_max]", centre - half, centre + half)));
    }
    Ok(snapshot((lo, hi)))
}

/// Nearest point of the interval to `u_ml`.
pub fn map_projection(u_ml: f64, interval: (f64, f64)) -> Result<f64> {
    let (lo, hi) = interval;
    if !(lo <= hi) {
        return Err(LaocError::EmptySet { round: usize::MAX, detail: format!("empty interval [{lo}, {hi}]") });
    }
    Ok(u_ml.clamp(lo, hi))
}

/// Result of the linear-combination mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearMap {
    pub action: f64,
    /// Weight on the ML action.
    pub rho: f64,
}

/// Combine `u_ml` with the prior action: the largest `ρ ∈ [0, 1]` with
/// `constraint(ρ) <= 0`, found by bisection. `constraint` must be convex in
/// `ρ` with `constraint(0) <= 0`.
pub fn map_linear<G>(u_ml: f64, u_prior: f64, constraint: G) -> Result<LinearMap>
where
    G: Fn(f64) -> f64,
{
    let g0 = constraint(0.0);
    if g0 > 0.0 {
        return Err(LaocError::InvariantViolation(format!("prior action is outside the safe set (constraint {g0:.3e} > 0)")));
    }
    if constraint(1.0) <= 0.0 {
        return Ok(LinearMap { action: u_ml, rho: 1.0 });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    // Bisect until the bracket stops shrinking; this is well past RHO_TOL.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if constraint(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    debug_assert!(hi - lo < RHO_TOL);
    Ok(LinearMap { action: lo * u_ml + (1.0 - lo) * u_prior, rho: lo })
}

/// Linear mapping specialised to the reservation-augmented safe set.
pub fn map_linear_safe(params: &SystemParams, inputs: &SafeSetInputs, u_ml: f64) -> Result<LinearMap> {
    let tol = inputs.tolerance();
    map_linear(u_ml, inputs.u_prior, |rho| inputs.excess(params, rho * u_ml + (1.0 - rho) * inputs.u_prior) - tol)
}

/// Verdict of the reservation-free safe set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NaiveVerdict {
    Feasible,
    Infeasible,
    /// No action in `[0, u_max]` satisfies the constraint.
    Empty,
}

/// The reservation-free set `{u : R_{h-1} + r_h(x_h, u) <= (1+λ) R_h^†}`.
/// Returns `None` when it is empty.
pub fn naive_safe_interval(params: &SystemParams, prev_risk: f64, prior_risk: f64, x: f64, lambda: f64) -> Option<(f64, f64)> {
    let inputs = SafeSetInputs { prev_risk, prior_risk, x, x_prior: x, u_prior: 0.0, q: 0.0, lambda };
    let room = inputs.budget() - deviation_risk(params, x) + inputs.tolerance();
    if room < 0.0 {
        return None;
    }
    let pw = params.power_weight();
    if pw <= 0.0 {
        return Some((0.0, params.u_max));
    }
    Some((0.0, (room / pw).sqrt().min(params.u_max)))
}

pub fn naive_safe_set_membership(params: &SystemParams, u: f64, prev_risk: f64, prior_risk: f64, x: f64, lambda: f64) -> NaiveVerdict {
    match naive_safe_interval(params, prev_risk, prior_risk, x, lambda) {
        None => NaiveVerdict::Empty,
        Some((lo, hi)) if (lo..=hi).contains(&u) => NaiveVerdict::Feasible,
        Some(_) => NaiveVerdict::Infeasible,
    }
}

/// Gap between `C1 (1+1/λ) β/2` with the optimal `C1` and `(1+1/λ0) β/2`.
pub fn reservation_identity_gap(lambda: f64, beta: f64) -> f64 {
    let lambda0 = lambda / ((1.0 + lambda).sqrt() + 1.0);
    let lhs = optimal_c1(lambda) * (1.0 + 1.0 / lambda) * beta / 2.0;
    let rhs = (1.0 + 1.0 / lambda0) * beta / 2.0;
    (lhs - rhs).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params_h(horizon: usize) -> SystemParams {
        SystemParams { horizon, ..SystemParams::default() }
    }

    #[test]
    fn q_schedule_examples() {
        let p = params_h(6);
        let q = compute_q_schedule(&p, 1.0, 1.0, 1.0).unwrap();
        // beta = 2, so every term of the sum contributes 2.
        for (h, qh) in q.iter().enumerate() {
            assert_abs_diff_eq!(*qh, 2.0 * (6 - h) as f64, epsilon = 1e-12);
        }
        let q = compute_q_schedule(&p, 0.8, 1.3, 1.7).unwrap();
        assert_abs_diff_eq!(q[5], 1.3 * (1.0 + 1.0 / 0.8) * 1.0, epsilon = 1e-12);
        assert_eq!(q[6], 0.0);
    }

    #[test]
    fn q_schedule_matches_explicit_loop() {
        let p = params_h(4);
        let lambda = 0.8;
        let c1 = optimal_c1(lambda);
        let q = compute_q_schedule(&p, lambda, c1, 1.5).unwrap();
        let mut sum = 0.0;
        let mut term = 1.0;
        for _ in 0..3 {
            sum += term;
            term *= 1.5;
        }
        let expected = c1 * (1.0 + 1.0 / lambda) * 1.0 * sum;
        assert_abs_diff_eq!(q[1], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], 18.653, epsilon = 1e-3);
    }

    #[test]
    fn q_schedule_rejects_bad_constants() {
        let p = params_h(4);
        assert!(matches!(compute_q_schedule(&p, 0.0, 1.0, 1.0), Err(LaocError::InvalidSafety(_))));
        assert!(matches!(compute_q_schedule(&p, -1.0, 1.0, 1.0), Err(LaocError::InvalidSafety(_))));
        assert!(compute_q_schedule(&p, 1.0, 0.5, 1.0).is_err());
        assert!(SafeSetParams::new(&p, 0.0).is_err());
    }

    #[test]
    fn c2_upper_end_for_single_round() {
        let p = params_h(1);
        assert_eq!(choose_c2(&p, 0.4, 1), C2_MAX);
    }

    #[test]
    fn c2_matches_dense_grid() {
        let p = params_h(24);
        let c2 = choose_c2(&p, 0.4, 24);
        let n = 1_000_000;
        let (mut best_c, mut best_f) = (f64::NAN, f64::INFINITY);
        for i in 1..=n {
            let c = 1.0 + 9.0 * i as f64 / n as f64;
            let f = c2_objective(&p, c, 24);
            if f < best_f {
                best_f = f;
                best_c = c;
            }
        }
        assert!((c2 - best_c).abs() < 1e-4, "golden {c2} vs grid {best_c}");
    }

    #[test]
    fn phi_examples() {
        let p = SystemParams::default();
        assert_eq!(reservation_phi(&p, 3.0, 40.0, 40.0, 3.0, 5.0), 0.0);
        assert_eq!(reservation_phi(&p, 3.0, 41.0, 40.0, 2.0, 2.0), 8.0);
        assert_eq!(reservation_phi(&p, 9.0, 12.0, 40.0, 2.0, 0.0), 0.0);
    }

    #[test]
    fn phi_is_computable_before_demand() {
        // Adding the same demand to both next states leaves phi unchanged.
        let p = SystemParams::default();
        for w in [0.0f64, 1.5, 7.25] {
            let next = 41.0 + 3.0 - w;
            let next_prior = 40.0 + 2.0 - w;
            assert_abs_diff_eq!(2.0 * (next - next_prior).powi(2), reservation_phi(&p, 3.0, 41.0, 40.0, 2.0, 2.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn interval_is_full_when_constraint_inactive() {
        let p = SystemParams { gamma_b: 0.0, ..SystemParams::default() };
        let inputs = SafeSetInputs { prev_risk: 0.0, prior_risk: 100.0, x: 42.0, x_prior: 40.0, u_prior: 1.0, q: 0.0, lambda: 0.5 };
        let s = safe_interval(&p, &inputs).unwrap();
        assert_eq!(s.feasible_interval, (0.0, p.u_max));
    }

    #[test]
    fn interval_degenerates_at_tight_budget() {
        let p = SystemParams::default();
        let (x, xp, up, q) = (38.0, 40.0, 2.0, 5.0);
        // Budget equal to the constraint minimum leaves a single point.
        let pw = p.power_weight();
        let delta = x - xp - up;
        let centre = -q * delta / (pw + q);
        let minimum = risk(&p, x, centre) + reservation_phi(&p, centre, x, xp, up, q);
        let inputs = SafeSetInputs { prev_risk: 0.0, prior_risk: minimum / 1.5, x, x_prior: xp, u_prior: up, q, lambda: 0.5 };
        let s = safe_interval(&p, &inputs).unwrap();
        let (lo, hi) = s.feasible_interval;
        assert!(lo <= centre && centre <= hi);
        // Tolerance-sized band around the single admissible point.
        assert!(hi - lo < 1e-4, "{lo} {hi}");
    }

    #[test]
    fn interval_matches_grid_scan() {
        let p = SystemParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let step = p.u_max / n as f64;
        for _ in 0..200 {
            let x = rng.random_range(20.0..60.0);
            let xp = rng.random_range(20.0..60.0);
            let up = rng.random_range(0.0..p.u_max);
            let q = rng.random_range(0.0..50.0);
            let lambda = rng.random_range(0.05..2.0);
            let prev = rng.random_range(0.0..500.0);
            let prior = rng.random_range(0.0..800.0);
            let inputs = SafeSetInputs { prev_risk: prev, prior_risk: prior, x, x_prior: xp, u_prior: up, q, lambda };
            let feasible: Vec<f64> = (0..=n).map(|i| i as f64 * step).filter(|u| inputs.excess(&p, *u) <= 0.0).collect();
            match safe_interval(&p, &inputs) {
                Ok(s) => {
                    let (lo, hi) = s.feasible_interval;
                    if let (Some(first), Some(last)) = (feasible.first(), feasible.last()) {
                        assert!((first - lo).abs() <= step + 1e-9, "lo {lo} vs {first}");
                        assert!((last - hi).abs() <= step + 1e-9, "hi {hi} vs {last}");
                    } else {
                        assert!(hi - lo <= step, "grid saw nothing but interval is [{lo}, {hi}]");
                    }
                }
                Err(LaocError::EmptySet { .. }) => assert!(feasible.is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(map_projection(3.0, (1.0, 5.0)).unwrap(), 3.0);
        assert_eq!(map_projection(10.0, (1.0, 5.0)).unwrap(), 5.0);
        assert_eq!(map_projection(0.0, (1.0, 5.0)).unwrap(), 1.0);
        assert!(map_projection(0.0, (2.0, 1.0)).is_err());
    }

    #[test]
    fn linear_map_fixed_points() {
        let m = map_linear(4.0, 4.0, |_| -1.0).unwrap();
        assert_eq!((m.action, m.rho), (4.0, 1.0));
        let m = map_linear(7.0, 2.0, |rho| rho - 2.0).unwrap();
        assert_eq!(m.rho, 1.0);
        assert!(matches!(map_linear(1.0, 0.0, |_| 1.0), Err(LaocError::InvariantViolation(_))));
    }

    #[test]
    fn linear_map_root_matches_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            // Convex quadratic with g(0) <= 0 < g(1).
            let a = rng.random_range(0.0..5.0);
            let root = rng.random_range(0.01..0.99);
            let slope = rng.random_range(0.1..3.0);
            let g = |r: f64| a * (r - root) * (r + 0.5) + slope * (r - root);
            let m = map_linear(10.0, 0.0, g).unwrap();
            assert!(g(m.rho).abs() < 1e-8);
            let n = 1_000_000;
            let grid_root = (0..=n).map(|i| i as f64 / n as f64).filter(|r| g(*r) <= 0.0).fold(0.0, f64::max);
            assert!((m.rho - grid_root).abs() <= 2e-6);
        }
    }

    #[test]
    fn naive_set_examples() {
        let p = SystemParams::default();
        assert_eq!(naive_safe_interval(&p, 0.0, 1e9, 40.0, 0.5), Some((0.0, p.u_max)));
        assert_eq!(naive_safe_set_membership(&p, 3.0, 0.0, 1e9, 40.0, 0.5), NaiveVerdict::Feasible);
        // (45-40)² = 25 > 1.5 * 10
        assert_eq!(naive_safe_set_membership(&p, 0.0, 0.0, 10.0, 45.0, 0.5), NaiveVerdict::Empty);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let x = rng.random_range(30.0..50.0);
            let prev = rng.random_range(0.0..100.0);
            let prior = rng.random_range(0.0..100.0);
            let u = rng.random_range(0.0..p.u_max);
            let lambda = rng.random_range(0.1..1.0);
            let direct = prev + risk(&p, x, u) <= (1.0 + lambda) * prior;
            let any = (0..=10_000).any(|i| prev + risk(&p, x, p.u_max * i as f64 / 1e4) <= (1.0 + lambda) * prior);
            match naive_safe_set_membership(&p, u, prev, prior, x, lambda) {
                NaiveVerdict::Feasible => assert!(direct || (prev + risk(&p, x, u) - (1.0 + lambda) * prior) < 1e-8),
                NaiveVerdict::Infeasible => assert!(!direct && any),
                NaiveVerdict::Empty => assert!(!any),
            }
        }
    }

    #[test]
    fn projection_and_linear_agree_in_one_dimension() {
        let p = SystemParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let x = rng.random_range(30.0..50.0);
            let xp = rng.random_range(30.0..50.0);
            let up = rng.random_range(0.0..p.u_max);
            let q = rng.random_range(1.0..40.0);
            let lambda = 0.4;
            let base = risk(&p, x, up) + reservation_phi(&p, up, x, xp, up, q);
            let prior = base / 1.4 + rng.random_range(0.0..20.0);
            let inputs = SafeSetInputs { prev_risk: 0.0, prior_risk: prior, x, x_prior: xp, u_prior: up, q, lambda };
            let u_ml = rng.random_range(0.0..p.u_max);
            let s = safe_interval(&p, &inputs).unwrap();
            let proj = map_projection(u_ml, s.feasible_interval).unwrap();
            let lin = map_linear_safe(&p, &inputs, u_ml).unwrap();
            assert!((proj - lin.action).abs() < 1e-6, "{proj} vs {}", lin.action);
            assert_eq!(inputs.contains(&p, u_ml), lin.rho == 1.0);
            assert!(inputs.excess(&p, proj) <= 1e-8);
            assert!(inputs.excess(&p, lin.action) <= 1e-8);
        }
    }

    #[test]
    fn reservation_identity() {
        for lambda in [0.01, 0.1, 0.4, 1.0, 2.0, 10.0] {
            assert!(reservation_identity_gap(lambda, 2.0) < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(u in -5.0..20.0f64, a in 0.0..12.0f64, w in 0.0..12.0f64) {
            let iv = (a, (a + w).min(12.0));
            let once = map_projection(u, iv).unwrap();
            prop_assert_eq!(map_projection(once, iv).unwrap(), once);
        }

        #[test]
        fn q_is_monotone(lambda in 0.01..10.0f64, horizon in 1usize..48) {
            let p = params_h(horizon);
            let s = SafeSetParams::new(&p, lambda).unwrap();
            s.validate().unwrap();
            prop_assert_eq!(s.q[horizon], 0.0);
            for h in 1..=horizon {
                // q_h σ_x² <= q_{h-1} - C1 (1+1/λ) β/2
                let step = s.c1 * (1.0 + 1.0 / lambda) * p.beta() / 2.0;
                prop_assert!(s.q[h] <= s.q[h - 1] - step + 1e-9 * s.q[0]);
            }
        }
    }
}
