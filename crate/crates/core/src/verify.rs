//! Acceptance checks, shared by the `verify` command and the test suite.
//!
//! Each check returns one or more [`CheckResult`] lines. Episode counts are
//! reduced in quick mode; tolerances never are.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controllers::{
    laoc_run, lin_plus_run, lin_run, opt_offline, plan_objective, prior_only_run, pure_ml_run, ConstantPolicy, ControllerConfig, ControllerKind,
    EpisodeResult, Mapping, MlPolicy, OptObjective, UniformRandomPolicy,
};
use crate::harness::{evaluate, run_batch, summarize, EvalOptions};
use crate::learning::{batch_gradient, finetune_safe, train_pure, Normalizers, PolicyNet, SafeContext, TrainConfig, UnrollStats, N_PARAMS};
use crate::model::{deviation_risk, next_level, risk, Episode, SystemParams, TraceStep};
use crate::priors::{mpc_objective, mpc_plan, robd_step, PriorConfig};
use crate::safeset::{map_linear, reservation_identity_gap, reservation_phi, safe_interval, SafeSetInputs, SafeSetParams};
use crate::traces::{gen_synthetic, TraceProfile};

/// Outcome of one acceptance criterion (or one clause of it).
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub id: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(id: &str, name: &str, passed: bool, detail: String) -> Self {
        Self { id: id.into(), name: name.into(), passed, detail }
    }

    pub fn line(&self) -> String {
        format!("[{}] {} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.id, self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub quick: bool,
    pub seed: u64,
    pub jobs: Option<usize>,
    /// Replace every reservation coefficient by zero. Negative control for
    /// the non-emptiness check.
    pub corrupt_reservation: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { quick: false, seed: 2024, jobs: None, corrupt_reservation: false }
    }
}

/// Shared state for a verification run: data sets and the trained policy.
pub struct VerifyContext {
    pub opts: VerifyOptions,
    pub params: SystemParams,
    pub prior: PriorConfig,
    train_set: Vec<Episode>,
    trained: OnceLock<PolicyNet>,
}

impl VerifyContext {
    pub fn new(opts: VerifyOptions) -> crate::Result<Self> {
        let params = SystemParams::default();
        let train_set = gen_synthetic(opts.seed, 200, params.horizon, &TraceProfile::default())?;
        Ok(Self { opts, params, prior: PriorConfig::ogd(), train_set, trained: OnceLock::new() })
    }

    fn scale(&self, full: usize, quick: usize) -> usize {
        if self.opts.quick {
            quick
        } else {
            full
        }
    }

    fn eval(&self) -> EvalOptions {
        EvalOptions { jobs: self.opts.jobs, ..EvalOptions::default() }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.scale(400, 100), seed: self.opts.seed, ..TrainConfig::default() }
    }

    /// Policy trained on the average loss, computed once per context.
    pub fn trained_policy(&self) -> &PolicyNet {
        self.trained
            .get_or_init(|| train_pure(&self.train_set, &self.params, &self.train_config()).expect("training on generated traces succeeds").policy)
    }

    pub fn untrained_policy(&self) -> PolicyNet {
        PolicyNet::init(self.opts.seed.wrapping_add(77), Normalizers::from_episodes(&self.train_set))
    }

    fn episodes(&self, offset: u64, n: usize) -> Vec<Episode> {
        gen_synthetic(self.opts.seed.wrapping_add(offset), n, self.params.horizon, &TraceProfile::default()).expect("default profile is valid")
    }

    fn safe_params(&self, lambda: f64) -> SafeSetParams {
        let mut safe = SafeSetParams::new(&self.params, lambda).expect("positive lambda");
        if self.opts.corrupt_reservation {
            safe.q.iter_mut().for_each(|q| *q = 0.0);
        }
        safe
    }
}

/// Run every check in order.
pub fn run_all(ctx: &VerifyContext) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.extend(check_safety_and_nonemptiness(ctx));
    out.extend(check_lin_failures(ctx));
    out.push(check_prior_copy(ctx));
    out.push(check_large_lambda(ctx));
    out.extend(check_tradeoff(ctx));
    out.extend(check_oracles(ctx));
    out.push(check_gradients(ctx));
    out.push(check_finetuning(ctx));
    out.push(check_reservation_algebra(ctx));
    out.push(check_reproducibility(ctx));
    out
}

/// Criteria 1 and 2: ledger safety and safe-set non-emptiness under three
/// ML policies and four margins.
pub fn check_safety_and_nonemptiness(ctx: &VerifyContext) -> Vec<CheckResult> {
    let n = ctx.scale(10_000, 1_000);
    let episodes = ctx.episodes(1, n);
    let trained = ctx.trained_policy().clone();
    let untrained = ctx.untrained_policy();
    let adversary = UniformRandomPolicy { seed: ctx.opts.seed };
    let policies: [(&str, &dyn MlPolicy); 3] = [("trained", &trained), ("untrained", &untrained), ("adversarial", &adversary)];
    let lambdas = [0.1, 0.4, 0.8, 2.0];
    let mut rounds = 0usize;
    let mut violations = 0usize;
    let mut set_failures = 0usize;
    let mut aborted = 0usize;
    let mut first_failure = None;
    for &lambda in &lambdas {
        let safe = ctx.safe_params(lambda);
        for (name, policy) in policies {
            for ep in &episodes {
                match laoc_run(ep, &ctx.params, Some(&safe), &ctx.prior, Mapping::Linear, policy) {
                    Ok(r) => {
                        rounds += r.horizon();
                        violations += r.violations.iter().filter(|v| **v).count();
                        let bad = interval_failures(&ctx.params, &safe, &r);
                        if bad > 0 && first_failure.is_none() {
                            first_failure = Some(format!("{name} policy, λ={lambda}, episode {}", ep.id));
                        }
                        set_failures += bad;
                    }
                    Err(e) => {
                        set_failures += 1;
                        aborted += 1;
                        if first_failure.is_none() {
                            first_failure = Some(format!("{name} policy, λ={lambda}, episode {}: {e}", ep.id));
                        }
                    }
                }
            }
        }
    }
    let detail_tail = first_failure.map(|f| format!("; first failure: {f}")).unwrap_or_default();
    vec![
        CheckResult::new(
            "C1",
            "safety guarantee",
            violations == 0 && aborted == 0,
            format!(
                "{rounds} rounds over {n} episodes x 4 lambdas x 3 policies, {violations} with R_h > (1+λ)R_h† + 1e-8, {aborted} episodes aborted"
            ),
        ),
        CheckResult::new(
            "C2",
            "safe-set non-emptiness",
            set_failures == 0,
            format!("{set_failures} empty sets or excluded prior actions{detail_tail}"),
        ),
    ]
}

/// Recompute the safe interval of every round from the stored ledgers and
/// count rounds where it is empty or misses the prior action.
fn interval_failures(params: &SystemParams, safe: &SafeSetParams, r: &EpisodeResult) -> usize {
    (0..r.horizon())
        .filter(|&h| {
            let inputs = SafeSetInputs {
                prev_risk: if h == 0 { 0.0 } else { r.cum_risk[h - 1] },
                prior_risk: r.cum_prior_risk[h],
                x: r.x[h],
                x_prior: r.x_prior[h],
                u_prior: r.u_prior[h],
                q: safe.q_at(h),
                lambda: safe.lambda,
            };
            match safe_interval(params, &inputs) {
                Ok(s) => {
                    let (lo, hi) = s.feasible_interval;
                    !(lo <= inputs.u_prior && inputs.u_prior <= hi)
                }
                Err(_) => true,
            }
        })
        .count()
}

/// Criterion 3: random search for a Lin violation and a Lin+ empty set.
pub fn check_lin_failures(ctx: &VerifyContext) -> Vec<CheckResult> {
    let n = 1_000;
    let small = SystemParams { tank_capacity: 40.0, nominal_level: 20.0, initial_level: 20.0, ..ctx.params.clone() };
    let episodes = gen_synthetic(ctx.opts.seed.wrapping_add(3), n, small.horizon, &TraceProfile::default()).expect("default profile is valid");
    let flood = ConstantPolicy(small.u_max);
    let mut lin_hits = 0;
    let mut empty_hits = 0;
    for ep in &episodes {
        if let Ok(r) = lin_run(ep, &small, 0.5, 0.4, &ctx.prior, false, &flood) {
            lin_hits += usize::from(r.violated());
        }
        if let Ok(r) = lin_plus_run(ep, &small, 0.4, &ctx.prior, &flood) {
            empty_hits += usize::from(!r.empty_events.is_empty());
        }
    }
    vec![
        CheckResult::new("C3a", "Lin violates (1+λ)-safety", lin_hits >= 1, format!("{lin_hits}/{n} episodes of Lin(ρ=0.5) exceed 1.4·R†")),
        CheckResult::new(
            "C3b",
            "Lin+ naive set can be empty",
            empty_hits >= 1,
            format!("{empty_hits}/{n} episodes of Lin+(λ=0.4) hit an empty naive set"),
        ),
    ]
}

/// Criterion 4: λ = 0 reproduces the prior bit for bit.
pub fn check_prior_copy(ctx: &VerifyContext) -> CheckResult {
    let episodes = ctx.episodes(4, 100);
    let policy = ctx.trained_policy();
    let mismatches = episodes
        .iter()
        .filter(|ep| {
            let a = laoc_run(ep, &ctx.params, None, &ctx.prior, Mapping::Linear, policy).expect("prior copy runs");
            let b = prior_only_run(ep, &ctx.params, 0.0, &ctx.prior).expect("prior runs");
            let same = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
            !(same(&a.u, &b.u) && same(&a.x, &b.x))
        })
        .count();
    CheckResult::new("C4", "λ=0 reduction", mismatches == 0, format!("{mismatches}/100 episodes differ from the prior"))
}

/// Criterion 5: with a vacuous margin LAOC follows the ML policy exactly.
pub fn check_large_lambda(ctx: &VerifyContext) -> CheckResult {
    let episodes = ctx.episodes(5, 100);
    let policy = ctx.trained_policy();
    let safe = ctx.safe_params(1e6);
    let mut binding = 0;
    let mut mismatched = 0;
    for ep in &episodes {
        let a = match laoc_run(ep, &ctx.params, Some(&safe), &ctx.prior, Mapping::Linear, policy) {
            Ok(a) => a,
            Err(e) => return CheckResult::new("C5", "large-λ consistency", false, format!("{}: {e}", ep.id)),
        };
        let b = pure_ml_run(ep, &ctx.params, 1e6, &ctx.prior, policy).expect("ml runs");
        binding += a.binding_count();
        mismatched += a.u.iter().zip(&b.u).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    }
    CheckResult::new(
        "C5",
        "large-λ consistency",
        binding == 0 && mismatched == 0,
        format!("{binding} binding rounds, {mismatched} rounds differing from pure ML over 100 episodes"),
    )
}

/// Grid of margins for the trade-off curve.
pub const TRADEOFF_LAMBDAS: [f64; 5] = [0.0, 0.2, 0.4, 0.8, 1.6];

/// Criterion 6: LAOC's average loss over λ.
pub fn check_tradeoff(ctx: &VerifyContext) -> Vec<CheckResult> {
    let episodes = ctx.episodes(6, 500);
    let policy = ctx.trained_policy();
    let controllers = [
        ControllerConfig::laoc(0.0, ctx.prior.clone()),
        ControllerConfig::new(ControllerKind::PriorOnly, 0.0, ctx.prior.clone()),
        ControllerConfig::new(ControllerKind::PureMl, 0.0, ctx.prior.clone()),
    ];
    let table = evaluate(&controllers, &episodes, &TRADEOFF_LAMBDAS, "tradeoff", &ctx.params, policy, ctx.eval()).expect("evaluation runs");
    let laoc: Vec<f64> = TRADEOFF_LAMBDAS.iter().map(|l| table.find("laoc", *l).expect("row").avg_loss).collect();
    let prior = table.find("prior", 0.0).expect("row").avg_loss;
    let ml = table.find("pure_ml", 0.0).expect("row").avg_loss;
    let worst_rise = laoc.windows(2).map(|w| w[1] / w[0] - 1.0).fold(f64::NEG_INFINITY, f64::max);
    let curve = laoc.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ");
    let gap = laoc[laoc.len() - 1] / ml - 1.0;
    vec![
        CheckResult::new(
            "C6a",
            "loss non-increasing in λ",
            worst_rise <= 0.01,
            format!("avg loss at λ={TRADEOFF_LAMBDAS:?}: [{curve}], largest adjacent rise {:.3}%", 100.0 * worst_rise),
        ),
        CheckResult::new("C6b", "λ=0 endpoint equals prior", laoc[0] == prior, format!("LAOC(0) {:.6} vs prior {prior:.6}", laoc[0])),
        CheckResult::new(
            "C6c",
            "largest λ within 2% of pure ML",
            gap.abs() <= 0.02,
            format!("LAOC(1.6) {:.3} vs pure ML {ml:.3}, gap {:.2}%", laoc[laoc.len() - 1], 100.0 * gap),
        ),
    ]
}

/// Criterion 7: closed forms and solvers against brute-force oracles.
pub fn check_oracles(ctx: &VerifyContext) -> Vec<CheckResult> {
    let p = &ctx.params;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.opts.seed ^ 0x07ac1e);

    // (a) safe interval endpoints vs a 1e5-point grid
    let grid_n = 100_000;
    let step = p.u_max / grid_n as f64;
    let instances = 1_000;
    let mut worst_a = 0.0f64;
    let mut disagreements = 0;
    let mut q_pool = SafeSetParams::new(p, 0.4).expect("positive lambda").q;
    q_pool.push(0.0);
    for _ in 0..instances {
        let lambda = rng.random_range(0.05..2.0);
        let x_prior = rng.random_range(30.0..50.0);
        let u_prior = rng.random_range(0.0..p.u_max);
        let inputs = SafeSetInputs {
            prev_risk: rng.random_range(0.0..50.0),
            prior_risk: 0.0,
            x: x_prior + rng.random_range(-3.0..3.0),
            x_prior,
            u_prior,
            q: q_pool[rng.random_range(0..q_pool.len())] * rng.random_range(0.0..1.0),
            lambda,
        };
        // Make the prior feasible, as it is inside LAOC.
        let needed = inputs.prev_risk + risk(p, inputs.x, u_prior) + reservation_phi(p, u_prior, inputs.x, x_prior, u_prior, inputs.q);
        let inputs = SafeSetInputs { prior_risk: needed / (1.0 + lambda) * rng.random_range(1.0..1.5), ..inputs };
        let feasible: Vec<f64> = (0..=grid_n).map(|i| i as f64 * step).filter(|u| inputs.excess(p, *u) <= 0.0).collect();
        match (safe_interval(p, &inputs), feasible.first(), feasible.last()) {
            (Ok(s), Some(lo), Some(hi)) => {
                let (a, b) = s.feasible_interval;
                let err = (a - lo).abs().max((b - hi).abs());
                worst_a = worst_a.max(err);
                if err > step {
                    disagreements += 1;
                }
            }
            _ => disagreements += 1,
        }
    }

    // (b) linear-map root vs a 1e6-point grid
    let grid_b = 1_000_000;
    let mut worst_b = 0.0f64;
    for _ in 0..50 {
        let c: f64 = rng.random_range(0.5..5.0);
        let center = rng.random_range(-1.0..0.0);
        let curv = rng.random_range(0.5..5.0);
        // g(ρ) = curv ((ρ - center)² - center²) - c, so g(0) = -c
        let g = |rho: f64| curv * ((rho - center).powi(2) - center * center) - c;
        let mapped = map_linear(1.0, 0.0, g).expect("g(0) <= 0");
        let grid_root = (0..=grid_b).map(|i| i as f64 / grid_b as f64).take_while(|rho| g(*rho) <= 0.0).last().unwrap_or(0.0);
        worst_b = worst_b.max((mapped.rho - grid_root).abs());
    }

    // (c) offline optimum vs an exhaustive 0.05 m³ grid, H = 3
    let p3 = SystemParams { horizon: 3, ..p.clone() };
    let mut worst_c = 0.0f64;
    let mut below_grid = true;
    for i in 0..50 {
        let ep = random_episode(&mut rng, &format!("grid{i}"), 3);
        let p3 = SystemParams { initial_level: rng.random_range(35.0..45.0), ..p3.clone() };
        let (_, value) = opt_offline(&ep, &p3, OptObjective::Loss).expect("solver runs");
        let grid = grid_min_h3(&ep, &p3, 0.05);
        worst_c = worst_c.max((grid - value).abs());
        below_grid &= value <= grid + 1e-9;
    }

    // (d) ROBD and MPC inner minimisers vs grids
    let mut worst_d = f64::NEG_INFINITY;
    for _ in 0..50 {
        let x = rng.random_range(25.0..55.0);
        let w = rng.random_range(0.0..10.0);
        let prev = rng.random_range(0.0..p.u_max);
        let l1 = rng.random_range(0.0..3.0);
        let f = |u: f64| deviation_risk(p, next_level(p, x, u, w)) + p.power_weight() * u * u + l1 * (u - prev).powi(2);
        let u = robd_step(p, x, w, prev, l1);
        let grid = (0..=100_000).map(|i| f(p.u_max * i as f64 / 1e5)).fold(f64::INFINITY, f64::min);
        worst_d = worst_d.max(f(u) - grid);
    }
    let mut scratch = [0.0; 2];
    for _ in 0..10 {
        let x = rng.random_range(30.0..50.0);
        let fc = [rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)];
        let plan = mpc_plan(p, x, &fc, false);
        let best = mpc_objective(p, x, &fc, &plan, false, &mut scratch);
        let n = 600;
        let mut grid = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=n {
                let u = [p.u_max * i as f64 / n as f64, p.u_max * j as f64 / n as f64];
                grid = grid.min(mpc_objective(p, x, &fc, &u, false, &mut scratch));
            }
        }
        worst_d = worst_d.max(best - grid);
    }

    vec![
        CheckResult::new(
            "C7a",
            "safe interval vs grid",
            disagreements == 0,
            format!("{instances} instances, worst endpoint error {worst_a:.2e} (grid step {step:.1e}), {disagreements} disagreements"),
        ),
        CheckResult::new("C7b", "linear-map root vs grid", worst_b < 2e-6, format!("worst |Δρ| {worst_b:.2e} over 50 instances")),
        CheckResult::new(
            "C7c",
            "offline optimum vs grid",
            worst_c < 1e-3 && below_grid,
            format!("worst objective gap {worst_c:.2e} over 50 H=3 instances"),
        ),
        CheckResult::new("C7d", "ROBD/MPC minimisers vs grid", worst_d < 1e-6, format!("worst excess over grid minimum {worst_d:.2e}")),
    ]
}

fn random_episode(rng: &mut ChaCha8Rng, id: &str, h: usize) -> Episode {
    Episode::new(
        id,
        (0..h).map(|_| TraceStep::new(rng.random_range(0.0..8.0), rng.random_range(150.0..450.0), rng.random_range(0.03..0.15))).collect(),
    )
}

/// Exhaustive minimum of the H = 3 loss on a uniform action grid. The last
/// action only enters its own round, so it is minimised separately.
fn grid_min_h3(ep: &Episode, p: &SystemParams, step: f64) -> f64 {
    let n = (p.u_max / step).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|i| i as f64 * step).collect();
    let mut scratch = [0.0; 3];
    let last_best = grid
        .iter()
        .map(|u| {
            plan_objective(ep, p, OptObjective::Loss, &[0.0, 0.0, *u], &mut scratch)
                - plan_objective(ep, p, OptObjective::Loss, &[0.0, 0.0, 0.0], &mut scratch)
        })
        .fold(f64::INFINITY, f64::min);
    let mut best = f64::INFINITY;
    for &u0 in &grid {
        for &u1 in &grid {
            best = best.min(plan_objective(ep, p, OptObjective::Loss, &[u0, u1, 0.0], &mut scratch) + last_best);
        }
    }
    best
}

/// Relative error with a floor tied to the gradient's scale. The absolute
/// part of the floor sits above central-difference round-off, so an exactly
/// zero gradient is not scored against noise.
pub fn relative_error(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4 * scale).max(1e-6)
}

/// Worst relative error between the unrolled gradient and central
/// differences on one H = 2 instance. In safe mode λ is drawn from the seed.
/// Returns `(error, binding rounds)`.
pub fn gradient_check_instance(seed: u64, safe: bool) -> (f64, usize) {
    let p = SystemParams { horizon: 2, ..SystemParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes: Vec<Episode> = (0..2).map(|i| random_episode(&mut rng, &format!("g{seed}-{i}"), 2)).collect();
    let p = SystemParams { initial_level: rng.random_range(35.0..45.0), ..p };
    let net = PolicyNet::init(seed, Normalizers::from_episodes(&episodes));
    let lambda = rng.random_range(0.1..3.0);
    let prior = PriorConfig::ogd();
    let safe = safe.then(|| SafeSetParams::new(&p, lambda).expect("positive lambda"));
    let ctx = safe.as_ref().map(|s| SafeContext { safe: s, prior: &prior, mapping: Mapping::Linear });
    let refs: Vec<&Episode> = episodes.iter().collect();
    let mut grad = vec![0.0; N_PARAMS];
    let mut stats = UnrollStats::default();
    batch_gradient(&net, &p, &refs, ctx, &mut grad, &mut stats).expect("unroll runs");
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut scratch = vec![0.0; N_PARAMS];
    let mut worst = 0.0f64;
    let h = 1e-5;
    for k in 0..N_PARAMS {
        let mut plus = net.clone();
        let mut minus = net.clone();
        plus.theta[k] += h;
        minus.theta[k] -= h;
        let mut s = UnrollStats::default();
        let fp = batch_gradient(&plus, &p, &refs, ctx, &mut scratch, &mut s).expect("unroll runs");
        let fm = batch_gradient(&minus, &p, &refs, ctx, &mut scratch, &mut s).expect("unroll runs");
        worst = worst.max(relative_error(grad[k], (fp - fm) / (2.0 * h), scale));
    }
    (worst, stats.binding_rounds)
}

/// Criterion 8: unrolled gradients against central differences.
pub fn check_gradients(_ctx: &VerifyContext) -> CheckResult {
    let mut worst_pure = 0.0f64;
    let mut worst_safe = 0.0f64;
    let mut binding = 0;
    for seed in 0..20 {
        worst_pure = worst_pure.max(gradient_check_instance(seed, false).0);
        let (err, b) = gradient_check_instance(seed, true);
        worst_safe = worst_safe.max(err);
        binding += b;
    }
    CheckResult::new(
        "C8",
        "gradient checks",
        worst_pure < 1e-3 && worst_safe < 1e-3 && binding > 0,
        format!("20 seeds, H=2: pure max rel err {worst_pure:.2e}, finetune max rel err {worst_safe:.2e} ({binding} binding rounds)"),
    )
}

/// Criterion 9: finetuning through the safe mapping lowers LAOC's loss.
pub fn check_finetuning(ctx: &VerifyContext) -> CheckResult {
    let held_out = ctx.episodes(9, 200);
    let pure = ctx.trained_policy();
    let mut ok = true;
    let mut parts = Vec::new();
    for lambda in [0.4, 0.8] {
        let safe = ctx.safe_params(lambda);
        let config = ControllerConfig::laoc(lambda, ctx.prior.clone());
        let loss = |policy: &PolicyNet| -> crate::Result<f64> {
            let results = run_batch(&config, &ctx.params, Some(&safe), &held_out, policy, ctx.eval())?;
            Ok(summarize("laoc", lambda, "held_out", &results).avg_loss)
        };
        let losses = finetune_safe(pure, &ctx.train_set, &ctx.params, &safe, &ctx.prior, &ctx.train_config())
            .and_then(|tuned| Ok((loss(pure)?, loss(&tuned.policy)?)));
        let (before, after) = match losses {
            Ok(pair) => pair,
            Err(e) => return CheckResult::new("C9", "finetuning benefit", false, format!("λ={lambda}: {e}")),
        };
        ok &= after <= before;
        parts.push(format!("λ={lambda}: {before:.3} -> {after:.3}"));
    }
    CheckResult::new("C9", "finetuning benefit", ok, format!("held-out LAOC loss, pure -> finetuned: {}", parts.join(", ")))
}

/// Criterion 10: reservation constants and schedule shape.
pub fn check_reservation_algebra(ctx: &VerifyContext) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.opts.seed ^ 0x10);
    let beta = ctx.params.beta();
    let mut worst = 0.0f64;
    let mut shape_ok = true;
    for _ in 0..1_000 {
        let lambda = loop {
            let l = rng.random_range(0.0..=10.0);
            if l > 0.0 {
                break l;
            }
        };
        worst = worst.max(reservation_identity_gap(lambda, beta));
        let q = SafeSetParams::new(&ctx.params, lambda).expect("positive lambda").q;
        shape_ok &= q.windows(2).all(|w| w[1] <= w[0]) && q[q.len() - 1] == 0.0;
    }
    CheckResult::new(
        "C10",
        "reservation algebra",
        worst <= 1e-10 && shape_ok,
        format!("1000 λ in (0, 10]: max identity gap {worst:.2e}, schedules monotone with q_H = 0: {shape_ok}"),
    )
}

/// Criterion 11 (in-process half): identical seeds give identical tables.
pub fn check_reproducibility(ctx: &VerifyContext) -> CheckResult {
    let episodes = ctx.episodes(11, ctx.scale(200, 50));
    let controllers = [
        ControllerConfig::laoc(0.0, ctx.prior.clone()),
        ControllerConfig::new(ControllerKind::LinPlus, 0.4, ctx.prior.clone()),
        ControllerConfig::new(ControllerKind::PriorOnly, 0.0, ctx.prior.clone()),
    ];
    let run = || {
        evaluate(&controllers, &episodes, &[0.4, 0.8], "repro", &ctx.params, ctx.trained_policy(), ctx.eval())
            .expect("evaluation runs")
            .to_csv_string(None)
    };
    let (a, b) = (run(), run());
    CheckResult::new("C11", "reproducibility", a == b, format!("two evaluations, {} bytes each, identical: {}", a.len(), a == b))
}
