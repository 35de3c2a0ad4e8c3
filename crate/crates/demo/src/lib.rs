//! Browser bindings: a small synthetic data set, an in-page trained policy,
//! and the three views the page draws.

use laoc::controllers::{laoc_run, prior_only_run, pure_ml_run, EpisodeResult, Mapping};
use laoc::learning::{train_pure, Normalizers, PolicyNet, TrainConfig};
use laoc::model::{Episode, SystemParams};
use laoc::priors::PriorConfig;
use laoc::safeset::SafeSetParams;
use laoc::traces::{gen_synthetic, TraceProfile};
use laoc::LaocError;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const TRAIN_EPISODES: usize = 40;
const TEST_EPISODES: usize = 60;

#[derive(Debug, Serialize)]
pub struct Trajectory {
    pub level: Vec<f64>,
    pub action: Vec<f64>,
    pub cum_risk: Vec<f64>,
    pub total_loss: f64,
}

impl From<&EpisodeResult> for Trajectory {
    fn from(r: &EpisodeResult) -> Self {
        Self { level: r.x.clone(), action: r.u.clone(), cum_risk: r.cum_risk.clone(), total_loss: r.total_loss }
    }
}

#[derive(Debug, Serialize)]
pub struct Simulation {
    pub id: String,
    pub lambda: f64,
    pub demand: Vec<f64>,
    pub price: Vec<f64>,
    pub carbon: Vec<f64>,
    pub prior: Trajectory,
    pub ml: Trajectory,
    pub laoc: Trajectory,
    /// `(1+λ)` times the prior's cumulative risk.
    pub budget: Vec<f64>,
    pub binding: Vec<bool>,
}

#[derive(Debug, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub avg_loss: f64,
    pub max_risk_ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct Sweep {
    pub prior_loss: f64,
    pub ml_loss: f64,
    pub points: Vec<SweepPoint>,
}

#[wasm_bindgen]
pub struct Demo {
    params: SystemParams,
    prior: PriorConfig,
    train: Vec<Episode>,
    test: Vec<Episode>,
    policy: PolicyNet,
    seed: u64,
}

impl Demo {
    pub fn build(seed: u32, prior: &str) -> laoc::Result<Self> {
        let params = SystemParams::default();
        let prior = PriorConfig::from_name(prior).ok_or_else(|| LaocError::InvalidInput(format!("unknown prior {prior:?}")))?;
        let seed = u64::from(seed);
        let profile = TraceProfile::default();
        let train = gen_synthetic(seed, TRAIN_EPISODES, params.horizon, &profile)?;
        let test = gen_synthetic(seed + 1, TEST_EPISODES, params.horizon, &profile)?;
        let policy = PolicyNet::init(seed, Normalizers::from_episodes(&train));
        Ok(Self { params, prior, train, test, policy, seed })
    }

    /// Train a fresh policy and return its last-epoch mean loss.
    pub fn fit(&mut self, epochs: usize) -> laoc::Result<f64> {
        let config = TrainConfig { epochs, seed: self.seed, ..TrainConfig::default() };
        let report = train_pure(&self.train, &self.params, &config)?;
        self.policy = report.policy;
        Ok(report.loss_curve.last().copied().unwrap_or(f64::NAN))
    }

    pub fn run(&self, episode: usize, lambda: f64) -> laoc::Result<Simulation> {
        let ep = self.test.get(episode).ok_or_else(|| LaocError::InvalidInput(format!("episode {episode} out of range 0..{}", self.test.len())))?;
        let prior = prior_only_run(ep, &self.params, lambda, &self.prior)?;
        let ml = pure_ml_run(ep, &self.params, lambda, &self.prior, &self.policy)?;
        let safe = safe_params(&self.params, lambda)?;
        let laoc = laoc_run(ep, &self.params, safe.as_ref(), &self.prior, Mapping::Linear, &self.policy)?;
        Ok(Simulation {
            id: ep.id.clone(),
            lambda,
            demand: ep.steps.iter().map(|s| s.demand).collect(),
            price: ep.steps.iter().map(|s| s.price).collect(),
            carbon: ep.steps.iter().map(|s| s.carbon_intensity).collect(),
            budget: prior.cum_risk.iter().map(|r| (1.0 + lambda) * r).collect(),
            binding: laoc.binding.clone(),
            prior: (&prior).into(),
            ml: (&ml).into(),
            laoc: (&laoc).into(),
        })
    }

    pub fn sweep_points(&self, lambdas: &[f64]) -> laoc::Result<Sweep> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut prior = Vec::new();
        let mut ml = Vec::new();
        for ep in &self.test {
            prior.push(prior_only_run(ep, &self.params, 0.0, &self.prior)?.total_loss);
            ml.push(pure_ml_run(ep, &self.params, 0.0, &self.prior, &self.policy)?.total_loss);
        }
        let mut points = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let safe = safe_params(&self.params, lambda)?;
            let mut losses = Vec::with_capacity(self.test.len());
            let mut worst = 0.0f64;
            for ep in &self.test {
                let r = laoc_run(ep, &self.params, safe.as_ref(), &self.prior, Mapping::Linear, &self.policy)?;
                losses.push(r.total_loss);
                worst = worst.max(r.risk_ratio());
            }
            points.push(SweepPoint { lambda, avg_loss: mean(&losses), max_risk_ratio: worst });
        }
        Ok(Sweep { prior_loss: mean(&prior), ml_loss: mean(&ml), points })
    }
}

fn safe_params(params: &SystemParams, lambda: f64) -> laoc::Result<Option<SafeSetParams>> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(LaocError::InvalidSafety(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        Ok(None)
    } else {
        SafeSetParams::new(params, lambda).map(Some)
    }
}

/// Reservation coefficients `q_0 ..= q_H` for the default system.
pub fn reservation_schedule(lambda: f64, horizon: usize) -> laoc::Result<Vec<f64>> {
    let params = SystemParams { horizon, ..SystemParams::default() };
    params.validate()?;
    Ok(SafeSetParams::new(&params, lambda)?.q)
}

fn js(e: LaocError) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, prior: &str) -> Result<Demo, JsError> {
        Demo::build(seed, prior).map_err(js)
    }

    pub fn train(&mut self, epochs: usize) -> Result<f64, JsError> {
        self.fit(epochs).map_err(js)
    }

    #[wasm_bindgen(js_name = episodeCount)]
    pub fn episode_count(&self) -> usize {
        self.test.len()
    }

    /// Prior, pure ML and LAOC on one test episode, as JSON.
    pub fn simulate(&self, episode: usize, lambda: f64) -> Result<String, JsError> {
        to_json(&self.run(episode, lambda).map_err(js)?)
    }

    /// Average LAOC loss over the test episodes for each λ, as JSON.
    pub fn sweep(&self, lambdas: Vec<f64>) -> Result<String, JsError> {
        to_json(&self.sweep_points(&lambdas).map_err(js)?)
    }
}

#[wasm_bindgen(js_name = qSchedule)]
pub fn q_schedule(lambda: f64, horizon: usize) -> Result<Vec<f64>, JsError> {
    reservation_schedule(lambda, horizon).map_err(js)
}
