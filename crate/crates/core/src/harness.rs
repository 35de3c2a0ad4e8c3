//! Batch evaluation and metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controllers::{is_violation, run_controller, ControllerConfig, EpisodeResult, MlPolicy};
use crate::error::{LaocError, Result};
use crate::model::{Episode, SystemParams};
use crate::safeset::{ReservationConstants, SafeSetParams};
use crate::traces::format_sig9;

pub const METRICS_HEADER: [&str; 9] =
    ["controller", "lambda", "dataset", "avg_loss", "avg_energy_usd", "avg_carbon_g", "max_risk_ratio", "violation_prob", "n_episodes"];

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub controller: String,
    pub lambda: f64,
    pub dataset: String,
    pub avg_loss: f64,
    pub avg_energy_usd: f64,
    pub avg_carbon_g: f64,
    pub max_risk_ratio: f64,
    pub violation_prob: f64,
    pub n_episodes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn write_to<W: Write>(&self, writer: W, comment: Option<&str>) -> Result<()> {
        let mut writer = writer;
        if let Some(c) = comment {
            for line in c.lines() {
                writeln!(writer, "# {line}")?;
            }
        }
        writeln!(writer, "{}", METRICS_HEADER.join(","))?;
        for r in &self.rows {
            writeln!(
                writer,
                "{},{},{},{},{},{},{},{},{}",
                r.controller,
                format_sig9(r.lambda),
                r.dataset,
                format_sig9(r.avg_loss),
                format_sig9(r.avg_energy_usd),
                format_sig9(r.avg_carbon_g),
                format_sig9(r.max_risk_ratio),
                format_sig9(r.violation_prob),
                r.n_episodes
            )?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, comment: Option<&str>) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf, comment).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn write_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file), comment)
    }

    pub fn find(&self, controller: &str, lambda: f64) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.controller == controller && r.lambda == lambda)
    }
}

/// Worker-pool settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
    pub constants: ReservationConstants,
}

/// Run one controller on every episode. Results come back in input order.
pub fn run_batch(
    config: &ControllerConfig,
    params: &SystemParams,
    safe: Option<&SafeSetParams>,
    episodes: &[Episode],
    ml: &dyn MlPolicy,
    options: EvalOptions,
) -> Result<Vec<EpisodeResult>> {
    let run = |ep: &Episode| run_controller(config, ep, params, safe, ml);
    map_episodes(episodes, options, run)
}

#[cfg(feature = "parallel")]
fn map_episodes<F>(episodes: &[Episode], options: EvalOptions, f: F) -> Result<Vec<EpisodeResult>>
where
    F: Fn(&Episode) -> Result<EpisodeResult> + Sync,
{
    use rayon::prelude::*;
    let work = || episodes.par_iter().map(&f).collect::<Result<Vec<_>>>();
    match options.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| LaocError::InvalidInput(format!("cannot start worker pool: {e}")))?
            .install(work),
        None => work(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map_episodes<F>(episodes: &[Episode], _options: EvalOptions, f: F) -> Result<Vec<EpisodeResult>>
where
    F: Fn(&Episode) -> Result<EpisodeResult>,
{
    episodes.iter().map(f).collect()
}

/// Aggregate episode results at margin `lambda`. The fold runs in
/// episode-id order so the sums do not depend on scheduling.
pub fn summarize(controller: &str, lambda: f64, dataset: &str, results: &[EpisodeResult]) -> MetricsRow {
    let mut order: Vec<&EpisodeResult> = results.iter().collect();
    order.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    let n = order.len();
    let (mut loss, mut energy, mut carbon, mut max_ratio, mut violated) = (0.0, 0.0, 0.0, 0.0f64, 0usize);
    for r in order {
        loss += r.total_loss;
        energy += r.energy_usd();
        carbon += r.carbon_g();
        max_ratio = max_ratio.max(r.risk_ratio());
        if r.cum_risk.iter().zip(&r.cum_prior_risk).any(|(a, b)| is_violation(*a, *b, lambda)) {
            violated += 1;
        }
    }
    let denom = n.max(1) as f64;
    MetricsRow {
        controller: controller.to_string(),
        lambda,
        dataset: dataset.to_string(),
        avg_loss: loss / denom,
        avg_energy_usd: energy / denom,
        avg_carbon_g: carbon / denom,
        max_risk_ratio: max_ratio,
        violation_prob: violated as f64 / denom,
        n_episodes: n,
    }
}

/// Every controller at every λ. Controllers whose actions ignore λ are
/// simulated once and reported once per λ against that margin.
pub fn evaluate(
    controllers: &[ControllerConfig],
    episodes: &[Episode],
    lambdas: &[f64],
    dataset: &str,
    params: &SystemParams,
    ml: &dyn MlPolicy,
    options: EvalOptions,
) -> Result<MetricsTable> {
    if episodes.is_empty() {
        return Err(LaocError::InvalidInput("no episodes to evaluate".into()));
    }
    if lambdas.is_empty() {
        return Err(LaocError::InvalidInput("no lambda values given".into()));
    }
    let mut table = MetricsTable::default();
    for template in controllers {
        let name = template.kind.name();
        if template.kind.uses_lambda() {
            for &lambda in lambdas {
                let config = ControllerConfig { lambda, ..template.clone() };
                let safe = if lambda > 0.0 { Some(options.constants.build(params, lambda)?) } else { None };
                let results = run_batch(&config, params, safe.as_ref(), episodes, ml, options)?;
                table.rows.push(summarize(name, lambda, dataset, &results));
            }
        } else {
            let config = ControllerConfig { lambda: lambdas[0], ..template.clone() };
            let results = run_batch(&config, params, None, episodes, ml, options)?;
            for &lambda in lambdas {
                table.rows.push(summarize(name, lambda, dataset, &results));
            }
        }
    }
    Ok(table)
}

/// One controller swept over an ascending λ list.
pub fn sweep_lambda(
    lambdas: &[f64],
    episodes: &[Episode],
    template: &ControllerConfig,
    params: &SystemParams,
    ml: &dyn MlPolicy,
    options: EvalOptions,
) -> Result<Vec<MetricsRow>> {
    if lambdas.windows(2).any(|w| w[1] < w[0]) {
        return Err(LaocError::InvalidInput("lambda list must be sorted ascending".into()));
    }
    Ok(evaluate(std::slice::from_ref(template), episodes, lambdas, "sweep", params, ml, options)?.rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::{ConstantPolicy, ControllerKind};
    use crate::model::TraceStep;
    use crate::priors::PriorConfig;

    #[test]
    fn hand_worked_three_round_episode() {
        // Constant pumping of 2 m³ against demand 1, 3, 2 from the nominal level.
        let p = SystemParams { horizon: 3, ..SystemParams::default() };
        let ep = Episode::new("hand", vec![TraceStep::new(1.0, 100.0, 0.1), TraceStep::new(3.0, 200.0, 0.05), TraceStep::new(2.0, 300.0, 0.2)]);
        let cfg = ControllerConfig::new(ControllerKind::PureMl, 0.5, PriorConfig::greedy());
        let table =
            evaluate(&[cfg], &[ep], &[0.5], "hand", &p, &ConstantPolicy(2.0), EvalOptions { jobs: Some(1), ..EvalOptions::default() }).unwrap();
        let row = &table.rows[0];
        // levels 40, 41, 40; kWh per round 0.544
        let kwh = 0.272 * 2.0;
        let energy = kwh * (0.1 + 0.05 + 0.2);
        let carbon = kwh * (100.0 + 200.0 + 300.0);
        let loss = 0.1 * 1.0 + 0.02 * carbon + 60.0 * energy;
        assert!((row.avg_energy_usd - energy).abs() < 1e-12);
        assert!((row.avg_carbon_g - carbon).abs() < 1e-9);
        assert!((row.avg_loss - loss).abs() < 1e-9);
        // live risk: 3·0.073984·4 + 1; greedy prior pumps 3, 0, 3 → levels 40, 42, 39
        let pw = 0.073984;
        let live = 3.0 * pw * 4.0 + 1.0;
        let prior = pw * 18.0 + 4.0 + 1.0;
        assert!((row.max_risk_ratio - live / prior).abs() < 1e-12);
        assert_eq!(row.violation_prob, 0.0);
        assert_eq!(row.n_episodes, 1);
    }

    #[test]
    fn csv_layout() {
        let table = MetricsTable {
            rows: vec![MetricsRow {
                controller: "laoc".into(),
                lambda: 0.4,
                dataset: "test".into(),
                avg_loss: 1.0 / 3.0,
                avg_energy_usd: 2.0,
                avg_carbon_g: 3.5,
                max_risk_ratio: 1.0,
                violation_prob: 0.0,
                n_episodes: 10,
            }],
        };
        let text = table.to_csv_string(Some("config: {}"));
        assert_eq!(
            text,
            "# config: {}\ncontroller,lambda,dataset,avg_loss,avg_energy_usd,avg_carbon_g,max_risk_ratio,violation_prob,n_episodes\nlaoc,0.4,test,0.333333333,2,3.5,1,0,10\n"
        );
    }
}
