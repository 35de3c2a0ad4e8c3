//! Synthetic traces, OOD perturbation and CSV ingestion.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LaocError, Result};
use crate::model::{Episode, TraceStep};

pub const CSV_HEADER: [&str; 4] = ["timestamp", "demand_m3", "carbon_g_per_kwh", "price_usd_per_kwh"];
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Shape of the synthetic traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceProfile {
    /// Mean hourly demand, m³.
    pub demand_base: f64,
    /// Diurnal swing around the base, m³.
    pub demand_amplitude: f64,
    /// Relative demand drop on weekend days.
    pub weekend_drop: f64,
    /// σ of the multiplicative lognormal demand noise.
    pub demand_noise: f64,
    /// Night-time carbon intensity, g/kWh.
    pub carbon_base: f64,
    /// Depth of the midday solar dip, g/kWh.
    pub carbon_dip: f64,
    pub carbon_noise: f64,
    /// Price floor, $/kWh.
    pub price_base: f64,
    /// Height of the duck curve above the floor, $/kWh.
    pub price_amplitude: f64,
    pub price_noise: f64,
}

impl Default for TraceProfile {
    fn default() -> Self {
        Self {
            demand_base: 3.0,
            demand_amplitude: 2.0,
            weekend_drop: 0.1,
            demand_noise: 0.25,
            carbon_base: 450.0,
            carbon_dip: 300.0,
            carbon_noise: 15.0,
            price_base: 0.03,
            price_amplitude: 0.12,
            price_noise: 0.005,
        }
    }
}

impl TraceProfile {
    /// Same shape with every noise term switched off.
    pub fn noiseless(&self) -> Self {
        Self { demand_noise: 0.0, carbon_noise: 0.0, price_noise: 0.0, ..self.clone() }
    }

    /// Constant traces at the base levels.
    pub fn flat(&self) -> Self {
        Self { demand_amplitude: 0.0, weekend_drop: 0.0, carbon_dip: 0.0, price_amplitude: 0.0, ..self.noiseless() }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("demand_base", self.demand_base),
            ("demand_amplitude", self.demand_amplitude),
            ("weekend_drop", self.weekend_drop),
            ("demand_noise", self.demand_noise),
            ("carbon_base", self.carbon_base),
            ("carbon_dip", self.carbon_dip),
            ("carbon_noise", self.carbon_noise),
            ("price_base", self.price_base),
            ("price_amplitude", self.price_amplitude),
            ("price_noise", self.price_noise),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LaocError::InvalidInput(format!("profile field {name} must be finite and >= 0, got {v}")));
            }
        }
        if self.weekend_drop > 1.0 {
            return Err(LaocError::InvalidInput("weekend_drop must be <= 1".into()));
        }
        Ok(())
    }
}

/// Morning and evening consumption peaks, in `[-1, 1]`.
fn demand_shape(hour: usize) -> f64 {
    let t = hour as f64;
    let morning = (-((t - 7.5) / 2.0).powi(2)).exp();
    let evening = (-((t - 19.5) / 2.5).powi(2)).exp();
    2.0 * (0.9 * morning + evening).min(1.0) - 1.0
}

/// Solar output proxy, `[0, 1]`, zero outside 6:00-18:00.
fn solar(hour: usize) -> f64 {
    (PI * (hour as f64 - 6.0) / 12.0).sin().max(0.0)
}

/// Duck curve: cheap midday, evening ramp, `[0, 1]`.
fn duck(hour: usize) -> f64 {
    let evening = (-((hour as f64 - 19.0) / 2.5).powi(2)).exp();
    (0.45 + 0.55 * evening - 0.45 * solar(hour)).clamp(0.0, 1.0)
}

/// `n_episodes` episodes of `horizon` hours each. Episode `i` starts on day
/// `i` at midnight, so weekend days recur every seven episodes when
/// `horizon` is 24.
pub fn gen_synthetic(seed: u64, n_episodes: usize, horizon: usize, profile: &TraceProfile) -> Result<Vec<Episode>> {
    if horizon == 0 {
        return Err(LaocError::InvalidInput("horizon must be >= 1".into()));
    }
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mut steps = Vec::with_capacity(horizon);
        // 2024-01-01 is a Monday.
        let weekend = matches!(i % 7, 5 | 6);
        let day_scale = if weekend { 1.0 - profile.weekend_drop } else { 1.0 };
        for h in 0..horizon {
            let hour = h % 24;
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let s = profile.demand_noise;
            let mean = (profile.demand_base + profile.demand_amplitude * demand_shape(hour)) * day_scale;
            let demand = (mean * (s * z[0] - 0.5 * s * s).exp()).max(0.0);
            let carbon = (profile.carbon_base - profile.carbon_dip * solar(hour) + profile.carbon_noise * z[1]).max(0.0);
            let price = (profile.price_base + profile.price_amplitude * duck(hour) + profile.price_noise * z[2]).max(0.0);
            steps.push(TraceStep::new(demand, carbon, price));
        }
        episodes.push(Episode::new(format!("syn-{seed}-{i:05}"), steps));
    }
    Ok(episodes)
}

/// Noise scale of the OOD perturbation, `0.3 · max demand`.
pub fn ood_sigma(episodes: &[Episode]) -> f64 {
    0.3 * episodes.iter().flat_map(|e| e.demands()).fold(0.0, f64::max)
}

/// The additive demand noise `perturb_ood` applies, before clamping.
pub fn ood_noise(episodes: &[Episode], seed: u64) -> Vec<Vec<f64>> {
    let sigma = ood_sigma(episodes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    episodes
        .iter()
        .map(|e| {
            e.steps
                .iter()
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sigma * z
                })
                .collect()
        })
        .collect()
}

/// Add Gaussian noise with σ = 30% of the largest demand to every demand
/// sample and clamp at zero. Carbon and price are untouched.
pub fn perturb_ood(episodes: &[Episode], seed: u64) -> Result<Vec<Episode>> {
    if episodes.is_empty() {
        return Err(LaocError::InvalidInput("nothing to perturb".into()));
    }
    let noise = ood_noise(episodes, seed);
    Ok(episodes
        .iter()
        .zip(noise)
        .map(|(e, n)| {
            let steps = e.steps.iter().zip(n).map(|(s, dw)| TraceStep { demand: (s.demand + dw).max(0.0), ..*s }).collect();
            Episode::new(format!("{}-ood", e.id), steps)
        })
        .collect())
}

/// Shortest decimal that round-trips the value rounded to 9 significant
/// digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date").and_hms_opt(0, 0, 0).expect("valid time")
}

/// Write episodes back to back as hourly rows starting at `start`. An
/// optional comment is emitted first as `# <comment>`.
pub fn write_csv_to<W: Write>(writer: W, episodes: &[Episode], start: NaiveDateTime, comment: Option<&str>) -> Result<()> {
    let mut writer = writer;
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(writer, "# {line}")?;
        }
    }
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(CSV_HEADER).map_err(csv_err)?;
    let mut t = start;
    for ep in episodes {
        for s in &ep.steps {
            out.write_record([t.format(TIMESTAMP_FORMAT).to_string(), format_sig9(s.demand), format_sig9(s.carbon_intensity), format_sig9(s.price)])
                .map_err(csv_err)?;
            t += Duration::hours(1);
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, episodes: &[Episode], comment: Option<&str>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv_to(std::io::BufWriter::new(file), episodes, default_start(), comment)
}

fn csv_err(e: csv::Error) -> LaocError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LaocError::Io(io),
        other => LaocError::InvalidInput(format!("csv: {other:?}")),
    }
}

/// Parse hourly rows and cut them into episodes of `horizon` rows. A
/// trailing partial episode is dropped with a warning.
pub fn load_csv_from<R: Read>(reader: R, horizon: usize) -> Result<Vec<Episode>> {
    if horizon == 0 {
        return Err(LaocError::InvalidInput("horizon must be >= 1".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, format!("{e}")))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err(1, format!("expected header {}, found {}", CSV_HEADER.join(","), header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut episodes = Vec::new();
    let mut current: Vec<TraceStep> = Vec::with_capacity(horizon);
    let mut current_start = String::new();
    let mut prev_time: Option<NaiveDateTime> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, format!("{e}"))
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != CSV_HEADER.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", CSV_HEADER.len(), record.len())));
        }
        let time = NaiveDateTime::parse_from_str(&record[0], TIMESTAMP_FORMAT)
            .map_err(|e| parse_err(line, format!("bad timestamp {:?}: {e}", &record[0])))?;
        if let Some(prev) = prev_time {
            if time - prev != Duration::hours(1) {
                return Err(parse_err(line, format!("gap in hourly series: {prev} is followed by {time}")));
            }
        }
        prev_time = Some(time);
        let mut values = [0.0f64; 3];
        for (k, v) in values.iter_mut().enumerate() {
            let field = &record[k + 1];
            *v = field.parse().map_err(|_| parse_err(line, format!("{} is not a number: {field:?}", CSV_HEADER[k + 1])))?;
            if !(v.is_finite() && *v >= 0.0) {
                return Err(parse_err(line, format!("{} must be finite and >= 0, got {v}", CSV_HEADER[k + 1])));
            }
        }
        if current.is_empty() {
            current_start = record[0].to_string();
        }
        current.push(TraceStep::new(values[0], values[1], values[2]));
        if current.len() == horizon {
            episodes.push(Episode::new(current_start.clone(), std::mem::take(&mut current)));
        }
    }
    if !current.is_empty() {
        log::warn!("dropping trailing partial episode of {} rows starting {current_start}", current.len());
    }
    Ok(episodes)
}

pub fn load_csv(path: &Path, horizon: usize) -> Result<Vec<Episode>> {
    let file = std::fs::File::open(path).map_err(|e| LaocError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    load_csv_from(std::io::BufReader::new(file), horizon)
}

fn parse_err(line: usize, message: String) -> LaocError {
    LaocError::Parse { line, message }
}
