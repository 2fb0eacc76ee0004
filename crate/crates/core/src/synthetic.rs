//! Synthetic fixtures: a single on-ramp corridor with diurnal demand, and
//! hourly task rates for several regions.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::demand::{DetectorSeries, DEFAULT_BIN_SECONDS};
use crate::error::{Error, Result};
use crate::network::RoadNetwork;
use crate::queueing::HourlyRates;
use crate::scenario::{GridSpec, RouteSpec, ScenarioConfig, SCHEMA_VERSION};
use crate::sim::{splitmix64, AvKind};

/// Two-lane mainline `m1` (1500 m) and one-lane ramp `r1` (400 m) joining
/// into two-lane `m2` (1500 m) at node `j`.
pub const RAMP_NETWORK: &str = "\
# single on-ramp corridor
node o
node r
node j
node x
edge m1 o j 1500 2 30
edge r1 r j 400 1 25
edge m2 j x 1500 2 30
";

pub fn ramp_network() -> RoadNetwork {
    RoadNetwork::parse(RAMP_NETWORK, Path::new("ramp.net")).expect("fixture parses")
}

pub fn ramp_routes() -> Vec<RouteSpec> {
    vec![
        RouteSpec {
            id: "main".into(),
            edges: vec!["m1".into(), "m2".into()],
        },
        RouteSpec {
            id: "ramp".into(),
            edges: vec!["r1".into(), "m2".into()],
        },
    ]
}

/// Relative demand at second-of-day `t`: a night floor with morning and
/// evening peaks.
pub fn diurnal_weight(t: f64) -> f64 {
    let h = t / 3600.0;
    let peak = |center: f64, width: f64| (-((h - center) / width).powi(2) / 2.0).exp();
    0.15 + peak(8.0, 1.5) + 0.9 * peak(17.5, 2.0) + 0.4 * peak(12.5, 3.0)
}

/// Splits `total` vehicles over bins proportionally to `weights`, rounding
/// cumulatively so the parts sum exactly to `total`.
pub fn apportion(total: u64, weights: &[f64]) -> Vec<u32> {
    let sum: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let mut prev = 0u64;
    weights
        .iter()
        .map(|w| {
            acc += w;
            let cum = if sum > 0.0 {
                (total as f64 * acc / sum).round() as u64
            } else {
                0
            };
            let part = cum - prev;
            prev = cum;
            part as u32
        })
        .collect()
}

/// Demand on the ramp corridor.
#[derive(Debug, Clone, PartialEq)]
pub struct RampDemand {
    pub horizon_s: u32,
    pub bin_s: u32,
    pub main_total: u64,
    pub ramp_total: u64,
    /// Diurnal shape when true, flat otherwise.
    pub diurnal: bool,
}

impl RampDemand {
    /// Roughly 5,000 vehicles over a day.
    pub fn day() -> Self {
        RampDemand {
            horizon_s: 86_400,
            bin_s: DEFAULT_BIN_SECONDS,
            main_total: 4_000,
            ramp_total: 1_000,
            diurnal: true,
        }
    }

    /// One hour of flat demand with a ramp busy enough to queue.
    pub fn busy_hour() -> Self {
        RampDemand {
            horizon_s: 3_600,
            bin_s: DEFAULT_BIN_SECONDS,
            main_total: 1_000,
            ramp_total: 500,
            diurnal: false,
        }
    }

    pub fn counts(&self, net: &RoadNetwork) -> Result<DetectorSeries> {
        let mut series = DetectorSeries::new(self.bin_s, self.horizon_s)?;
        let bins = (self.horizon_s / self.bin_s) as usize;
        let weights: Vec<f64> = (0..bins)
            .map(|b| {
                if self.diurnal {
                    diurnal_weight((b as f64 + 0.5) * self.bin_s as f64)
                } else {
                    1.0
                }
            })
            .collect();
        let main = apportion(self.main_total, &weights);
        let ramp = apportion(self.ramp_total, &weights);
        let down = main.iter().zip(&ramp).map(|(a, b)| a + b).collect();
        let edge = |id: &str| net.edge_ix(id).ok_or_else(|| Error::Input(format!("no edge {id}")));
        series.set(edge("m1")?, main)?;
        series.set(edge("r1")?, ramp)?;
        series.set(edge("m2")?, down)?;
        Ok(series)
    }

    /// Writes `ramp.net`, `counts.csv` and `<name>.toml` into `dir` and
    /// returns the loaded scenario.
    pub fn write_scenario(
        &self,
        dir: &Path,
        name: &str,
        kind: AvKind,
        penetration: f64,
        seed: u64,
        grid: Option<GridSpec>,
    ) -> Result<ScenarioConfig> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let net_path = dir.join("ramp.net");
        fs::write(&net_path, RAMP_NETWORK).map_err(|e| Error::io(&net_path, e))?;
        let net = ramp_network();
        let counts_name = format!("{name}_counts.csv");
        self.counts(&net)?.write(&dir.join(&counts_name), &net)?;
        let cfg = ScenarioFile {
            schema: SCHEMA_VERSION,
            network: "ramp.net".into(),
            counts: counts_name.into(),
            bin_s: self.bin_s,
            horizon_s: self.horizon_s,
            kind,
            penetration,
            seed,
            routes: ramp_routes(),
            grid,
        };
        let path = dir.join(format!("{name}.toml"));
        let text = toml::to_string(&cfg).map_err(|e| Error::Input(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        ScenarioConfig::load(&path)
    }
}

#[derive(Serialize)]
struct ScenarioFile {
    schema: u32,
    network: PathBuf,
    counts: PathBuf,
    bin_s: u32,
    horizon_s: u32,
    kind: AvKind,
    penetration: f64,
    seed: u64,
    routes: Vec<RouteSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<GridSpec>,
}

/// A day of hourly task statistics for `regions` regions of different
/// sizes, with the same diurnal shape and deterministic jitter.
pub fn regional_rates(regions: usize, seed: u64) -> Vec<Vec<HourlyRates>> {
    (0..regions)
        .map(|r| {
            let scale = 40.0 + 35.0 * r as f64;
            (0..24u32)
                .map(|hour| {
                    let key = seed ^ ((r as u64) << 32) ^ hour as u64;
                    let jitter = (splitmix64(key) >> 11) as f64 / (1u64 << 53) as f64;
                    let w = diurnal_weight((hour as f64 + 0.5) * 3600.0);
                    let q = (scale * w * (0.8 + 0.4 * jitter)).round() as u64;
                    let mean_duration = 20.0 + 10.0 * jitter;
                    let b = (q as f64 * mean_duration).round() as u64;
                    HourlyRates::from_counts(hour, q, b.max(q))
                })
                .collect()
        })
        .collect()
}
