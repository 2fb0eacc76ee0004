//! Scenario files, end-to-end runs, grids and their exports.
//!
//! A scenario is a TOML file:
//!
//! ```toml
//! schema = 1
//! network = "ramp.net"        # paths are relative to this file
//! counts = "counts.csv"       # or: schedule = "schedule.csv"
//! horizon_s = 86400           # multiple of 3600
//! kind = "CCAV"
//! penetration = 0.5
//! seed = 7
//!
//! [[routes]]
//! id = "main"
//! edges = ["m1", "m2"]
//! ```
//!
//! Optional keys: `bin_s` (30), `reach_horizon_s` (5), `dt` (1),
//! `merge_zone_m` (150), `cooperation_zone_m` (250), `trajectories` (false),
//! `out`, tables `[hv]` and `[av]` with driver parameters, and
//! `[grid] kinds = [...], penetrations = [...]` for [`ScenarioConfig::expand_grid`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{
    ingest_counts, reconstruct_flows, spawn_schedule, FlowAssignment, SpawnSchedule,
    DEFAULT_BIN_SECONDS,
};
use crate::error::{Error, Result};
use crate::network::{detect_merge_points, MergeId, RoadNetwork, Route};
use crate::queueing::{
    achieved_reliability, hourly_rates_all, min_servers, pooled_vs_summed, HourlyRates,
    ReliabilityTarget, HOUR,
};
use crate::safety::{
    khat, ConflictSample, LoadSeries, ReachParams, SafetyMonitor, SafetyOutcome, SupervisionEvent,
};
use crate::sim::{
    splitmix64, AvKind, DriverParams, SimConfig, Simulation, VehicleId, VehicleKind, VehicleState,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed channel for spawn times.
pub const SPAWN_CHANNEL: u64 = 1;
/// Seed channel for the AV/HV draw.
pub const KIND_CHANNEL: u64 = 2;

/// Derives the seed of one stochastic channel from the master seed.
pub fn channel_seed(master: u64, channel: u64) -> u64 {
    splitmix64(master ^ splitmix64(channel))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub id: String,
    pub edges: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub kinds: Vec<AvKind>,
    pub penetrations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema: u32,
    pub network: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<PathBuf>,
    #[serde(default = "default_bin")]
    pub bin_s: u32,
    pub horizon_s: u32,
    #[serde(default = "default_kind")]
    pub kind: AvKind,
    #[serde(default)]
    pub penetration: f64,
    #[serde(default = "default_reach")]
    pub reach_horizon_s: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_merge_zone")]
    pub merge_zone_m: f64,
    #[serde(default = "default_coop_zone")]
    pub cooperation_zone_m: f64,
    #[serde(default)]
    pub trajectories: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub routes: Vec<RouteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub hv: DriverParams,
    #[serde(default)]
    pub av: DriverParams,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_bin() -> u32 {
    DEFAULT_BIN_SECONDS
}
fn default_kind() -> AvKind {
    AvKind::Unconnected
}
fn default_reach() -> f64 {
    5.0
}
fn default_dt() -> f64 {
    1.0
}
fn default_merge_zone() -> f64 {
    150.0
}
fn default_coop_zone() -> f64 {
    250.0
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ScenarioConfig = toml::from_str(&text).map_err(|source| Error::Config {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Input(format!(
                "unsupported scenario schema {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if self.horizon_s == 0 || !self.horizon_s.is_multiple_of(HOUR) {
            return Err(Error::Input(format!(
                "horizon_s must be a positive multiple of 3600, got {}",
                self.horizon_s
            )));
        }
        if self.counts.is_some() == self.schedule.is_some() {
            return Err(Error::Input("exactly one of counts and schedule must be set".into()));
        }
        ReachParams::new(self.reach_horizon_s)?;
        self.sim_config().validate()?;
        let files = [Some(&self.network), self.counts.as_ref(), self.schedule.as_ref()];
        for p in files.into_iter().flatten() {
            let p = self.resolve(p);
            if !p.is_file() {
                return Err(Error::Input(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.dt,
            penetration: self.penetration,
            av_kind: self.kind,
            kind_seed: channel_seed(self.seed, KIND_CHANNEL),
            hv: self.hv,
            av: self.av,
            merge_zone: self.merge_zone_m,
            cooperation_zone: self.cooperation_zone_m,
            ..SimConfig::default()
        }
    }

    pub fn reach_params(&self) -> ReachParams {
        ReachParams {
            horizon: self.reach_horizon_s,
        }
    }

    /// Name of this scenario's directory inside a grid output.
    pub fn label(&self) -> String {
        format!("{}_p{}", self.kind, self.penetration)
    }

    pub fn with(&self, kind: AvKind, penetration: f64) -> ScenarioConfig {
        ScenarioConfig {
            kind,
            penetration,
            grid: None,
            ..self.clone()
        }
    }

    /// One config per (kind, penetration) of the `[grid]` table, kinds outermost.
    pub fn expand_grid(&self) -> Result<Vec<ScenarioConfig>> {
        let grid = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::Input("scenario has no [grid] table".into()))?;
        Ok(grid
            .kinds
            .iter()
            .flat_map(|&k| grid.penetrations.iter().map(move |&p| self.with(k, p)))
            .collect())
    }

    pub fn load_network(&self) -> Result<RoadNetwork> {
        RoadNetwork::load(self.resolve(&self.network))
    }

    pub fn load_routes(&self, net: &RoadNetwork) -> Result<Vec<Route>> {
        self.routes
            .iter()
            .map(|r| Route::from_ids(&r.id, &r.edges, net))
            .collect()
    }

    /// Spawn schedule plus, when built from counts, the reconstructed flows
    /// and their total residual.
    pub fn build_schedule(&self, net: &RoadNetwork) -> Result<(SpawnSchedule, Option<(FlowAssignment, u64)>)> {
        let routes = self.load_routes(net)?;
        if let Some(s) = &self.schedule {
            let sched = SpawnSchedule::read(&self.resolve(s), routes)?;
            if let Some(last) = sched.entries.last() {
                if last.time >= self.horizon_s as f64 {
                    return Err(Error::Validation(format!(
                        "schedule extends past the {} s horizon",
                        self.horizon_s
                    )));
                }
            }
            return Ok((sched, None));
        }
        let counts_path = self.resolve(self.counts.as_ref().expect("validated"));
        let counts = ingest_counts(&counts_path, net, self.bin_s, self.horizon_s)?;
        let (flows, residual) = reconstruct_flows(net, &counts, &routes)?;
        let sched = spawn_schedule(&flows, channel_seed(self.seed, SPAWN_CHANNEL));
        Ok((sched, Some((flows, residual.total()))))
    }
}

/// Summary of one scenario run. Every field except `runtime` is recomputable
/// from the files written next to it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub kind: AvKind,
    pub penetration: f64,
    pub seed: u64,
    pub horizon_s: u32,
    pub spawned: u64,
    pub exited: u64,
    pub still_present: u64,
    pub never_inserted: u64,
    pub flow_residual: Option<u64>,
    pub vehicle_seconds: u64,
    pub mean_speed: f64,
    pub std_speed: f64,
    pub khat_max: u32,
    pub khat_mean: f64,
    pub baseline1_max: u32,
    pub baseline1_mean: f64,
    pub baseline2_max: u32,
    pub baseline2_mean: f64,
    pub events: u64,
    pub samples: u64,
    pub guard_events: u64,
    #[serde(skip)]
    pub hourly: Vec<HourlyRates>,
    #[serde(skip)]
    pub runtime: Duration,
}

/// Per-second fleet statistics observed alongside the load series.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FleetSeries {
    pub vehicles: Vec<u32>,
    pub speed_sum: Vec<f64>,
    pub speed_sumsq: Vec<f64>,
    pub guards: Vec<u32>,
}

impl FleetSeries {
    /// Mean and population standard deviation over all vehicle-seconds.
    pub fn speed_stats(&self) -> (u64, f64, f64) {
        let n: u64 = self.vehicles.iter().map(|&v| v as u64).sum();
        if n == 0 {
            return (0, 0.0, 0.0);
        }
        let s: f64 = self.speed_sum.iter().sum();
        let ss: f64 = self.speed_sumsq.iter().sum();
        let mean = s / n as f64;
        let var = (ss / n as f64 - mean * mean).max(0.0);
        (n, mean, var.sqrt())
    }
}

/// Everything a run produced, before it is written out.
pub struct RunOutput {
    pub report: RunReport,
    pub schedule: SpawnSchedule,
    pub flows: Option<FlowAssignment>,
    pub safety: SafetyOutcome,
    pub fleet: FleetSeries,
    pub exits: Vec<crate::sim::ExitRecord>,
    pub trajectories: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: u32,
    pub vehicle_id: u32,
    pub kind: VehicleKind,
    pub edge: String,
    pub lane: u32,
    pub pos_m: f64,
    pub speed_mps: f64,
}

/// Runs demand, simulation, safety analysis and hourly rates in memory.
///
/// Integrity faults carry a dump of the vehicle set; [`run_scenario`] also
/// writes it to `fault.txt`.
pub fn simulate(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let started = Instant::now();
    cfg.validate()?;
    let net = cfg.load_network()?;
    let (schedule, flows) = cfg.build_schedule(&net)?;
    let sim_cfg = cfg.sim_config();
    let mut sim = Simulation::new(&net, sim_cfg.clone(), schedule.clone())?;
    let merges = sim.merges().to_vec();
    let mut monitor = SafetyMonitor::new(&net, &merges, cfg.reach_params());
    let mut fleet = FleetSeries::default();
    let mut trajectories = Vec::new();
    let substeps = sim_cfg.steps_per_second();

    for t in 0..cfg.horizon_s {
        let vehicles = &sim.state.vehicles;
        monitor.observe(t, vehicles, &sim_cfg);
        fleet.vehicles.push(vehicles.len() as u32);
        fleet.speed_sum.push(vehicles.iter().map(|v| v.speed).sum());
        fleet.speed_sumsq.push(vehicles.iter().map(|v| v.speed * v.speed).sum());
        if cfg.trajectories {
            let mut rows: Vec<TrajectoryRow> = vehicles
                .iter()
                .map(|v| TrajectoryRow {
                    t,
                    vehicle_id: v.id.0,
                    kind: v.kind,
                    edge: net.edge(v.edge).id.to_string(),
                    lane: v.lane,
                    pos_m: v.pos,
                    speed_mps: v.speed,
                })
                .collect();
            rows.sort_by_key(|r| r.vehicle_id);
            trajectories.extend(rows);
        }
        let mut guards = 0;
        for _ in 0..substeps {
            match sim.step() {
                Ok(r) => guards += r.guard_events,
                Err(e) => return Err(with_dump(e, &sim)),
            }
        }
        fleet.guards.push(guards);
    }

    let safety = monitor.finish(cfg.horizon_s)?;
    let hourly = hourly_rates_all(&safety.events, &safety.samples, cfg.horizon_s / HOUR);
    let (vehicle_seconds, mean_speed, std_speed) = fleet.speed_stats();
    let (khat_max, khat_mean) = khat(&safety.series.supervision);
    let (baseline1_max, baseline1_mean) = khat(&safety.series.baseline1);
    let (baseline2_max, baseline2_mean) = khat(&safety.series.baseline2);
    let state = &sim.state;
    let report = RunReport {
        kind: cfg.kind,
        penetration: cfg.penetration,
        seed: cfg.seed,
        horizon_s: cfg.horizon_s,
        spawned: state.spawned,
        exited: state.exits.len() as u64,
        still_present: state.vehicles.len() as u64,
        never_inserted: (schedule.entries.len() as u64).saturating_sub(state.spawned),
        flow_residual: flows.as_ref().map(|f| f.1),
        vehicle_seconds,
        mean_speed,
        std_speed,
        khat_max,
        khat_mean,
        baseline1_max,
        baseline1_mean,
        baseline2_max,
        baseline2_mean,
        events: safety.events.len() as u64,
        samples: safety.samples.len() as u64,
        guard_events: fleet.guards.iter().map(|&g| g as u64).sum(),
        hourly,
        runtime: started.elapsed(),
    };
    Ok(RunOutput {
        report,
        exits: sim.state.exits.clone(),
        schedule,
        flows: flows.map(|f| f.0),
        safety,
        fleet,
        trajectories,
    })
}

fn with_dump(e: Error, sim: &Simulation<'_>) -> Error {
    match e {
        Error::Integrity { clock, message } => {
            let net = sim.network();
            let mut dump = format!("{message}\nvehicles at t={clock}:\n");
            for v in &sim.state.vehicles {
                dump.push_str(&format!(
                    "  {} {} route {} edge {} lane {} pos {} speed {}\n",
                    v.id,
                    v.kind,
                    v.route.id,
                    net.edge(v.edge).id,
                    v.lane,
                    v.pos,
                    v.speed
                ));
            }
            Error::Integrity { clock, message: dump }
        }
        other => other,
    }
}

/// Re-runs conflict detection over a trajectory export.
///
/// Each vehicle is given a one-edge route for the edge it occupies, which is
/// all the detector needs.
pub fn replay_trajectories(path: &Path, cfg: &ScenarioConfig) -> Result<SafetyOutcome> {
    let net = cfg.load_network()?;
    let merges = detect_merge_points(&net);
    let sim_cfg = cfg.sim_config();
    let mut monitor = SafetyMonitor::new(&net, &merges, cfg.reach_params());
    let rows: Vec<TrajectoryRow> = read_csv(path)?;
    let mut rows = rows.into_iter().peekable();
    for t in 0..cfg.horizon_s {
        let mut vehicles = Vec::new();
        while let Some(r) = rows.next_if(|r| r.t == t) {
            let edge = net
                .edge_ix(&r.edge)
                .ok_or_else(|| Error::Validation(format!("trajectory names unknown edge {:?}", r.edge)))?;
            vehicles.push(VehicleState {
                id: VehicleId(r.vehicle_id),
                kind: r.kind,
                route: Route::new(&r.edge, vec![edge], &net)?,
                route_pos: 0,
                edge,
                lane: r.lane,
                pos: r.pos_m,
                speed: r.speed_mps,
                length: sim_cfg.params(r.kind).length,
                spawned_at: 0.0,
            });
        }
        monitor.observe(t, &vehicles, &sim_cfg);
    }
    if let Some(r) = rows.next() {
        return Err(Error::Validation(format!(
            "trajectory row at t={} is out of order or past the horizon",
            r.t
        )));
    }
    monitor.finish(cfg.horizon_s)
}

/// Runs a scenario and writes its exports into `out`.
pub fn run_scenario(cfg: &ScenarioConfig, out: &Path) -> Result<RunReport> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let output = match simulate(cfg) {
        Ok(o) => o,
        Err(Error::Integrity { clock, message }) => {
            let path = out.join("fault.txt");
            fs::write(&path, &message).map_err(|e| Error::io(&path, e))?;
            let first = message.lines().next().unwrap_or_default().to_string();
            return Err(Error::Integrity {
                clock,
                message: format!("{first} (state dump in {})", path.display()),
            });
        }
        Err(e) => return Err(e),
    };
    write_outputs(&output, cfg, out)?;
    Ok(output.report)
}

pub fn write_outputs(o: &RunOutput, cfg: &ScenarioConfig, out: &Path) -> Result<()> {
    o.schedule.write(&out.join("schedule.csv"))?;
    if let Some(f) = &o.flows {
        write_flows(&out.join("flows.csv"), f)?;
    }
    write_events(&out.join("events.csv"), &o.safety.events)?;
    write_samples(&out.join("samples.csv"), &o.safety.samples)?;
    write_load(&out.join("load.csv"), &o.safety.series, &o.fleet)?;
    write_csv(
        &out.join("load_15min.csv"),
        fifteen_minute_series(&o.safety.series.supervision)?
            .into_iter()
            .enumerate()
            .map(|(bin, max)| Bin15 {
                bin: bin as u32,
                t_start: bin as u32 * 900,
                max,
            }),
    )?;
    write_rates(&out.join("rates.csv"), &o.report.hourly)?;
    write_csv(
        &out.join("exits.csv"),
        o.exits.iter().map(|e| ExitRow {
            vehicle_id: e.vehicle.0,
            kind: e.kind,
            spawned_at: e.spawned_at,
            exited_at: e.exited_at,
        }),
    )?;
    if cfg.trajectories {
        write_csv(&out.join("trajectories.csv"), o.trajectories.iter())?;
    }
    write_report(&out.join("report.toml"), &o.report)
}

pub fn write_report(path: &Path, r: &RunReport) -> Result<()> {
    let text = toml::to_string(r).map_err(|e| Error::Input(format!("report encoding: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Per-900-second maxima of a per-second series.
pub fn fifteen_minute_series(series: &[u32]) -> Result<Vec<u32>> {
    if series.len() < 900 {
        return Err(Error::Input(format!(
            "series of {} s is shorter than one 15-minute bin",
            series.len()
        )));
    }
    Ok(series
        .chunks(900)
        .map(|c| c.iter().copied().max().unwrap_or(0))
        .collect())
}

#[derive(Serialize)]
struct Bin15 {
    bin: u32,
    t_start: u32,
    max: u32,
}

#[derive(Serialize)]
struct ExitRow {
    vehicle_id: u32,
    kind: VehicleKind,
    spawned_at: f64,
    exited_at: f64,
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    av_id: u32,
    merge_id: u32,
    t_start: u32,
    t_end: u32,
}

#[derive(Serialize, Deserialize)]
struct SampleRow {
    t: u32,
    av_id: u32,
    merge_id: u32,
    contributors: String,
}

#[derive(Serialize, Deserialize)]
pub struct LoadRow {
    pub t: u32,
    pub s_t: u32,
    pub baseline1: u32,
    pub baseline2: u32,
    pub vehicles: u32,
    pub speed_sum: f64,
    pub speed_sumsq: f64,
    pub guards: u32,
}

#[derive(Serialize, Deserialize)]
struct RatesRow {
    hour: u32,
    q: u64,
    b: u64,
    lambda: f64,
    mu: Option<f64>,
    offered_load: f64,
}

#[derive(Serialize)]
struct FlowRow<'a> {
    route_id: &'a str,
    bin: usize,
    flow: u32,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::csv(path, e)))
        .collect()
}

fn write_flows(path: &Path, f: &FlowAssignment) -> Result<()> {
    write_csv(
        path,
        f.routes.iter().zip(&f.flows).flat_map(|(r, series)| {
            series.iter().enumerate().map(move |(bin, &flow)| FlowRow {
                route_id: &r.id,
                bin,
                flow,
            })
        }),
    )
}

pub fn write_events(path: &Path, events: &[SupervisionEvent]) -> Result<()> {
    write_csv(
        path,
        events.iter().map(|e| EventRow {
            av_id: e.av.0,
            merge_id: e.merge.0,
            t_start: e.t_start,
            t_end: e.t_end,
        }),
    )
}

pub fn read_events(path: &Path) -> Result<Vec<SupervisionEvent>> {
    let rows: Vec<EventRow> = read_csv(path)?;
    rows.into_iter()
        .map(|r| {
            if r.t_start > r.t_end {
                return Err(Error::Validation(format!(
                    "event for AV {} ends before it starts",
                    r.av_id
                )));
            }
            Ok(SupervisionEvent {
                t_start: r.t_start,
                t_end: r.t_end,
                av: VehicleId(r.av_id),
                merge: MergeId(r.merge_id),
            })
        })
        .collect()
}

pub fn write_samples(path: &Path, samples: &[ConflictSample]) -> Result<()> {
    write_csv(
        path,
        samples.iter().map(|s| SampleRow {
            t: s.t,
            av_id: s.av.0,
            merge_id: s.merge.0,
            contributors: s
                .contributors
                .iter()
                .map(|c| c.0.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        }),
    )
}

pub fn read_samples(path: &Path) -> Result<Vec<ConflictSample>> {
    let rows: Vec<SampleRow> = read_csv(path)?;
    rows.into_iter()
        .map(|r| {
            let contributors = r
                .contributors
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map(VehicleId))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Validation(format!("bad contributor list {:?}", r.contributors)))?;
            if contributors.is_empty() {
                return Err(Error::Validation(format!(
                    "sample for AV {} at t={} has no contributors",
                    r.av_id, r.t
                )));
            }
            Ok(ConflictSample {
                t: r.t,
                av: VehicleId(r.av_id),
                merge: MergeId(r.merge_id),
                contributors,
            })
        })
        .collect()
}

fn write_load(path: &Path, s: &LoadSeries, f: &FleetSeries) -> Result<()> {
    write_csv(
        path,
        (0..s.len()).map(|t| LoadRow {
            t: t as u32,
            s_t: s.supervision[t],
            baseline1: s.baseline1[t],
            baseline2: s.baseline2[t],
            vehicles: f.vehicles[t],
            speed_sum: f.speed_sum[t],
            speed_sumsq: f.speed_sumsq[t],
            guards: f.guards[t],
        }),
    )
}

pub fn read_load(path: &Path) -> Result<Vec<LoadRow>> {
    read_csv(path)
}

pub fn write_rates(path: &Path, rates: &[HourlyRates]) -> Result<()> {
    write_csv(
        path,
        rates.iter().map(|r| RatesRow {
            hour: r.hour,
            q: r.q,
            b: r.b,
            lambda: r.lambda,
            mu: r.mu,
            offered_load: r.offered_load(),
        }),
    )
}

/// Reads a rates export; `lambda`, `mu` and `offered_load` are recomputed
/// from `q` and `b`.
pub fn read_rates(path: &Path) -> Result<Vec<HourlyRates>> {
    let rows: Vec<RatesRow> = read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| HourlyRates::from_counts(r.hour, r.q, r.b))
        .collect())
}

/// Team size per hour and reliability target for one region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizingRow {
    pub region: String,
    pub hour: u32,
    pub epsilon: f64,
    pub offered_load: f64,
    pub k_star: u32,
    pub p_k: f64,
    pub nines: f64,
}

pub fn sizing(region: &str, rates: &[HourlyRates], targets: &[ReliabilityTarget]) -> Vec<SizingRow> {
    targets
        .iter()
        .flat_map(|&eps| {
            rates.iter().map(move |r| {
                let a = r.offered_load();
                let k = min_servers(a, eps);
                let (p_k, nines) = achieved_reliability(a, k);
                SizingRow {
                    region: region.to_string(),
                    hour: r.hour,
                    epsilon: eps.epsilon(),
                    offered_load: a,
                    k_star: k,
                    p_k,
                    nines,
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolingCsvRow {
    pub hour: u32,
    pub epsilon: f64,
    pub summed: u32,
    pub pooled: u32,
    pub gap: u32,
    pub pooled_load: f64,
}

/// Per-region sizing rows, pooled rows (region `pooled`) and the
/// summed-versus-pooled comparison for every target.
pub fn pool_regions(
    regions: &[(String, Vec<HourlyRates>)],
    targets: &[ReliabilityTarget],
) -> Result<(Vec<SizingRow>, Vec<PoolingCsvRow>)> {
    let rates: Vec<Vec<HourlyRates>> = regions.iter().map(|r| r.1.clone()).collect();
    let mut sizing_rows: Vec<SizingRow> = regions
        .iter()
        .flat_map(|(name, r)| sizing(name, r, targets))
        .collect();
    let mut pooling = Vec::new();
    for &eps in targets {
        for row in pooled_vs_summed(&rates, eps)? {
            let (p_k, nines) = achieved_reliability(row.pooled_load, row.pooled);
            sizing_rows.push(SizingRow {
                region: "pooled".into(),
                hour: row.hour,
                epsilon: eps.epsilon(),
                offered_load: row.pooled_load,
                k_star: row.pooled,
                p_k,
                nines,
            });
            pooling.push(PoolingCsvRow {
                hour: row.hour,
                epsilon: eps.epsilon(),
                summed: row.summed,
                pooled: row.pooled,
                gap: row.gap(),
                pooled_load: row.pooled_load,
            });
        }
    }
    Ok((sizing_rows, pooling))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub label: String,
    pub report: RunReport,
}

/// Side-by-side comparison of scenarios sharing network and demand.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
}

/// Percent reduction of `value` relative to `reference`; `None` when the
/// reference is zero.
pub fn percent_reduction(reference: f64, value: f64) -> Option<f64> {
    (reference > 0.0).then(|| 100.0 * (reference - value) / reference)
}

impl GridTable {
    pub fn penetrations(&self) -> Vec<f64> {
        let mut ps: Vec<f64> = self.rows.iter().map(|r| r.report.penetration).collect();
        ps.sort_by(f64::total_cmp);
        ps.dedup();
        ps
    }

    pub fn find(&self, kind: AvKind, p: f64) -> Option<&RunReport> {
        self.rows
            .iter()
            .map(|r| &r.report)
            .find(|r| r.kind == kind && r.penetration == p)
    }

    /// Baseline maxima averaged over every AV kind run at `p`.
    pub fn averaged_baselines(&self, p: f64) -> (f64, f64) {
        let at: Vec<&RunReport> = self
            .rows
            .iter()
            .map(|r| &r.report)
            .filter(|r| r.penetration == p)
            .collect();
        let n = at.len().max(1) as f64;
        (
            at.iter().map(|r| r.baseline1_max as f64).sum::<f64>() / n,
            at.iter().map(|r| r.baseline2_max as f64).sum::<f64>() / n,
        )
    }

    /// Percent fewer peak supervisors with CCAVs than with UCAVs at `p`.
    pub fn ccav_ucav_gain(&self, p: f64) -> Option<f64> {
        let u = self.find(AvKind::Unconnected, p)?;
        let c = self.find(AvKind::Cooperative, p)?;
        percent_reduction(u.khat_max as f64, c.khat_max as f64)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            scenario: &'a str,
            kind: AvKind,
            penetration: f64,
            mean_speed: f64,
            std_speed: f64,
            khat_max: u32,
            khat_mean: f64,
            baseline1_max: u32,
            baseline1_mean: f64,
            baseline2_max: u32,
            baseline2_mean: f64,
            gain_vs_baseline1_pct: Option<f64>,
            gain_vs_baseline2_pct: Option<f64>,
            gain_vs_avg_baseline1_pct: Option<f64>,
            gain_vs_avg_baseline2_pct: Option<f64>,
        }
        let rows = self.rows.iter().map(|g| {
            let r = &g.report;
            let (a1, a2) = self.averaged_baselines(r.penetration);
            let k = r.khat_max as f64;
            Row {
                scenario: &g.label,
                kind: r.kind,
                penetration: r.penetration,
                mean_speed: r.mean_speed,
                std_speed: r.std_speed,
                khat_max: r.khat_max,
                khat_mean: r.khat_mean,
                baseline1_max: r.baseline1_max,
                baseline1_mean: r.baseline1_mean,
                baseline2_max: r.baseline2_max,
                baseline2_mean: r.baseline2_mean,
                gain_vs_baseline1_pct: percent_reduction(r.baseline1_max as f64, k),
                gain_vs_baseline2_pct: percent_reduction(r.baseline2_max as f64, k),
                gain_vs_avg_baseline1_pct: percent_reduction(a1, k),
                gain_vs_avg_baseline2_pct: percent_reduction(a2, k),
            }
        });
        write_csv(&dir.join("table.csv"), rows)?;

        #[derive(Serialize)]
        struct Gain {
            penetration: f64,
            ccav_ucav_gain_pct: Option<f64>,
            avg_baseline1_max: f64,
            avg_baseline2_max: f64,
        }
        write_csv(
            &dir.join("gains.csv"),
            self.penetrations().into_iter().map(|p| {
                let (a1, a2) = self.averaged_baselines(p);
                Gain {
                    penetration: p,
                    ccav_ucav_gain_pct: self.ccav_ucav_gain(p),
                    avg_baseline1_max: a1,
                    avg_baseline2_max: a2,
                }
            }),
        )?;
        write_csv(&dir.join("nines.csv"), self.nines())?;
        let path = dir.join("table.md");
        fs::write(&path, self.markdown()).map_err(|e| Error::io(&path, e))
    }

    /// Reliability each of UCAV and CCAV demand gets from a team sized to the
    /// CCAV peak, evaluated at each scenario's busiest hour.
    pub fn nines(&self) -> Vec<NinesRow> {
        self.penetrations()
            .into_iter()
            .filter_map(|p| {
                let u = self.find(AvKind::Unconnected, p)?;
                let c = self.find(AvKind::Cooperative, p)?;
                let k = c.khat_max;
                let (uh, ua) = busiest_hour(&u.hourly)?;
                let (ch, ca) = busiest_hour(&c.hourly)?;
                let (_, un) = achieved_reliability(ua, k);
                let (_, cn) = achieved_reliability(ca, k);
                Some(NinesRow {
                    penetration: p,
                    k,
                    ucav_hour: uh,
                    ucav_offered_load: ua,
                    ucav_nines: un,
                    ccav_hour: ch,
                    ccav_offered_load: ca,
                    ccav_nines: cn,
                    nines_gain: cn - un,
                })
            })
            .collect()
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("| Scenario | Mean (Std.) Speed (m/s) | Max. [Mean] Supervisors | Baseline 1 | Baseline 2 |\n");
        s.push_str("|---|---|---|---|---|\n");
        for g in &self.rows {
            let r = &g.report;
            s.push_str(&format!(
                "| {} p={} | {:.2} ({:.2}) | {} [{:.1}] | {} [{:.1}] | {} [{:.1}] |\n",
                r.kind,
                r.penetration,
                r.mean_speed,
                r.std_speed,
                r.khat_max,
                r.khat_mean,
                r.baseline1_max,
                r.baseline1_mean,
                r.baseline2_max,
                r.baseline2_mean
            ));
        }
        s.push('\n');
        s.push_str("| p | CCAV-UCAV gain | Avg. Baseline 1 max | Avg. Baseline 2 max |\n");
        s.push_str("|---|---|---|---|\n");
        for p in self.penetrations() {
            let (a1, a2) = self.averaged_baselines(p);
            let gain = self
                .ccav_ucav_gain(p)
                .map_or("n/a".to_string(), |g| format!("{g:.2}%"));
            s.push_str(&format!("| {p} | {gain} | {a1:.1} | {a2:.1} |\n"));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NinesRow {
    pub penetration: f64,
    pub k: u32,
    pub ucav_hour: u32,
    pub ucav_offered_load: f64,
    pub ucav_nines: f64,
    pub ccav_hour: u32,
    pub ccav_offered_load: f64,
    pub ccav_nines: f64,
    pub nines_gain: f64,
}

/// Hour with the largest arrival rate (earliest on ties) and its offered load.
pub fn busiest_hour(hourly: &[HourlyRates]) -> Option<(u32, f64)> {
    let mut best: Option<&HourlyRates> = None;
    for r in hourly {
        if best.is_none_or(|b| r.lambda > b.lambda) {
            best = Some(r);
        }
    }
    best.map(|r| (r.hour, r.offered_load()))
}

fn check_compatible(cfgs: &[ScenarioConfig]) -> Result<()> {
    let Some(first) = cfgs.first() else {
        return Err(Error::Input("empty scenario grid".into()));
    };
    for c in cfgs {
        let same = c.resolve(&c.network) == first.resolve(&first.network)
            && c.counts.as_ref().map(|p| c.resolve(p)) == first.counts.as_ref().map(|p| first.resolve(p))
            && c.schedule.as_ref().map(|p| c.resolve(p))
                == first.schedule.as_ref().map(|p| first.resolve(p))
            && c.routes == first.routes
            && c.horizon_s == first.horizon_s
            && c.bin_s == first.bin_s
            && c.seed == first.seed
            && c.dt == first.dt
            && c.reach_horizon_s == first.reach_horizon_s;
        if !same {
            return Err(Error::Input(format!(
                "scenario {} does not share network, demand, seed and timing with {}",
                c.label(),
                first.label()
            )));
        }
    }
    let mut labels: Vec<String> = cfgs.iter().map(ScenarioConfig::label).collect();
    labels.sort();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Input("grid repeats a (kind, penetration) pair".into()));
    }
    Ok(())
}

/// Runs every scenario in parallel, writing each into `out/<kind>_p<p>` and
/// the comparison files into `out`.
pub fn run_grid(cfgs: &[ScenarioConfig], out: &Path) -> Result<GridTable> {
    check_compatible(cfgs)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rows = cfgs
        .par_iter()
        .map(|c| {
            let label = c.label();
            let report = run_scenario(c, &out.join(&label))?;
            Ok(GridRow { label, report })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = GridTable { rows };
    table.write(out)?;
    Ok(table)
}
