//! Detector counts, route-flow reconstruction and stochastic vehicle insertion.
//!
//! Counts files are CSV with the header `edge_id,bin_index,count`. Bins that
//! have no record count as zero. Edges that never appear in the file are
//! treated as unobserved: they do not constrain the flow reconstruction and
//! do not contribute to its residual.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{EdgeIx, RoadNetwork, Route};
use crate::sim::VehicleId;

/// Default detector aggregation interval.
pub const DEFAULT_BIN_SECONDS: u32 = 30;

/// Per-edge vehicle counts on a shared time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSeries {
    bin_seconds: u32,
    bins: usize,
    counts: BTreeMap<EdgeIx, Vec<u32>>,
}

impl DetectorSeries {
    pub fn new(bin_seconds: u32, horizon_seconds: u32) -> Result<Self> {
        if bin_seconds == 0 {
            return Err(Error::Input("bin width must be positive".into()));
        }
        if !horizon_seconds.is_multiple_of(bin_seconds) {
            return Err(Error::Input(format!(
                "horizon {horizon_seconds}s is not a multiple of the {bin_seconds}s bin width"
            )));
        }
        Ok(DetectorSeries {
            bin_seconds,
            bins: (horizon_seconds / bin_seconds) as usize,
            counts: BTreeMap::new(),
        })
    }

    pub fn bin_seconds(&self) -> u32 {
        self.bin_seconds
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn horizon_seconds(&self) -> u32 {
        self.bin_seconds * self.bins as u32
    }

    /// Replaces the series for `edge`. Length must equal [`Self::bins`].
    pub fn set(&mut self, edge: EdgeIx, counts: Vec<u32>) -> Result<()> {
        if counts.len() != self.bins {
            return Err(Error::Input(format!(
                "expected {} bins, got {}",
                self.bins,
                counts.len()
            )));
        }
        self.counts.insert(edge, counts);
        Ok(())
    }

    pub fn get(&self, edge: EdgeIx) -> Option<&[u32]> {
        self.counts.get(&edge).map(Vec::as_slice)
    }

    pub fn observed_edges(&self) -> impl Iterator<Item = EdgeIx> + '_ {
        self.counts.keys().copied()
    }

    pub fn total(&self, edge: EdgeIx) -> u64 {
        self.get(edge)
            .map(|c| c.iter().map(|&x| x as u64).sum())
            .unwrap_or(0)
    }

    pub fn write(&self, path: &Path, net: &RoadNetwork) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for (edge, series) in &self.counts {
            for (bin, count) in series.iter().enumerate() {
                if *count == 0 {
                    continue;
                }
                w.serialize(CountRecord {
                    edge_id: net.edge(*edge).id.clone(),
                    bin_index: bin as i64,
                    count: *count as i64,
                })
                .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRecord {
    edge_id: String,
    bin_index: i64,
    count: i64,
}

/// Reads a counts file and aligns it with `net`.
pub fn ingest_counts(
    path: impl AsRef<Path>,
    net: &RoadNetwork,
    bin_seconds: u32,
    horizon_seconds: u32,
) -> Result<DetectorSeries> {
    let path = path.as_ref();
    let mut series = DetectorSeries::new(bin_seconds, horizon_seconds)?;
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let mut seen: HashSet<(EdgeIx, usize)> = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line,
            message,
        };
        let row: CountRecord = record
            .deserialize(Some(&headers))
            .map_err(|e| schema(e.to_string()))?;
        if row.count < 0 {
            return Err(schema(format!("negative count {} on edge {:?}", row.count, row.edge_id)));
        }
        if row.bin_index < 0 || row.bin_index as usize >= series.bins {
            return Err(schema(format!(
                "bin_index {} outside [0, {})",
                row.bin_index, series.bins
            )));
        }
        let count = u32::try_from(row.count).map_err(|_| schema("count too large".into()))?;
        let edge = net.edge_ix(&row.edge_id).ok_or_else(|| {
            Error::Validation(format!("counts reference unknown edge {:?}", row.edge_id))
        })?;
        let bin = row.bin_index as usize;
        if !seen.insert((edge, bin)) {
            return Err(schema(format!(
                "duplicate record for edge {:?} bin {bin}",
                row.edge_id
            )));
        }
        let bins = series.bins;
        series.counts.entry(edge).or_insert_with(|| vec![0; bins])[bin] = count;
    }
    Ok(series)
}

/// Per-route flows, one value per bin. A route's flow applies to every edge on it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowAssignment {
    pub bin_seconds: u32,
    pub routes: Vec<Route>,
    /// `flows[route][bin]`, vehicles per bin.
    pub flows: Vec<Vec<u32>>,
}

impl FlowAssignment {
    pub fn bins(&self) -> usize {
        self.flows.first().map_or(0, Vec::len)
    }

    /// Σ_r g_t(r, e).
    pub fn edge_flow(&self, edge: EdgeIx, bin: usize) -> u64 {
        self.routes
            .iter()
            .zip(&self.flows)
            .filter(|(r, _)| r.edges.contains(&edge))
            .map(|(_, f)| f[bin] as u64)
            .sum()
    }
}

/// Absolute count error left after reconstruction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Residual {
    /// Σ_t |c_t(e) − Σ_r g_t(r,e)| per observed edge.
    pub per_edge: BTreeMap<EdgeIx, u64>,
}

impl Residual {
    pub fn total(&self) -> u64 {
        self.per_edge.values().sum()
    }
}

/// Computes the residual of an arbitrary assignment against `counts`.
pub fn residual_of(counts: &DetectorSeries, flows: &FlowAssignment) -> Residual {
    let mut per_edge = BTreeMap::new();
    for edge in counts.observed_edges() {
        let observed = counts.get(edge).unwrap();
        let err = (0..counts.bins())
            .map(|t| (observed[t] as i64 - flows.edge_flow(edge, t) as i64).unsigned_abs())
            .sum();
        per_edge.insert(edge, err);
    }
    Residual { per_edge }
}

/// Greedy path-flow decomposition, solved independently per bin.
///
/// Each round picks the route whose smallest remaining count over its
/// observed edges is largest (ties go to the earlier route), assigns that
/// amount, and subtracts it along the route. Rounds stop when no route can
/// take a positive flow. Routes with no observed edge receive zero flow.
pub fn reconstruct_flows(
    net: &RoadNetwork,
    counts: &DetectorSeries,
    candidate_routes: &[Route],
) -> Result<(FlowAssignment, Residual)> {
    for r in candidate_routes {
        Route::new(&r.id, r.edges.to_vec(), net)?;
    }
    let observed: Vec<EdgeIx> = counts.observed_edges().collect();
    let local: HashMap<EdgeIx, usize> = observed.iter().enumerate().map(|(i, e)| (*e, i)).collect();
    let route_edges: Vec<Vec<usize>> = candidate_routes
        .iter()
        .map(|r| {
            let mut v: Vec<usize> = r.edges.iter().filter_map(|e| local.get(e).copied()).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();

    let per_bin: Vec<Vec<u32>> = (0..counts.bins())
        .into_par_iter()
        .map(|t| {
            let mut remaining: Vec<u32> = observed.iter().map(|e| counts.get(*e).unwrap()[t]).collect();
            greedy_bin(&mut remaining, &route_edges)
        })
        .collect();

    let mut flows = vec![vec![0u32; counts.bins()]; candidate_routes.len()];
    for (t, bin) in per_bin.iter().enumerate() {
        for (r, f) in bin.iter().enumerate() {
            flows[r][t] = *f;
        }
    }
    let assignment = FlowAssignment {
        bin_seconds: counts.bin_seconds(),
        routes: candidate_routes.to_vec(),
        flows,
    };
    let residual = residual_of(counts, &assignment);
    Ok((assignment, residual))
}

fn greedy_bin(remaining: &mut [u32], route_edges: &[Vec<usize>]) -> Vec<u32> {
    let mut flow = vec![0u32; route_edges.len()];
    loop {
        let mut best: Option<(usize, u32)> = None;
        for (r, edges) in route_edges.iter().enumerate() {
            let Some(cap) = edges.iter().map(|&e| remaining[e]).min() else {
                continue;
            };
            if cap > 0 && best.is_none_or(|(_, b)| cap > b) {
                best = Some((r, cap));
            }
        }
        let Some((r, cap)) = best else { break };
        flow[r] += cap;
        for &e in &route_edges[r] {
            remaining[e] -= cap;
        }
    }
    flow
}

/// One scheduled vehicle insertion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spawn {
    pub time: f64,
    /// Index into [`SpawnSchedule::routes`].
    pub route: usize,
    pub vehicle: VehicleId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpawnSchedule {
    pub routes: Vec<Route>,
    /// Sorted by time; vehicle ids are assigned in this order.
    pub entries: Vec<Spawn>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScheduleRecord {
    time_s: f64,
    route_id: String,
    vehicle_id: u32,
}

impl SpawnSchedule {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for s in &self.entries {
            w.serialize(ScheduleRecord {
                time_s: s.time,
                route_id: self.routes[s.route].id.to_string(),
                vehicle_id: s.vehicle.0,
            })
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a schedule export; route ids resolve against `routes`.
    pub fn read(path: &Path, routes: Vec<Route>) -> Result<Self> {
        let index: HashMap<&str, usize> = routes.iter().enumerate().map(|(i, r)| (&*r.id, i)).collect();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut entries = Vec::new();
        for row in reader.deserialize::<ScheduleRecord>() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let route = *index.get(row.route_id.as_str()).ok_or_else(|| {
                Error::Validation(format!("schedule references unknown route {:?}", row.route_id))
            })?;
            if !(row.time_s >= 0.0 && row.time_s.is_finite()) {
                return Err(Error::Validation(format!("invalid spawn time {}", row.time_s)));
            }
            entries.push(Spawn {
                time: row.time_s,
                route,
                vehicle: VehicleId(row.vehicle_id),
            });
        }
        if entries.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::Validation("schedule is not sorted by time".into()));
        }
        Ok(SpawnSchedule { routes, entries })
    }
}

/// Samples insertion times: Poisson(flow) vehicles per route and bin, each
/// placed uniformly within its bin.
pub fn spawn_schedule(flows: &FlowAssignment, seed: u64) -> SpawnSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = flows.bin_seconds as f64;
    let mut raw: Vec<(f64, usize)> = Vec::new();
    for bin in 0..flows.bins() {
        let start = bin as f64 * width;
        for (r, series) in flows.flows.iter().enumerate() {
            let mean = series[bin];
            if mean == 0 {
                continue;
            }
            let n = Poisson::new(mean as f64).expect("positive mean").sample(&mut rng) as u64;
            for _ in 0..n {
                let t = start + rng.gen::<f64>() * width;
                raw.push((t, r));
            }
        }
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let entries = raw
        .into_iter()
        .enumerate()
        .map(|(i, (time, route))| Spawn {
            time,
            route,
            vehicle: VehicleId(i as u32),
        })
        .collect();
    SpawnSchedule {
        routes: flows.routes.clone(),
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn corridor() -> RoadNetwork {
        RoadNetwork::parse(
            "node a\nnode b\nnode c\nedge e1 a b 500 2 30\nedge e2 b c 500 2 30\n",
            Path::new("t"),
        )
        .unwrap()
    }

    fn write_counts(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "edge_id,bin_index,count").unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn all_zero_counts() {
        let net = corridor();
        let mut body = String::new();
        for b in 0..120 {
            body += &format!("e1,{b},0\n");
        }
        let f = write_counts(&body);
        let s = ingest_counts(f.path(), &net, 30, 3600).unwrap();
        assert_eq!(s.bins(), 120);
        assert_eq!(s.total(EdgeIx(0)), 0);
    }

    #[test]
    fn negative_count_is_schema_error() {
        let net = corridor();
        let f = write_counts("e1,0,4\ne2,3,-3\n");
        let err = ingest_counts(f.path(), &net, 30, 3600).unwrap_err();
        assert!(matches!(err, Error::Schema { line: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_edge_and_bad_bin() {
        let net = corridor();
        let f = write_counts("zz,0,4\n");
        assert!(matches!(
            ingest_counts(f.path(), &net, 30, 3600).unwrap_err(),
            Error::Validation(_)
        ));
        let f = write_counts("e1,120,4\n");
        assert!(matches!(
            ingest_counts(f.path(), &net, 30, 3600).unwrap_err(),
            Error::Schema { .. }
        ));
        let f = write_counts("e1,1,4\ne1,1,5\n");
        assert!(ingest_counts(f.path(), &net, 30, 3600).is_err());
    }

    #[test]
    fn per_bin_counts_sum_to_hourly_volume() {
        let net = corridor();
        // 120 veh/h spread one per bin
        let mut body = String::new();
        for b in 0..120 {
            body += &format!("e1,{b},1\ne2,{b},1\n");
        }
        let f = write_counts(&body);
        let s = ingest_counts(f.path(), &net, 30, 3600).unwrap();
        let oracle: u64 = s.get(EdgeIx(0)).unwrap().iter().map(|&c| c as u64).sum();
        assert_eq!(oracle, 120);
        assert_eq!(s.total(EdgeIx(1)), 120);
    }

    #[test]
    fn single_route_exact_fit() {
        let net = RoadNetwork::parse("node a\nnode b\nedge e a b 100 1 30\n", Path::new("t")).unwrap();
        let mut counts = DetectorSeries::new(30, 300).unwrap();
        counts.set(EdgeIx(0), vec![10; 10]).unwrap();
        let r = Route::from_ids("r", &["e"], &net).unwrap();
        let (flows, residual) = reconstruct_flows(&net, &counts, &[r]).unwrap();
        assert_eq!(flows.flows[0], vec![10; 10]);
        assert_eq!(residual.total(), 0);
    }

    #[test]
    fn separable_routes() {
        let net = RoadNetwork::parse(
            "node a\nnode b\nnode c\nnode d\nedge e1 a b 100 1 30\nedge e2 c d 100 1 30\n",
            Path::new("t"),
        )
        .unwrap();
        let mut counts = DetectorSeries::new(30, 30).unwrap();
        counts.set(EdgeIx(0), vec![5]).unwrap();
        counts.set(EdgeIx(1), vec![7]).unwrap();
        let routes = vec![
            Route::from_ids("r1", &["e1"], &net).unwrap(),
            Route::from_ids("r2", &["e2"], &net).unwrap(),
        ];
        let (flows, residual) = reconstruct_flows(&net, &counts, &routes).unwrap();
        assert_eq!(flows.flows, vec![vec![5], vec![7]]);
        assert_eq!(residual.total(), 0);
    }

    #[test]
    fn empty_route_set_reports_total_counts() {
        let net = corridor();
        let mut counts = DetectorSeries::new(30, 60).unwrap();
        counts.set(EdgeIx(0), vec![3, 4]).unwrap();
        let (flows, residual) = reconstruct_flows(&net, &counts, &[]).unwrap();
        assert!(flows.flows.is_empty());
        assert_eq!(residual.total(), 7);
    }

    #[test]
    fn zero_flow_gives_empty_schedule() {
        let net = corridor();
        let flows = FlowAssignment {
            bin_seconds: 30,
            routes: vec![Route::from_ids("r", &["e1", "e2"], &net).unwrap()],
            flows: vec![vec![0; 10]],
        };
        assert!(spawn_schedule(&flows, 1).entries.is_empty());
    }

    #[test]
    fn schedule_is_sorted_and_within_bins() {
        let net = corridor();
        let flows = FlowAssignment {
            bin_seconds: 30,
            routes: vec![
                Route::from_ids("a", &["e1", "e2"], &net).unwrap(),
                Route::from_ids("b", &["e2"], &net).unwrap(),
            ],
            flows: vec![vec![3, 0, 8], vec![1, 5, 2]],
        };
        let s = spawn_schedule(&flows, 42);
        assert_eq!(s, spawn_schedule(&flows, 42));
        assert!(s.entries.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(s.entries.iter().all(|e| e.time >= 0.0 && e.time < 90.0));
        for (i, e) in s.entries.iter().enumerate() {
            assert_eq!(e.vehicle, VehicleId(i as u32));
        }
    }

    #[test]
    fn schedule_export_round_trip() {
        let net = corridor();
        let flows = FlowAssignment {
            bin_seconds: 30,
            routes: vec![Route::from_ids("a", &["e1", "e2"], &net).unwrap()],
            flows: vec![vec![4, 6]],
        };
        let s = spawn_schedule(&flows, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("schedule.csv");
        s.write(&p).unwrap();
        assert_eq!(SpawnSchedule::read(&p, s.routes.clone()).unwrap(), s);
    }
}
