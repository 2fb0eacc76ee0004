//! Reachability-based merge conflicts, supervision events and load series.
//!
//! A merging AV `j` conflicts at merge `m` when both it and at least one
//! vehicle on the target lane could reach `m` within the horizon `h`. The
//! reach of a connected AV on the target lane is truncated to its length,
//! since its intent is shared with the merging vehicle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{MergeId, MergePoint, RoadNetwork};
use crate::sim::{DriverParams, SimConfig, VehicleId, VehicleKind, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReachMode {
    Kinematic,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachParams {
    /// Horizon `h`, s.
    pub horizon: f64,
}

impl Default for ReachParams {
    fn default() -> Self {
        ReachParams { horizon: 5.0 }
    }
}

impl ReachParams {
    pub fn new(horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Input(format!("reach horizon must be positive, got {horizon}")));
        }
        Ok(ReachParams { horizon })
    }

    /// Reach mode of `kind` when it is the target-lane vehicle.
    pub fn mode(&self, kind: VehicleKind) -> ReachMode {
        if kind.is_connected() {
            ReachMode::Truncated
        } else {
            ReachMode::Kinematic
        }
    }
}

/// Distance coverable in `h` seconds at constant maximum acceleration.
pub fn kinematic_reach(speed: f64, max_accel: f64, horizon: f64) -> f64 {
    speed * horizon + 0.5 * max_accel * horizon * horizon
}

/// Reach of a vehicle of `kind` in the role of the target-lane vehicle.
pub fn reach_distance(speed: f64, params: &DriverParams, rp: &ReachParams, kind: VehicleKind) -> f64 {
    match rp.mode(kind) {
        ReachMode::Kinematic => kinematic_reach(speed, params.max_accel, rp.horizon),
        ReachMode::Truncated => params.length,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictSample {
    pub t: u32,
    pub av: VehicleId,
    pub merge: MergeId,
    /// Target-lane vehicles whose reach covers the merge; never empty.
    pub contributors: Vec<VehicleId>,
}

/// One oversight interval per (AV, merge) pair; both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SupervisionEvent {
    pub t_start: u32,
    pub t_end: u32,
    pub av: VehicleId,
    pub merge: MergeId,
}

impl SupervisionEvent {
    pub fn covers(&self, t: u32) -> bool {
        self.t_start <= t && t <= self.t_end
    }

    pub fn duration(&self) -> u32 {
        self.t_end - self.t_start + 1
    }
}

/// Merge lookups by lane slot.
pub struct MergeLanes<'a> {
    net: &'a RoadNetwork,
    merges: &'a [MergePoint],
    merging: Vec<Option<usize>>,
    target: Vec<Option<usize>>,
}

impl<'a> MergeLanes<'a> {
    pub fn new(net: &'a RoadNetwork, merges: &'a [MergePoint]) -> Self {
        let mut merging = vec![None; net.slot_count()];
        let mut target = vec![None; net.slot_count()];
        for (k, m) in merges.iter().enumerate() {
            for l in &m.merging_lanes {
                merging[net.slot(*l)] = Some(k);
            }
            target[net.slot(m.target)] = Some(k);
        }
        MergeLanes {
            net,
            merges,
            merging,
            target,
        }
    }

    /// Merge that `v` must merge at, with its distance to the merge.
    fn merging_at(&self, v: &VehicleState) -> Option<(usize, f64)> {
        let k = self.merging[self.net.slot(v.lane_ref())]?;
        Some((k, self.net.edge(v.edge).length - v.pos))
    }

    /// Merge whose target lane `v` occupies, with the distance to it.
    fn targeting(&self, v: &VehicleState) -> Option<(usize, f64)> {
        let k = self.target[self.net.slot(v.lane_ref())]?;
        Some((k, self.net.edge(v.edge).length - v.pos))
    }
}

/// Conflict samples for one snapshot of the vehicle set at time `t`.
///
/// Samples are ordered by merge, then AV id; contributors by id.
pub fn detect_conflicts(
    t: u32,
    vehicles: &[VehicleState],
    lanes: &MergeLanes<'_>,
    cfg: &SimConfig,
    rp: &ReachParams,
) -> Vec<ConflictSample> {
    let n = lanes.merges.len();
    let mut subjects: Vec<Vec<VehicleId>> = vec![Vec::new(); n];
    let mut others: Vec<Vec<VehicleId>> = vec![Vec::new(); n];
    for v in vehicles {
        if v.kind.is_av() {
            if let Some((k, d)) = lanes.merging_at(v) {
                let reach = kinematic_reach(v.speed, cfg.params(v.kind).max_accel, rp.horizon);
                if reach >= d {
                    subjects[k].push(v.id);
                }
            }
        }
        if let Some((k, d)) = lanes.targeting(v) {
            if d > 0.0 && reach_distance(v.speed, cfg.params(v.kind), rp, v.kind) >= d {
                others[k].push(v.id);
            }
        }
    }
    let mut out = Vec::new();
    for k in 0..n {
        if subjects[k].is_empty() || others[k].is_empty() {
            continue;
        }
        subjects[k].sort_unstable();
        others[k].sort_unstable();
        for &av in &subjects[k] {
            out.push(ConflictSample {
                t,
                av,
                merge: lanes.merges[k].id,
                contributors: others[k].clone(),
            });
        }
    }
    out
}

/// AVs on a merging lane whose kinematic reach covers the merge, regardless
/// of target-lane traffic.
pub fn reachable_merges(
    vehicles: &[VehicleState],
    lanes: &MergeLanes<'_>,
    cfg: &SimConfig,
    rp: &ReachParams,
) -> Vec<(VehicleId, MergeId)> {
    let mut out: Vec<(VehicleId, MergeId)> = vehicles
        .iter()
        .filter(|v| v.kind.is_av())
        .filter_map(|v| {
            let (k, d) = lanes.merging_at(v)?;
            let reach = kinematic_reach(v.speed, cfg.params(v.kind).max_accel, rp.horizon);
            (reach >= d).then(|| (v.id, lanes.merges[k].id))
        })
        .collect();
    out.sort_unstable();
    out
}

/// Folds time-ordered (AV, merge, t) hits into first-to-last spans.
#[derive(Debug, Clone, Default)]
pub struct EventExtractor {
    open: BTreeMap<(VehicleId, MergeId), (u32, u32)>,
}

impl EventExtractor {
    pub fn push(&mut self, av: VehicleId, merge: MergeId, t: u32) {
        self.open
            .entry((av, merge))
            .and_modify(|span| span.1 = t)
            .or_insert((t, t));
    }

    /// Events sorted by start time, then AV, then merge.
    pub fn finish(self) -> Vec<SupervisionEvent> {
        let mut events: Vec<SupervisionEvent> = self
            .open
            .into_iter()
            .map(|((av, merge), (t_start, t_end))| SupervisionEvent {
                t_start,
                t_end,
                av,
                merge,
            })
            .collect();
        events.sort_unstable();
        events
    }
}

pub fn extract_events<'s>(samples: impl IntoIterator<Item = &'s ConflictSample>) -> Vec<SupervisionEvent> {
    let mut x = EventExtractor::default();
    for s in samples {
        x.push(s.av, s.merge, s.t);
    }
    x.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LoadSeries {
    pub supervision: Vec<u32>,
    pub baseline1: Vec<u32>,
    pub baseline2: Vec<u32>,
}

impl LoadSeries {
    pub fn len(&self) -> usize {
        self.supervision.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supervision.is_empty()
    }
}

/// Number of spans covering each second of `[0, horizon)`.
pub fn coverage(events: &[SupervisionEvent], horizon: u32) -> Result<Vec<u32>> {
    let mut diff = vec![0i64; horizon as usize + 1];
    for e in events {
        if e.t_start > e.t_end || e.t_end >= horizon {
            return Err(Error::Input(format!(
                "event [{}, {}] for AV {} lies outside the horizon {horizon}",
                e.t_start, e.t_end, e.av
            )));
        }
        diff[e.t_start as usize] += 1;
        diff[e.t_end as usize + 1] -= 1;
    }
    let mut acc = 0i64;
    Ok(diff[..horizon as usize]
        .iter()
        .map(|d| {
            acc += d;
            acc as u32
        })
        .collect())
}

/// Builds the per-second loads. Baseline 1 counts AVs inside a conservative
/// span of reaching some merge; baseline 2 counts AVs present.
pub fn load_series(
    events: &[SupervisionEvent],
    reach_events: &[SupervisionEvent],
    avs_present: &[u32],
    horizon: u32,
) -> Result<LoadSeries> {
    if avs_present.len() != horizon as usize {
        return Err(Error::Input(format!(
            "AV presence series has {} entries for a {horizon} s horizon",
            avs_present.len()
        )));
    }
    let supervision = coverage(events, horizon)?;
    let baseline1 = per_av_coverage(reach_events, horizon)?;
    Ok(LoadSeries {
        supervision,
        baseline1,
        baseline2: avs_present.to_vec(),
    })
}

/// Distinct AVs covered by at least one span at each second.
fn per_av_coverage(events: &[SupervisionEvent], horizon: u32) -> Result<Vec<u32>> {
    let mut by_av: BTreeMap<VehicleId, Vec<(u32, u32)>> = BTreeMap::new();
    for e in events {
        by_av.entry(e.av).or_default().push((e.t_start, e.t_end));
    }
    let mut merged = Vec::new();
    for (av, mut spans) in by_av {
        spans.sort_unstable();
        let mut cur = spans[0];
        for &(s, e) in &spans[1..] {
            if s <= cur.1 + 1 {
                cur.1 = cur.1.max(e);
            } else {
                merged.push(span_event(av, cur));
                cur = (s, e);
            }
        }
        merged.push(span_event(av, cur));
    }
    coverage(&merged, horizon)
}

fn span_event(av: VehicleId, (t_start, t_end): (u32, u32)) -> SupervisionEvent {
    SupervisionEvent {
        t_start,
        t_end,
        av,
        merge: MergeId(u32::MAX),
    }
}

/// Maximum and time average of a load series.
pub fn khat(series: &[u32]) -> (u32, f64) {
    if series.is_empty() {
        return (0, 0.0);
    }
    let max = series.iter().copied().max().unwrap_or(0);
    let sum: u64 = series.iter().map(|&s| s as u64).sum();
    (max, sum as f64 / series.len() as f64)
}

/// Collects per-second observations of a running simulation.
pub struct SafetyMonitor<'a> {
    lanes: MergeLanes<'a>,
    rp: ReachParams,
    pub samples: Vec<ConflictSample>,
    events: EventExtractor,
    reach: EventExtractor,
    pub avs_present: Vec<u32>,
}

impl<'a> SafetyMonitor<'a> {
    pub fn new(net: &'a RoadNetwork, merges: &'a [MergePoint], rp: ReachParams) -> Self {
        SafetyMonitor {
            lanes: MergeLanes::new(net, merges),
            rp,
            samples: Vec::new(),
            events: EventExtractor::default(),
            reach: EventExtractor::default(),
            avs_present: Vec::new(),
        }
    }

    /// Records the snapshot at second `t`; call once per second in order.
    pub fn observe(&mut self, t: u32, vehicles: &[VehicleState], cfg: &SimConfig) {
        for s in detect_conflicts(t, vehicles, &self.lanes, cfg, &self.rp) {
            self.events.push(s.av, s.merge, t);
            self.samples.push(s);
        }
        for (av, m) in reachable_merges(vehicles, &self.lanes, cfg, &self.rp) {
            self.reach.push(av, m, t);
        }
        self.avs_present
            .push(vehicles.iter().filter(|v| v.kind.is_av()).count() as u32);
    }

    pub fn finish(self, horizon: u32) -> Result<SafetyOutcome> {
        let events = self.events.finish();
        let reach_events = self.reach.finish();
        let series = load_series(&events, &reach_events, &self.avs_present, horizon)?;
        Ok(SafetyOutcome {
            samples: self.samples,
            events,
            series,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafetyOutcome {
    pub samples: Vec<ConflictSample>,
    pub events: Vec<SupervisionEvent>,
    pub series: LoadSeries,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(av: u32, m: u32, s: u32, e: u32) -> SupervisionEvent {
        SupervisionEvent {
            t_start: s,
            t_end: e,
            av: VehicleId(av),
            merge: MergeId(m),
        }
    }

    fn sample(t: u32, av: u32, m: u32) -> ConflictSample {
        ConflictSample {
            t,
            av: VehicleId(av),
            merge: MergeId(m),
            contributors: vec![VehicleId(99)],
        }
    }

    #[test]
    fn reach_values() {
        let p = DriverParams::default();
        let rp = ReachParams::default();
        assert_eq!(reach_distance(0.0, &p, &rp, VehicleKind::Human), 17.5);
        assert_eq!(reach_distance(30.0, &p, &rp, VehicleKind::Unconnected), 167.5);
        assert_eq!(reach_distance(30.0, &p, &rp, VehicleKind::Connected), 5.0);
        assert_eq!(reach_distance(12.0, &p, &rp, VehicleKind::Cooperative), 5.0);
        assert!(ReachParams::new(0.0).is_err());
    }

    #[test]
    fn contiguous_samples_make_one_event() {
        let s: Vec<_> = [10, 11, 12].iter().map(|&t| sample(t, 1, 0)).collect();
        assert_eq!(extract_events(&s), vec![ev(1, 0, 10, 12)]);
    }

    #[test]
    fn gaps_are_absorbed() {
        let s: Vec<_> = [10, 11, 20].iter().map(|&t| sample(t, 1, 0)).collect();
        assert_eq!(extract_events(&s), vec![ev(1, 0, 10, 20)]);
    }

    #[test]
    fn one_event_per_merge() {
        let s = vec![sample(5, 1, 0), sample(6, 1, 0), sample(40, 1, 1)];
        assert_eq!(extract_events(&s), vec![ev(1, 0, 5, 6), ev(1, 1, 40, 40)]);
    }

    #[test]
    fn interval_stabbing() {
        let s = coverage(&[ev(1, 0, 0, 5), ev(2, 0, 3, 8)], 10).unwrap();
        assert_eq!(s, vec![1, 1, 1, 2, 2, 2, 1, 1, 1, 0]);
    }

    #[test]
    fn empty_load() {
        let l = load_series(&[], &[], &[0; 4], 4).unwrap();
        assert_eq!(l.supervision, vec![0; 4]);
        assert_eq!(l.baseline1, vec![0; 4]);
    }

    #[test]
    fn event_outside_horizon_rejected() {
        assert!(matches!(
            load_series(&[ev(1, 0, 2, 10)], &[], &[0; 10], 10),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn baseline1_counts_each_av_once() {
        let b = per_av_coverage(&[ev(1, 0, 0, 3), ev(1, 1, 2, 5), ev(2, 0, 4, 4)], 6).unwrap();
        assert_eq!(b, vec![1, 1, 1, 1, 2, 1]);
    }

    #[test]
    fn khat_examples() {
        assert_eq!(khat(&[0, 0, 0]), (0, 0.0));
        assert_eq!(khat(&[0, 1, 2, 1]), (2, 1.0));
    }
}
