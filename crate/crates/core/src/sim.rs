//! Discrete-time microscopic traffic simulation.
//!
//! Longitudinal motion follows the Intelligent Driver Model with a ballistic
//! update. Lateral motion is limited to two maneuvers: mandatory merges off
//! lanes that end at a junction, and the cooperative lane shift performed by
//! cooperative connected AVs to clear the merge target lane.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::demand::{Spawn, SpawnSchedule};
use crate::error::{Error, Result};
use crate::network::{
    detect_merge_points, distance_to_node, EdgeIx, LaneRef, MergeId, MergePoint, RoadNetwork,
    Route,
};

/// Deceleration floor applied to every IDM output, m/s².
pub const EMERGENCY_DECEL: f64 = -9.0;

/// Smallest bumper-to-bumper gap the collision guard leaves, m.
pub const GUARD_GAP: f64 = 0.1;

/// Largest deceleration a lateral move may impose on the new follower or on
/// the mover itself, m/s².
pub const SAFE_DECEL: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VehicleId(pub u32);

impl fmt::Display for VehicleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehicleKind {
    #[serde(rename = "HV")]
    Human,
    /// Unconnected AV.
    #[serde(rename = "UCAV")]
    Unconnected,
    /// Connected, non-cooperative AV.
    #[serde(rename = "NCAV")]
    Connected,
    /// Connected AV that frees the merge target lane when it can.
    #[serde(rename = "CCAV")]
    Cooperative,
}

impl VehicleKind {
    pub fn is_av(self) -> bool {
        self != VehicleKind::Human
    }

    pub fn is_connected(self) -> bool {
        matches!(self, VehicleKind::Connected | VehicleKind::Cooperative)
    }

    pub fn label(self) -> &'static str {
        match self {
            VehicleKind::Human => "HV",
            VehicleKind::Unconnected => "UCAV",
            VehicleKind::Connected => "NCAV",
            VehicleKind::Cooperative => "CCAV",
        }
    }
}

impl fmt::Display for VehicleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for VehicleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HV" => Ok(VehicleKind::Human),
            "UCAV" => Ok(VehicleKind::Unconnected),
            "NCAV" => Ok(VehicleKind::Connected),
            "CCAV" => Ok(VehicleKind::Cooperative),
            _ => Err(Error::Input(format!("unknown vehicle kind {s:?}"))),
        }
    }
}

/// IDM parameters for one driver population.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverParams {
    /// Desired speed in m/s; `None` uses the current edge's speed limit.
    pub desired_speed: Option<f64>,
    /// Safe time headway, s.
    pub time_headway: f64,
    /// Maximum acceleration, m/s².
    pub max_accel: f64,
    /// Comfortable deceleration, m/s².
    pub comfortable_decel: f64,
    /// Jam distance, m.
    pub min_gap: f64,
    pub accel_exponent: f64,
    /// Vehicle length, m.
    pub length: f64,
}

impl Default for DriverParams {
    fn default() -> Self {
        DriverParams {
            desired_speed: None,
            time_headway: 1.5,
            max_accel: 1.4,
            comfortable_decel: 2.0,
            min_gap: 2.0,
            accel_exponent: 4.0,
            length: 5.0,
        }
    }
}

impl DriverParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("time_headway", self.time_headway),
            ("max_accel", self.max_accel),
            ("comfortable_decel", self.comfortable_decel),
            ("min_gap", self.min_gap),
            ("length", self.length),
            ("desired_speed", self.desired_speed.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("driver parameter {name} must be positive")));
            }
        }
        if !(self.accel_exponent >= 1.0) {
            return Err(Error::Input("accel_exponent must be at least 1".into()));
        }
        Ok(())
    }

    pub fn desired_speed_on(&self, speed_limit: f64) -> f64 {
        self.desired_speed.unwrap_or(speed_limit)
    }
}

/// A leader was at or behind the follower's front bumper.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonPositiveGap;

/// IDM acceleration. Pass `f64::INFINITY` as `gap` for free flow.
pub fn idm_accel(
    gap: f64,
    speed: f64,
    lead_speed: f64,
    desired_speed: f64,
    p: &DriverParams,
) -> Result<f64, NonPositiveGap> {
    if gap <= 0.0 {
        return Err(NonPositiveGap);
    }
    let free = 1.0 - (speed / desired_speed).powf(p.accel_exponent);
    let interaction = if gap.is_infinite() {
        0.0
    } else {
        // a much faster leader must not turn the dynamic term into a pull
        let dynamic = speed * p.time_headway
            + speed * (speed - lead_speed) / (2.0 * (p.max_accel * p.comfortable_decel).sqrt());
        let s_star = p.min_gap + dynamic.max(0.0);
        (s_star / gap).powi(2)
    };
    Ok((p.max_accel * (free - interaction)).max(EMERGENCY_DECEL))
}

/// Remaining-route distance from a vehicle's front bumper to `m`.
pub fn distance_to_merge(v: &VehicleState, m: &MergePoint, net: &RoadNetwork) -> Result<Option<f64>> {
    distance_to_node(net, v.edge, v.pos, v.route_ahead(), m.node)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleState {
    pub id: VehicleId,
    pub kind: VehicleKind,
    pub route: Route,
    /// Index of the route edge the vehicle is traversing.
    pub route_pos: usize,
    /// Current edge. After a merge from a ramp this is the parallel approach
    /// edge rather than `route.edges[route_pos]`; both end at the same junction.
    pub edge: EdgeIx,
    pub lane: u32,
    /// Front bumper, meters from the edge start.
    pub pos: f64,
    pub speed: f64,
    pub length: f64,
    pub spawned_at: f64,
}

impl VehicleState {
    pub fn lane_ref(&self) -> LaneRef {
        LaneRef {
            edge: self.edge,
            lane: self.lane,
        }
    }

    pub fn route_ahead(&self) -> &[EdgeIx] {
        &self.route.edges[self.route_pos + 1..]
    }

    fn rear(&self) -> f64 {
        self.pos - self.length
    }
}

/// Record of a vehicle leaving the network at the end of its route.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    pub vehicle: VehicleId,
    pub kind: VehicleKind,
    pub spawned_at: f64,
    pub exited_at: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AvKind {
    #[serde(rename = "UCAV")]
    Unconnected,
    #[serde(rename = "NCAV")]
    Connected,
    #[serde(rename = "CCAV")]
    Cooperative,
}

impl From<AvKind> for VehicleKind {
    fn from(k: AvKind) -> Self {
        match k {
            AvKind::Unconnected => VehicleKind::Unconnected,
            AvKind::Connected => VehicleKind::Connected,
            AvKind::Cooperative => VehicleKind::Cooperative,
        }
    }
}

impl fmt::Display for AvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        VehicleKind::from(*self).fmt(f)
    }
}

impl FromStr for AvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<VehicleKind>()? {
            VehicleKind::Unconnected => Ok(AvKind::Unconnected),
            VehicleKind::Connected => Ok(AvKind::Connected),
            VehicleKind::Cooperative => Ok(AvKind::Cooperative),
            VehicleKind::Human => Err(Error::Input("scenario AV kind cannot be HV".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Step length, s. Must divide one second evenly.
    pub dt: f64,
    pub penetration: f64,
    pub av_kind: AvKind,
    /// Seed of the vehicle-kind channel.
    pub kind_seed: u64,
    pub hv: DriverParams,
    pub av: DriverParams,
    /// Length of the stretch before a lane end within which merges happen, m.
    pub merge_zone: f64,
    /// Distance upstream of a merge within which CCAVs cooperate, m.
    pub cooperation_zone: f64,
    /// How far past the current edge vehicles look for a leader, m.
    pub lookahead: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0,
            penetration: 0.0,
            av_kind: AvKind::Unconnected,
            kind_seed: 0,
            hv: DriverParams::default(),
            av: DriverParams::default(),
            merge_zone: 150.0,
            cooperation_zone: 250.0,
            lookahead: 300.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 1.0) {
            return Err(Error::Input(format!("dt must be in (0, 1], got {}", self.dt)));
        }
        let per_second = 1.0 / self.dt;
        if (per_second - per_second.round()).abs() > 1e-9 {
            return Err(Error::Input(format!("dt {} does not divide one second", self.dt)));
        }
        if !(0.0..=1.0).contains(&self.penetration) {
            return Err(Error::Input(format!(
                "penetration rate must lie in [0, 1], got {}",
                self.penetration
            )));
        }
        self.hv.validate()?;
        self.av.validate()?;
        if !(self.merge_zone > 0.0 && self.cooperation_zone >= 0.0 && self.lookahead > 0.0) {
            return Err(Error::Input("zone lengths must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_second(&self) -> u32 {
        (1.0 / self.dt).round() as u32
    }

    pub fn params(&self, kind: VehicleKind) -> &DriverParams {
        if kind.is_av() {
            &self.av
        } else {
            &self.hv
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-vehicle seed on the kind-assignment channel.
pub fn vehicle_seed(channel_seed: u64, vehicle: VehicleId) -> u64 {
    splitmix64(channel_seed ^ splitmix64(vehicle.0 as u64))
}

/// Bernoulli(p) draw deciding whether a vehicle is an AV of `scenario_kind`.
///
/// The draw depends only on `vehicle_seed`, so scenarios that share a seed
/// agree on which vehicles are AVs whatever their AV kind, and the AV set at
/// a lower rate is a subset of the AV set at a higher one.
pub fn assign_kind(vehicle_seed: u64, p: f64, scenario_kind: AvKind) -> VehicleKind {
    let u = (splitmix64(vehicle_seed) >> 11) as f64 / (1u64 << 53) as f64;
    if u < p {
        scenario_kind.into()
    } else {
        VehicleKind::Human
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimState {
    /// Seconds.
    pub clock: f64,
    pub steps: u64,
    pub vehicles: Vec<VehicleState>,
    pub pending: VecDeque<Spawn>,
    pub exits: Vec<ExitRecord>,
    pub spawned: u64,
    pub guard_events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    Merged,
    Waiting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftOutcome {
    Shifted,
    Held,
}

/// Counters for one call to [`Simulation::step`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepReport {
    pub inserted: u32,
    pub merged: u32,
    pub shifted: u32,
    pub exited: u32,
    pub guard_events: u32,
}

#[derive(Debug, Clone, Copy)]
enum Leader {
    None,
    /// Another vehicle; `offset` converts its position into the follower's edge frame.
    Vehicle { idx: usize, offset: f64 },
    /// End of a lane without continuation, in the follower's frame.
    LaneEnd { pos: f64 },
}

/// Vehicles bucketed by lane, each bucket sorted front to back.
struct LaneIndex {
    slots: Vec<Vec<usize>>,
}

impl LaneIndex {
    fn build(net: &RoadNetwork, vehicles: &[VehicleState]) -> Self {
        let mut slots = vec![Vec::new(); net.slot_count()];
        for (i, v) in vehicles.iter().enumerate() {
            slots[net.slot(v.lane_ref())].push(i);
        }
        for s in &mut slots {
            sort_front_to_back(s, vehicles);
        }
        LaneIndex { slots }
    }

    fn remove(&mut self, slot: usize, idx: usize) {
        self.slots[slot].retain(|&i| i != idx);
    }

    fn insert(&mut self, slot: usize, idx: usize, vehicles: &[VehicleState]) {
        self.slots[slot].push(idx);
        sort_front_to_back(&mut self.slots[slot], vehicles);
    }
}

fn sort_front_to_back(s: &mut [usize], vehicles: &[VehicleState]) {
    s.sort_by(|&a, &b| {
        vehicles[b]
            .pos
            .total_cmp(&vehicles[a].pos)
            .then(vehicles[a].id.cmp(&vehicles[b].id))
    });
}

/// A network, its merge points, a demand schedule and the evolving state.
pub struct Simulation<'n> {
    net: &'n RoadNetwork,
    merges: Vec<MergePoint>,
    cfg: SimConfig,
    schedule: SpawnSchedule,
    next_spawn: usize,
    merging_slot: Vec<Option<MergeId>>,
    target_slot: Vec<Option<MergeId>>,
    speed_ceiling: f64,
    pub state: SimState,
}

impl<'n> Simulation<'n> {
    pub fn new(net: &'n RoadNetwork, cfg: SimConfig, schedule: SpawnSchedule) -> Result<Self> {
        cfg.validate()?;
        let merges = detect_merge_points(net);
        let mut merging_slot = vec![None; net.slot_count()];
        let mut target_slot = vec![None; net.slot_count()];
        for m in &merges {
            for &l in &m.merging_lanes {
                merging_slot[net.slot(l)] = Some(m.id);
            }
            target_slot[net.slot(m.target)] = Some(m.id);
        }
        let desired = [cfg.hv.desired_speed, cfg.av.desired_speed]
            .into_iter()
            .flatten()
            .fold(net.max_speed_limit(), f64::max);
        Ok(Simulation {
            net,
            merges,
            cfg,
            schedule,
            next_spawn: 0,
            merging_slot,
            target_slot,
            speed_ceiling: desired + 1.0,
            state: SimState::default(),
        })
    }

    pub fn network(&self) -> &RoadNetwork {
        self.net
    }

    pub fn merges(&self) -> &[MergePoint] {
        &self.merges
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &SpawnSchedule {
        &self.schedule
    }

    /// Vehicles spawned so far plus those still scheduled or pending.
    pub fn finished(&self) -> bool {
        self.next_spawn >= self.schedule.entries.len()
            && self.state.pending.is_empty()
            && self.state.vehicles.is_empty()
    }

    /// Places a vehicle directly, bypassing the spawn schedule.
    pub fn place(&mut self, v: VehicleState) -> Result<()> {
        let edge = self.net.try_edge(v.edge).ok_or_else(|| Error::Input("unknown edge".into()))?;
        if v.lane >= edge.lanes || !(0.0..=edge.length).contains(&v.pos) || v.speed < 0.0 {
            return Err(Error::Input(format!("vehicle {} placed outside its edge", v.id)));
        }
        if self.state.vehicles.iter().any(|o| o.id == v.id) {
            return Err(Error::Input(format!("duplicate vehicle id {}", v.id)));
        }
        self.state.vehicles.push(v);
        self.state.spawned += 1;
        Ok(())
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleState> {
        self.state.vehicles.iter().find(|v| v.id == id)
    }

    fn index_of(&self, id: VehicleId) -> Result<usize> {
        self.state
            .vehicles
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| Error::Input(format!("no vehicle {id}")))
    }

    fn desired_speed(&self, v: &VehicleState) -> f64 {
        self.cfg
            .params(v.kind)
            .desired_speed_on(self.net.edge(v.edge).speed_limit)
    }

    /// Advances the state by one step of `dt` seconds.
    pub fn step(&mut self) -> Result<StepReport> {
        let mut report = StepReport::default();
        let t_end = self.state.clock + self.cfg.dt;

        report.inserted = self.insert_spawns(t_end);

        let mut index = LaneIndex::build(self.net, &self.state.vehicles);
        if self.cfg.av_kind == AvKind::Cooperative && self.cfg.penetration > 0.0 {
            report.shifted = self.cooperate(&mut index);
        }
        report.merged = self.merge_all(&mut index);

        let leaders = self.find_leaders(&index);
        let dt = self.cfg.dt;
        let accels: Vec<f64> = self
            .state
            .vehicles
            .iter()
            .zip(&leaders)
            .map(|(v, leader)| self.accel_for(v, *leader))
            .collect();
        for (v, a) in self.state.vehicles.iter_mut().zip(accels) {
            v.speed = (v.speed + a * dt).max(0.0);
            v.pos += v.speed * dt;
        }

        report.guard_events += self.guard_followers(&leaders);
        let (exited, guards) = self.advance_edges(t_end);
        report.exited = exited;
        report.guard_events += guards;

        self.state.guard_events += report.guard_events as u64;
        self.state.clock = t_end;
        self.state.steps += 1;
        self.check_invariants()?;
        Ok(report)
    }

    fn insert_spawns(&mut self, t_end: f64) -> u32 {
        while let Some(s) = self.schedule.entries.get(self.next_spawn) {
            if s.time >= t_end {
                break;
            }
            self.state.pending.push_back(*s);
            self.next_spawn += 1;
        }
        let mut inserted = 0;
        let mut waiting = VecDeque::new();
        while let Some(s) = self.state.pending.pop_front() {
            if self.try_insert(s) {
                inserted += 1;
            } else {
                waiting.push_back(s);
            }
        }
        self.state.pending = waiting;
        inserted
    }

    fn try_insert(&mut self, s: Spawn) -> bool {
        let route = self.schedule.routes[s.route].clone();
        let kind = assign_kind(
            vehicle_seed(self.cfg.kind_seed, s.vehicle),
            self.cfg.penetration,
            self.cfg.av_kind,
        );
        let p = *self.cfg.params(kind);
        let edge_ix = route.first();
        let edge = self.net.edge(edge_ix);
        let v0 = p.desired_speed_on(edge.speed_limit);

        // rearmost vehicle per lane; pick the lane with the most room
        let mut best: Option<(u32, f64, Option<f64>)> = None;
        for lane in 0..edge.lanes {
            let rear = self
                .state
                .vehicles
                .iter()
                .filter(|v| v.edge == edge_ix && v.lane == lane)
                .min_by(|a, b| a.rear().total_cmp(&b.rear()));
            let (gap, lead_speed) = match rear {
                Some(r) => (r.rear(), Some(r.speed)),
                None => (f64::INFINITY, None),
            };
            if best.is_none_or(|(_, g, _)| gap > g) {
                best = Some((lane, gap, lead_speed));
            }
        }
        let Some((lane, gap, lead_speed)) = best else {
            return false;
        };
        if gap < p.min_gap {
            return false;
        }
        let mut speed = v0.min((gap - p.min_gap) / p.time_headway);
        if let Some(vl) = lead_speed {
            if speed > vl {
                let a = idm_accel(gap, speed, vl, v0, &p).unwrap_or(EMERGENCY_DECEL);
                if a < -p.comfortable_decel {
                    speed = vl;
                }
            }
        }
        self.state.vehicles.push(VehicleState {
            id: s.vehicle,
            kind,
            route,
            route_pos: 0,
            edge: edge_ix,
            lane,
            pos: 0.0,
            speed,
            length: p.length,
            spawned_at: s.time,
        });
        self.state.spawned += 1;
        true
    }

    /// Leader of a vehicle located at `pos` on `lane`, looking downstream past
    /// the lane's end along `ahead`. `skip` excludes one vehicle (the mover).
    fn leader_at(
        &self,
        index: &LaneIndex,
        lane: LaneRef,
        pos: f64,
        ahead: &[EdgeIx],
        skip: Option<usize>,
    ) -> Leader {
        let vehicles = &self.state.vehicles;
        let bucket = &index.slots[self.net.slot(lane)];
        if let Some(&idx) = bucket
            .iter()
            .rev()
            .find(|&&i| Some(i) != skip && vehicles[i].pos >= pos)
        {
            return Leader::Vehicle { idx, offset: 0.0 };
        }
        let mut cur = lane;
        let mut offset = 0.0;
        let mut rest = ahead;
        loop {
            let len = self.net.edge(cur.edge).length;
            if self.net.is_dead_end_lane(cur) {
                return Leader::LaneEnd { pos: offset + len };
            }
            let Some((&next, tail)) = rest.split_first() else {
                return Leader::None;
            };
            offset += len;
            if offset - pos > self.cfg.lookahead {
                return Leader::None;
            }
            let next_lane = LaneRef {
                edge: next,
                lane: self.net.continuation(cur, next).expect("continuing lane"),
            };
            if let Some(&idx) = index.slots[self.net.slot(next_lane)]
                .iter()
                .rev()
                .find(|&&i| Some(i) != skip)
            {
                return Leader::Vehicle { idx, offset };
            }
            cur = next_lane;
            rest = tail;
        }
    }

    fn gap_to(&self, leader: Leader, pos: f64) -> Option<(f64, f64)> {
        match leader {
            Leader::None => None,
            Leader::Vehicle { idx, offset } => {
                let l = &self.state.vehicles[idx];
                Some((l.rear() + offset - pos, l.speed))
            }
            Leader::LaneEnd { pos: end } => Some((end - pos, 0.0)),
        }
    }

    fn find_leaders(&self, index: &LaneIndex) -> Vec<Leader> {
        let vehicles = &self.state.vehicles;
        let mut leaders = vec![Leader::None; vehicles.len()];
        for bucket in &index.slots {
            for (k, &i) in bucket.iter().enumerate() {
                leaders[i] = if k > 0 {
                    Leader::Vehicle {
                        idx: bucket[k - 1],
                        offset: 0.0,
                    }
                } else {
                    // front of its lane: only downstream edges can hold a leader
                    let v = &vehicles[i];
                    match self.leader_at(index, v.lane_ref(), f64::INFINITY, v.route_ahead(), Some(i)) {
                        // a lane end only matters once the merge zone begins
                        Leader::LaneEnd { pos } if pos - v.pos > self.cfg.merge_zone => Leader::None,
                        l => l,
                    }
                };
            }
        }
        leaders
    }

    fn accel_for(&self, v: &VehicleState, leader: Leader) -> f64 {
        let p = self.cfg.params(v.kind);
        let v0 = self.desired_speed(v);
        let (gap, lead_speed) = self.gap_to(leader, v.pos).unwrap_or((f64::INFINITY, 0.0));
        idm_accel(gap, v.speed, lead_speed, v0, p).unwrap_or(EMERGENCY_DECEL)
    }

    /// Clamps followers that moved closer than [`GUARD_GAP`] to the leader they
    /// were following this step.
    fn guard_followers(&mut self, leaders: &[Leader]) -> u32 {
        let mut events = 0;
        loop {
            let mut changed = false;
            for (i, leader) in leaders.iter().enumerate() {
                let Leader::Vehicle { idx, offset } = *leader else {
                    continue;
                };
                let (rear, lead_speed) = {
                    let l = &self.state.vehicles[idx];
                    (l.rear() + offset, l.speed)
                };
                let f = &mut self.state.vehicles[i];
                if f.pos > rear - GUARD_GAP + 1e-9 {
                    f.pos = rear - GUARD_GAP;
                    f.speed = f.speed.min(lead_speed);
                    events += 1;
                    changed = true;
                }
            }
            if !changed {
                return events;
            }
        }
    }

    /// Moves vehicles across junctions and removes those that finished their
    /// route. Returns (exited, guard events).
    fn advance_edges(&mut self, now: f64) -> (u32, u32) {
        let mut order: Vec<usize> = (0..self.state.vehicles.len())
            .filter(|&i| {
                let v = &self.state.vehicles[i];
                v.pos >= self.net.edge(v.edge).length
            })
            .collect();
        // furthest overshoot first so later entrants queue behind earlier ones
        order.sort_by(|&a, &b| {
            let va = &self.state.vehicles[a];
            let vb = &self.state.vehicles[b];
            let oa = va.pos - self.net.edge(va.edge).length;
            let ob = vb.pos - self.net.edge(vb.edge).length;
            ob.total_cmp(&oa).then(va.id.cmp(&vb.id))
        });

        let mut exited = vec![false; self.state.vehicles.len()];
        let mut guards = 0;
        for i in order {
            loop {
                let v = &self.state.vehicles[i];
                let len = self.net.edge(v.edge).length;
                if v.pos < len {
                    break;
                }
                let lane = v.lane_ref();
                if self.net.is_dead_end_lane(lane) {
                    let v = &mut self.state.vehicles[i];
                    if v.pos > len {
                        guards += 1;
                    }
                    v.pos = len;
                    v.speed = 0.0;
                    break;
                }
                let Some(&next) = v.route_ahead().first() else {
                    exited[i] = true;
                    break;
                };
                let next_lane = self.net.continuation(lane, next).expect("continuing lane");
                let mut entry = v.pos - len;
                let rearmost = self
                    .state
                    .vehicles
                    .iter()
                    .enumerate()
                    .filter(|(j, o)| !exited[*j] && o.edge == next && o.lane == next_lane)
                    .map(|(_, o)| (o.rear(), o.speed))
                    .min_by(|a, b| a.0.total_cmp(&b.0));
                let mut blocked_speed = None;
                if let Some((rear, speed)) = rearmost {
                    if entry > rear - GUARD_GAP {
                        entry = rear - GUARD_GAP;
                        blocked_speed = Some(speed);
                        guards += 1;
                    }
                }
                let v = &mut self.state.vehicles[i];
                if let Some(s) = blocked_speed {
                    v.speed = v.speed.min(s);
                }
                if entry < 0.0 {
                    v.pos = len + entry;
                    break;
                }
                v.edge = next;
                v.lane = next_lane;
                v.pos = entry;
                v.route_pos += 1;
            }
        }

        let mut count = 0;
        let mut k = 0;
        let exits = &mut self.state.exits;
        self.state.vehicles.retain(|v| {
            let gone = exited[k];
            k += 1;
            if gone {
                exits.push(ExitRecord {
                    vehicle: v.id,
                    kind: v.kind,
                    spawned_at: v.spawned_at,
                    exited_at: now,
                });
                count += 1;
            }
            !gone
        });
        (count, guards)
    }

    /// Half-headway gap acceptance plus a deceleration bound for both the
    /// mover and its new follower.
    fn accepts(
        &self,
        mover: &VehicleState,
        new_lane: LaneRef,
        new_pos: f64,
        lead: Option<(f64, f64)>,
        lag: Option<usize>,
    ) -> bool {
        let p = self.cfg.params(mover.kind);
        let limit = self.net.edge(new_lane.edge).speed_limit;
        if let Some((gap, lead_speed)) = lead {
            if gap < p.min_gap + 0.5 * mover.speed * p.time_headway {
                return false;
            }
            let a = idm_accel(gap, mover.speed, lead_speed, p.desired_speed_on(limit), p);
            if a.map_or(true, |a| a < -SAFE_DECEL) {
                return false;
            }
        }
        if let Some(j) = lag {
            let lag = &self.state.vehicles[j];
            let pl = self.cfg.params(lag.kind);
            let gap = new_pos - mover.length - lag.pos;
            if gap < pl.min_gap + 0.5 * lag.speed * pl.time_headway {
                return false;
            }
            let a = idm_accel(gap, lag.speed, mover.speed, self.desired_speed(lag), pl);
            if a.map_or(true, |a| a < -SAFE_DECEL) {
                return false;
            }
        }
        true
    }

    fn lag_at(&self, index: &LaneIndex, lane: LaneRef, pos: f64, skip: usize) -> Option<usize> {
        index.slots[self.net.slot(lane)]
            .iter()
            .copied()
            .find(|&i| i != skip && self.state.vehicles[i].pos < pos)
    }

    /// Tries to move a vehicle off its lane-end onto `target` at the same
    /// distance to the junction.
    fn try_lateral(
        &mut self,
        index: &mut LaneIndex,
        i: usize,
        target: LaneRef,
        new_pos: f64,
    ) -> bool {
        if new_pos < 0.0 || new_pos > self.net.edge(target.edge).length {
            return false;
        }
        let v = &self.state.vehicles[i];
        let leader = self.leader_at(index, target, new_pos, v.route_ahead(), Some(i));
        let lead = self.gap_to(leader, new_pos);
        let lag = self.lag_at(index, target, new_pos, i);
        if !self.accepts(v, target, new_pos, lead, lag) {
            return false;
        }
        let old = self.net.slot(v.lane_ref());
        index.remove(old, i);
        let v = &mut self.state.vehicles[i];
        v.edge = target.edge;
        v.lane = target.lane;
        v.pos = new_pos;
        let new = self.net.slot(target);
        index.insert(new, i, &self.state.vehicles);
        true
    }

    fn merge_candidates(&self, index: &LaneIndex, m: &MergePoint) -> Vec<usize> {
        let mut c: Vec<(f64, VehicleId, usize)> = m
            .merging_lanes
            .iter()
            .flat_map(|l| index.slots[self.net.slot(*l)].iter().copied())
            .map(|i| {
                let v = &self.state.vehicles[i];
                (self.net.edge(v.edge).length - v.pos, v.id, i)
            })
            .filter(|(d, _, _)| *d <= self.cfg.merge_zone)
            .collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        c.into_iter().map(|(_, _, i)| i).collect()
    }

    fn merge_all(&mut self, index: &mut LaneIndex) -> u32 {
        let mut merged = 0;
        for mi in 0..self.merges.len() {
            let candidates = self.merge_candidates(index, &self.merges[mi]);
            for i in candidates {
                if self.merge_vehicle(index, i, mi) == MergeOutcome::Merged {
                    merged += 1;
                }
            }
        }
        merged
    }

    fn merge_vehicle(&mut self, index: &mut LaneIndex, i: usize, mi: usize) -> MergeOutcome {
        let m = &self.merges[mi];
        let v = &self.state.vehicles[i];
        let remaining = self.net.edge(v.edge).length - v.pos;
        if !m.is_merging_lane(v.lane_ref()) || remaining > self.cfg.merge_zone {
            return MergeOutcome::Waiting;
        }
        let target = m.target;
        let new_pos = self.net.edge(target.edge).length - remaining;
        if self.try_lateral(index, i, target, new_pos) {
            MergeOutcome::Merged
        } else {
            MergeOutcome::Waiting
        }
    }

    /// Attempts the merge of `vehicle` at `merge` against the current state.
    ///
    /// Returns `Waiting` without moving when the vehicle is not on one of the
    /// merge's lane ends within the merge zone, or when no acceptable gap
    /// exists on the target lane.
    pub fn attempt_merge(&mut self, vehicle: VehicleId, merge: MergeId) -> Result<MergeOutcome> {
        let i = self.index_of(vehicle)?;
        let mi = self
            .merges
            .iter()
            .position(|m| m.id == merge)
            .ok_or_else(|| Error::Input(format!("no merge {}", merge.0)))?;
        let mut index = LaneIndex::build(self.net, &self.state.vehicles);
        Ok(self.merge_vehicle(&mut index, i, mi))
    }

    fn cooperate(&mut self, index: &mut LaneIndex) -> u32 {
        let mut shifted = 0;
        for mi in 0..self.merges.len() {
            let m = &self.merges[mi];
            let zone = self.cfg.cooperation_zone;
            let trigger = m.merging_lanes.iter().any(|l| {
                index.slots[self.net.slot(*l)].iter().any(|&i| {
                    let v = &self.state.vehicles[i];
                    v.kind.is_av() && self.net.edge(v.edge).length - v.pos <= zone
                })
            });
            if !trigger {
                continue;
            }
            let target = m.target;
            let len = self.net.edge(target.edge).length;
            let ccavs: Vec<usize> = index.slots[self.net.slot(target)]
                .iter()
                .rev()
                .copied()
                .filter(|&i| {
                    let v = &self.state.vehicles[i];
                    let d = len - v.pos;
                    v.kind == VehicleKind::Cooperative && d > 0.0 && d <= zone
                })
                .collect();
            for i in ccavs {
                if self.shift_away(index, i) == ShiftOutcome::Shifted {
                    shifted += 1;
                }
            }
        }
        shifted
    }

    fn shift_away(&mut self, index: &mut LaneIndex, i: usize) -> ShiftOutcome {
        let v = &self.state.vehicles[i];
        let edge = self.net.edge(v.edge);
        if v.lane + 1 >= edge.lanes {
            return ShiftOutcome::Held;
        }
        let adjacent = LaneRef {
            edge: v.edge,
            lane: v.lane + 1,
        };
        if self.try_lateral(index, i, adjacent, v.pos) {
            ShiftOutcome::Shifted
        } else {
            ShiftOutcome::Held
        }
    }

    /// Moves a CCAV on a merge's target lane one lane away from the merge
    /// when `merging` is an AV approaching that merge on a lane end and the
    /// adjacent lane has acceptable gaps. Otherwise the CCAV holds its lane.
    pub fn cooperative_shift(&mut self, ccav: VehicleId, merging: VehicleId) -> Result<ShiftOutcome> {
        let ci = self.index_of(ccav)?;
        let mi = self.index_of(merging)?;
        let c = &self.state.vehicles[ci];
        let j = &self.state.vehicles[mi];
        if c.kind != VehicleKind::Cooperative {
            return Err(Error::Input(format!("vehicle {ccav} is not a CCAV")));
        }
        let Some(merge) = self.merging_slot[self.net.slot(j.lane_ref())] else {
            return Ok(ShiftOutcome::Held);
        };
        let zone = self.cfg.cooperation_zone;
        let within = |v: &VehicleState| {
            let d = self.net.edge(v.edge).length - v.pos;
            d > 0.0 && d <= zone
        };
        if !j.kind.is_av()
            || self.target_slot[self.net.slot(c.lane_ref())] != Some(merge)
            || !within(c)
            || !within(j)
        {
            return Ok(ShiftOutcome::Held);
        }
        let mut index = LaneIndex::build(self.net, &self.state.vehicles);
        Ok(self.shift_away(&mut index, ci))
    }

    fn check_invariants(&self) -> Result<()> {
        let fault = |message: String| Error::Integrity {
            clock: self.state.clock,
            message,
        };
        let mut ids: Vec<VehicleId> = self.state.vehicles.iter().map(|v| v.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(fault("duplicate vehicle id".into()));
        }
        for v in &self.state.vehicles {
            let edge = self.net.edge(v.edge);
            if !(v.pos >= 0.0 && v.pos <= edge.length) || v.lane >= edge.lanes {
                return Err(fault(dump(v, self.net).to_string()));
            }
            if !(v.speed >= 0.0 && v.speed <= self.speed_ceiling) {
                return Err(fault(format!("speed out of range: {}", dump(v, self.net))));
            }
        }
        let index = LaneIndex::build(self.net, &self.state.vehicles);
        for bucket in &index.slots {
            for pair in bucket.windows(2) {
                let (l, f) = (&self.state.vehicles[pair[0]], &self.state.vehicles[pair[1]]);
                if l.rear() < f.pos - 1e-6 {
                    return Err(fault(format!(
                        "overlap: leader {} follower {}",
                        dump(l, self.net),
                        dump(f, self.net)
                    )));
                }
            }
        }
        let present = self.state.vehicles.len() as u64;
        if self.state.spawned != present + self.state.exits.len() as u64 {
            return Err(fault("vehicle conservation violated".into()));
        }
        Ok(())
    }
}

fn dump(v: &VehicleState, net: &RoadNetwork) -> String {
    format!(
        "vehicle {} ({}) edge {} lane {} pos {:.3} speed {:.3}",
        v.id,
        v.kind,
        net.edge(v.edge).id,
        v.lane,
        v.pos,
        v.speed
    )
}
