//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BinaryHeap;
use std::cmp::Reverse;

use mergewatch::network::{LaneRef, MergePoint, RoadNetwork};
use mergewatch::sim::{SimConfig, VehicleId, VehicleKind, VehicleState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Distance covered in `h` seconds from `speed` at constant `accel`, found by
/// stepping the motion forward rather than by the closed form.
pub fn forward_reach(speed: f64, accel: f64, h: f64) -> f64 {
    let n = 1000;
    let dt = h / n as f64;
    let (mut x, mut v) = (0.0, speed);
    for _ in 0..n {
        x += v * dt + 0.5 * accel * dt * dt;
        v += accel * dt;
    }
    x
}

/// Brute-force conflict check: (AV, merge, contributors) triples.
pub fn conflict_oracle(
    vehicles: &[VehicleState],
    net: &RoadNetwork,
    merges: &[MergePoint],
    cfg: &SimConfig,
    h: f64,
) -> Vec<(VehicleId, u32, Vec<VehicleId>)> {
    let remaining = |v: &VehicleState| net.edge(v.edge).length - v.pos;
    let on = |v: &VehicleState, l: &LaneRef| v.edge == l.edge && v.lane == l.lane;
    let mut out = Vec::new();
    for m in merges {
        let mut contributors: Vec<VehicleId> = vehicles
            .iter()
            .filter(|i| on(i, &m.target))
            .filter(|i| {
                let d = remaining(i);
                if d <= 0.0 {
                    return false;
                }
                if matches!(i.kind, VehicleKind::Connected | VehicleKind::Cooperative) {
                    d <= cfg.params(i.kind).length
                } else {
                    forward_reach(i.speed, cfg.params(i.kind).max_accel, h) >= d
                }
            })
            .map(|i| i.id)
            .collect();
        contributors.sort();
        let mut subjects: Vec<&VehicleState> = vehicles
            .iter()
            .filter(|j| j.kind != VehicleKind::Human)
            .filter(|j| m.merging_lanes.iter().any(|l| on(j, l)))
            .filter(|j| forward_reach(j.speed, cfg.params(j.kind).max_accel, h) >= remaining(j))
            .collect();
        subjects.sort_by_key(|j| j.id);
        if contributors.is_empty() {
            continue;
        }
        for j in subjects {
            out.push((j.id, m.id.0, contributors.clone()));
        }
    }
    out
}

/// Erlang loss by direct summation of a^j / j!, carried in log space.
pub fn erlang_direct(a: f64, k: u32) -> f64 {
    if a == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let log_terms: Vec<f64> = (0..=k)
        .map(|j| j as f64 * a.ln() - (1..=j).map(|i| (i as f64).ln()).sum::<f64>())
        .collect();
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
    (log_terms[k as usize] - max).exp() / denom
}

/// Empirical blocking of an M/M/k loss system with `arrivals` arrivals, and
/// the standard error of that estimate from `batches` batch means.
pub fn mmk_blocking(lambda: f64, mean_service: f64, k: u32, arrivals: usize, batches: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = |rate: f64, rng: &mut ChaCha8Rng| -(1.0 - rng.gen::<f64>()).ln() / rate;
    let mut busy: BinaryHeap<Reverse<u64>> = BinaryHeap::new();
    let mut t = 0.0f64;
    let per_batch = arrivals / batches;
    let mut batch_rates = Vec::with_capacity(batches);
    let mut blocked_total = 0usize;
    for _ in 0..batches {
        let mut blocked = 0usize;
        for _ in 0..per_batch {
            t += exp(lambda, &mut rng);
            while let Some(&Reverse(end)) = busy.peek() {
                if f64::from_bits(end) <= t {
                    busy.pop();
                } else {
                    break;
                }
            }
            if busy.len() < k as usize {
                let end = t + exp(1.0 / mean_service, &mut rng);
                // non-negative floats order like their bit patterns
                busy.push(Reverse(end.to_bits()));
            } else {
                blocked += 1;
            }
        }
        blocked_total += blocked;
        batch_rates.push(blocked as f64 / per_batch as f64);
    }
    let p = blocked_total as f64 / (per_batch * batches) as f64;
    let mean = batch_rates.iter().sum::<f64>() / batches as f64;
    let var = batch_rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (p, (var / batches as f64).sqrt())
}

/// Up to `max` vehicles scattered over the ramp corridor, ignoring spacing.
pub fn random_fixture(net: &RoadNetwork, rng: &mut ChaCha8Rng, max: usize) -> Vec<VehicleState> {
    let kinds = [
        VehicleKind::Human,
        VehicleKind::Unconnected,
        VehicleKind::Connected,
        VehicleKind::Cooperative,
    ];
    let n = rng.gen_range(1..=max);
    (0..n)
        .map(|i| {
            let edge = mergewatch::network::EdgeIx(rng.gen_range(0..net.edges().len() as u32));
            let e = net.edge(edge);
            // bias positions toward the junction so conflicts are common
            let pos = e.length - rng.gen_range(0.0..200.0f64).min(e.length);
            VehicleState {
                id: VehicleId(i as u32),
                kind: kinds[rng.gen_range(0..4)],
                route: mergewatch::network::Route::new(&e.id, vec![edge], net).unwrap(),
                route_pos: 0,
                edge,
                lane: rng.gen_range(0..e.lanes),
                pos,
                speed: rng.gen_range(0.0..35.0),
                length: 5.0,
                spawned_at: 0.0,
            }
        })
        .collect()
}

/// Number of spans covering each second, counted one second at a time.
pub fn overlap_count(spans: &[(u32, u32)], horizon: u32) -> Vec<u32> {
    (0..horizon)
        .map(|t| spans.iter().filter(|&&(s, e)| s <= t && t <= e).count() as u32)
        .collect()
}
