//! Erlang-loss sizing of supervisor teams from hourly task statistics.
//!
//! The offered load of an hour is `a = λ̂ · μ̂`, arrival rate in tasks per
//! second times mean task duration in seconds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::MergeId;
use crate::safety::{ConflictSample, SupervisionEvent};
use crate::sim::VehicleId;

pub const HOUR: u32 = 3600;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourlyRates {
    pub hour: u32,
    /// Tasks starting in the hour.
    pub q: u64,
    /// In-hour conflict seconds of those tasks.
    pub b: u64,
    /// Tasks per second.
    pub lambda: f64,
    /// Mean seconds per task; `None` when no task started.
    pub mu: Option<f64>,
}

impl HourlyRates {
    pub fn from_counts(hour: u32, q: u64, b: u64) -> Self {
        HourlyRates {
            hour,
            q,
            b,
            lambda: q as f64 / HOUR as f64,
            mu: (q > 0).then(|| b as f64 / q as f64),
        }
    }

    pub fn offered_load(&self) -> f64 {
        self.lambda * self.mu.unwrap_or(0.0)
    }
}

/// Rates for every hour of `[0, hours)`.
pub fn hourly_rates_all(
    events: &[SupervisionEvent],
    samples: &[ConflictSample],
    hours: u32,
) -> Vec<HourlyRates> {
    let mut start_hour: BTreeMap<(VehicleId, MergeId), u32> = BTreeMap::new();
    let mut q = vec![0u64; hours as usize];
    for e in events {
        let l = e.t_start / HOUR;
        start_hour.insert((e.av, e.merge), l);
        if let Some(c) = q.get_mut(l as usize) {
            *c += 1;
        }
    }
    let mut b = vec![0u64; hours as usize];
    for s in samples {
        let l = s.t / HOUR;
        if start_hour.get(&(s.av, s.merge)) == Some(&l) {
            if let Some(c) = b.get_mut(l as usize) {
                *c += 1;
            }
        }
    }
    (0..hours)
        .map(|l| HourlyRates::from_counts(l, q[l as usize], b[l as usize]))
        .collect()
}

pub fn hourly_rates(events: &[SupervisionEvent], samples: &[ConflictSample], hour: u32) -> HourlyRates {
    let mut r = hourly_rates_all(events, samples, hour + 1);
    r.pop().expect("at least one hour")
}

/// Blocking probability of an M/M/k/k system with offered load `a`.
pub fn erlang_loss(a: f64, k: u32) -> f64 {
    let mut b = 1.0;
    for j in 1..=k {
        b = a * b / (j as f64 + a * b);
    }
    b
}

/// Target blocking probability ε with `0 < ε < 1`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ReliabilityTarget(f64);

impl ReliabilityTarget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon > 0.0 && epsilon < 1.0 {
            Ok(ReliabilityTarget(epsilon))
        } else {
            Err(Error::Input(format!("epsilon must lie in (0, 1), got {epsilon}")))
        }
    }

    pub fn from_nines(nines: f64) -> Result<Self> {
        Self::new(10f64.powf(-nines))
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }

    pub fn nines(self) -> f64 {
        -self.0.log10()
    }
}

/// Smallest `k` whose blocking probability is below the target.
pub fn min_servers(a: f64, target: ReliabilityTarget) -> u32 {
    let mut b = 1.0;
    let mut k = 0;
    while b >= target.0 {
        k += 1;
        b = a * b / (k as f64 + a * b);
    }
    k
}

/// `(P_k, nines)`; nines is infinite when `P_k` underflows to zero.
pub fn achieved_reliability(a: f64, k: u32) -> (f64, f64) {
    let p = erlang_loss(a, k);
    let nines = if p > 0.0 { -p.log10() } else { f64::INFINITY };
    (p, nines.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingRow {
    pub hour: u32,
    pub summed: u32,
    pub pooled: u32,
    pub pooled_load: f64,
}

impl PoolingRow {
    pub fn gap(&self) -> u32 {
        self.summed - self.pooled
    }
}

/// Per-hour team size for isolated regions versus one shared team.
pub fn pooled_vs_summed(regions: &[Vec<HourlyRates>], target: ReliabilityTarget) -> Result<Vec<PoolingRow>> {
    let Some(first) = regions.first() else {
        return Err(Error::Input("no regions to pool".into()));
    };
    for r in regions {
        let same = r.len() == first.len() && r.iter().zip(first).all(|(x, y)| x.hour == y.hour);
        if !same {
            return Err(Error::Input("regions do not share an hour grid".into()));
        }
    }
    Ok((0..first.len())
        .map(|i| {
            let loads: Vec<f64> = regions.iter().map(|r| r[i].offered_load()).collect();
            let summed = loads.iter().map(|&a| min_servers(a, target)).sum();
            let pooled_load: f64 = loads.iter().sum();
            PoolingRow {
                hour: first[i].hour,
                summed,
                pooled: min_servers(pooled_load, target),
                pooled_load,
            }
        })
        .collect())
}
