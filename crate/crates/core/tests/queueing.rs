mod common;

use mergewatch::network::MergeId;
use mergewatch::queueing::{
    achieved_reliability, erlang_loss, hourly_rates_all, min_servers, pooled_vs_summed,
    HourlyRates, ReliabilityTarget,
};
use mergewatch::safety::{extract_events, ConflictSample};
use mergewatch::sim::VehicleId;
use proptest::prelude::*;

fn eps(e: f64) -> ReliabilityTarget {
    ReliabilityTarget::new(e).unwrap()
}

#[test]
fn recurrence_matches_direct_summation() {
    for &a in &[0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0] {
        for k in 0..=200 {
            let (r, d) = (erlang_loss(a, k), common::erlang_direct(a, k));
            assert!((r - d).abs() <= 1e-12 * d.max(1e-300).max(1.0), "a={a} k={k}: {r} vs {d}");
        }
    }
    assert!((erlang_loss(2.0, 3) - 0.210_526_315_789_473_7).abs() < 1e-15);
}

#[test]
fn min_servers_equals_a_scan_of_the_direct_formula() {
    for &(a, e) in &[(10.0, 1e-6), (0.3, 1e-2), (42.0, 1e-4), (1.0, 0.6)] {
        let scan = (0..).find(|&k| common::erlang_direct(a, k) < e).unwrap();
        assert_eq!(min_servers(a, eps(e)), scan, "a={a} eps={e}");
    }
    assert_eq!(min_servers(0.0, eps(1e-6)), 1);
}

#[test]
fn nines_of_known_probabilities() {
    let (p, n) = achieved_reliability(1.0, 1);
    assert_eq!(p, 0.5);
    assert!((n - 2f64.log10()).abs() < 1e-15);
    assert!((eps(1e-3).nines() - 3.0).abs() < 1e-12);
    assert!(ReliabilityTarget::new(0.0).is_err());
    assert!(ReliabilityTarget::new(1.0).is_err());
}

fn sample(t: u32, av: u32, m: u32) -> ConflictSample {
    ConflictSample {
        t,
        av: VehicleId(av),
        merge: MergeId(m),
        contributors: vec![VehicleId(1000)],
    }
}

#[test]
fn hourly_counts_on_a_hand_built_fixture() {
    // AV 1 at merge 0: 3598..3601, starts in hour 0 with two in-hour samples
    // AV 2 at merge 0: 10..14, five samples
    // AV 2 at merge 1: 3700..3702 with a gap at 3701, starts in hour 1
    // AV 3 at merge 1: 7199..7200, starts in hour 1 with one in-hour sample
    let mut samples = Vec::new();
    samples.extend((3598..=3601).map(|t| sample(t, 1, 0)));
    samples.extend((10..=14).map(|t| sample(t, 2, 0)));
    samples.extend([3700, 3702].map(|t| sample(t, 2, 1)));
    samples.extend((7199..=7200).map(|t| sample(t, 3, 1)));
    samples.sort_by_key(|s| (s.t, s.av, s.merge));
    let events = extract_events(&samples);
    assert_eq!(events.len(), 4);
    let r = hourly_rates_all(&events, &samples, 3);
    let q: Vec<u64> = r.iter().map(|h| h.q).collect();
    let b: Vec<u64> = r.iter().map(|h| h.b).collect();
    assert_eq!(q, vec![2, 2, 0]);
    assert_eq!(b, vec![7, 3, 0]);
    assert_eq!(r[0].lambda, 2.0 / 3600.0);
    assert_eq!(r[0].mu, Some(3.5));
    assert_eq!(r[2].mu, None);
    assert_eq!(r[2].offered_load(), 0.0);
    assert!((r[1].offered_load() - 2.0 / 3600.0 * 1.5).abs() < 1e-15);
}

#[test]
fn two_identical_regions() {
    let one = vec![HourlyRates::from_counts(0, 3600, 3600)];
    assert_eq!(one[0].offered_load(), 1.0);
    let rows = pooled_vs_summed(&[one.clone(), one], eps(0.01)).unwrap();
    assert_eq!(rows[0].summed, 2 * min_servers(1.0, eps(0.01)));
    assert_eq!(rows[0].pooled, min_servers(2.0, eps(0.01)));
    assert!(rows[0].pooled <= rows[0].summed);
}

#[test]
fn mismatched_hour_grids_are_rejected() {
    let a = vec![HourlyRates::from_counts(0, 1, 1)];
    let b = vec![HourlyRates::from_counts(1, 1, 1)];
    assert!(pooled_vs_summed(&[a, b], eps(0.01)).is_err());
    assert!(pooled_vs_summed(&[], eps(0.01)).is_err());
}

proptest! {
    #[test]
    fn blocking_falls_with_servers_and_rises_with_load(a in 0.01f64..100.0, k in 0u32..300) {
        prop_assert!(erlang_loss(a, k + 1) <= erlang_loss(a, k));
        prop_assert!(erlang_loss(a * 1.1, k) >= erlang_loss(a, k));
        let p = erlang_loss(a, k);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn min_servers_is_monotone(a in 0.0f64..80.0, da in 0.0f64..20.0, e in 1e-9f64..0.5, f in 0.1f64..1.0) {
        let k = min_servers(a, eps(e));
        prop_assert!(erlang_loss(a, k) < e);
        prop_assert!(k == 0 || erlang_loss(a, k - 1) >= e);
        prop_assert!(min_servers(a + da, eps(e)) >= k);
        prop_assert!(min_servers(a, eps(e * f)) >= k);
    }

    #[test]
    fn pooling_never_needs_more(loads in prop::collection::vec(prop::collection::vec(0u64..400, 1..4), 1..5)) {
        let hours = loads.iter().map(|l| l.len()).min().unwrap();
        let regions: Vec<Vec<HourlyRates>> = loads
            .iter()
            .map(|l| (0..hours).map(|h| HourlyRates::from_counts(h as u32, l[h], l[h] * 25)).collect())
            .collect();
        for e in [1e-2, 1e-4, 1e-6] {
            for row in pooled_vs_summed(&regions, eps(e)).unwrap() {
                prop_assert!(row.pooled <= row.summed);
                let direct: f64 = regions.iter().map(|r| r[row.hour as usize].offered_load()).sum();
                prop_assert!((row.pooled_load - direct).abs() < 1e-12);
            }
        }
    }
}
