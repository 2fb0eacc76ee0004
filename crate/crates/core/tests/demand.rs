use std::path::Path;

use mergewatch::demand::{
    ingest_counts, reconstruct_flows, residual_of, spawn_schedule, DetectorSeries, FlowAssignment,
};
use mergewatch::network::{RoadNetwork, Route};
use proptest::prelude::*;

fn net(text: &str) -> RoadNetwork {
    RoadNetwork::parse(text, Path::new("t.net")).unwrap()
}

const Y: &str = "node a\nnode b\nnode j\nnode x\n\
                 edge up1 a j 300 1 30\nedge up2 b j 300 1 30\nedge down j x 500 2 30\n";

#[test]
fn hourly_counts_sum_per_edge() {
    let n = net("node a\nnode b\nnode c\nedge e1 a b 500 2 30\nedge e2 b c 500 2 30\n");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("counts.csv");
    let mut text = String::from("edge_id,bin_index,count\n");
    // 120 vehicles over 120 bins of 30 s, unevenly spread
    for bin in 0..120 {
        let c = [0, 1, 2, 1][bin % 4];
        text.push_str(&format!("e1,{bin},{c}\ne2,{bin},{c}\n"));
    }
    std::fs::write(&path, text).unwrap();
    let s = ingest_counts(&path, &n, 30, 3600).unwrap();
    for e in ["e1", "e2"] {
        let e = n.edge_ix(e).unwrap();
        let oracle: u64 = s.get(e).unwrap().iter().map(|&c| c as u64).sum();
        assert_eq!(oracle, 120);
        assert_eq!(s.total(e), 120);
    }
}

/// Smallest residual over every integer split of route flows in `0..=max`.
fn exhaustive_min(counts: &DetectorSeries, routes: &[Route], max: u32) -> u64 {
    let mut best = u64::MAX;
    let mut flows = vec![0u32; routes.len()];
    loop {
        let fa = FlowAssignment {
            bin_seconds: counts.bin_seconds(),
            routes: routes.to_vec(),
            flows: flows.iter().map(|&f| vec![f]).collect(),
        };
        best = best.min(residual_of(counts, &fa).total());
        let mut i = 0;
        loop {
            if i == flows.len() {
                return best;
            }
            flows[i] += 1;
            if flows[i] <= max {
                break;
            }
            flows[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn y_junction_matches_exhaustive_search() {
    let n = net(Y);
    let routes = vec![
        Route::from_ids("r1", &["up1", "down"], &n).unwrap(),
        Route::from_ids("r2", &["up2", "down"], &n).unwrap(),
    ];
    let mut c = DetectorSeries::new(30, 30).unwrap();
    c.set(n.edge_ix("up1").unwrap(), vec![4]).unwrap();
    c.set(n.edge_ix("up2").unwrap(), vec![8]).unwrap();
    c.set(n.edge_ix("down").unwrap(), vec![12]).unwrap();
    let (fa, res) = reconstruct_flows(&n, &c, &routes).unwrap();
    assert_eq!(fa.flows, vec![vec![4], vec![8]]);
    assert_eq!(res.total(), 0);
    assert_eq!(exhaustive_min(&c, &routes, 12), 0);
}

#[test]
fn poisson_counts_concentrate() {
    let n = net("node a\nnode b\nedge e a b 500 1 30\n");
    let fa = FlowAssignment {
        bin_seconds: 30,
        routes: vec![Route::from_ids("r", &["e"], &n).unwrap()],
        flows: vec![vec![1000]],
    };
    let sigma = 1000f64.sqrt();
    let within = (0..100u64)
        .filter(|&seed| {
            let k = spawn_schedule(&fa, seed).entries.len() as f64;
            (k - 1000.0).abs() <= 3.0 * sigma
        })
        .count();
    assert!(within >= 99, "{within} of 100 within 3 sigma");
}

#[test]
fn schedule_times_stay_in_their_bins() {
    let n = net(Y);
    let routes = vec![
        Route::from_ids("r1", &["up1", "down"], &n).unwrap(),
        Route::from_ids("r2", &["up2", "down"], &n).unwrap(),
    ];
    let fa = FlowAssignment {
        bin_seconds: 30,
        routes,
        flows: vec![vec![3, 0, 5, 2], vec![0, 4, 1, 0]],
    };
    let s = spawn_schedule(&fa, 17);
    assert!(s.entries.windows(2).all(|w| w[0].time <= w[1].time));
    for e in &s.entries {
        assert!(e.time >= 0.0 && e.time < 120.0);
        let bin = (e.time / 30.0) as usize;
        assert!(fa.flows[e.route][bin] > 0, "spawn in an empty bin");
    }
    let ids: Vec<u32> = s.entries.iter().map(|e| e.vehicle.0).collect();
    assert_eq!(ids, (0..s.entries.len() as u32).collect::<Vec<_>>());
}

fn arb_counts() -> impl Strategy<Value = Vec<(u32, u32, u32)>> {
    prop::collection::vec((0u32..30, 0u32..30, 0u32..60), 1..12)
}

proptest! {
    #[test]
    fn greedy_never_worse_than_zero(bins in arb_counts()) {
        let n = net(Y);
        let routes = vec![
            Route::from_ids("r1", &["up1", "down"], &n).unwrap(),
            Route::from_ids("r2", &["up2", "down"], &n).unwrap(),
            Route::from_ids("r3", &["down"], &n).unwrap(),
        ];
        let mut c = DetectorSeries::new(30, 30 * bins.len() as u32).unwrap();
        c.set(n.edge_ix("up1").unwrap(), bins.iter().map(|b| b.0).collect()).unwrap();
        c.set(n.edge_ix("up2").unwrap(), bins.iter().map(|b| b.1).collect()).unwrap();
        c.set(n.edge_ix("down").unwrap(), bins.iter().map(|b| b.2).collect()).unwrap();
        let (fa, res) = reconstruct_flows(&n, &c, &routes).unwrap();
        let zero = FlowAssignment {
            bin_seconds: 30,
            routes: routes.clone(),
            flows: vec![vec![0; bins.len()]; routes.len()],
        };
        prop_assert!(res.total() <= residual_of(&c, &zero).total());
        prop_assert_eq!(res.total(), residual_of(&c, &fa).total());
        // a route's flow is one number per bin, so it is the same on each of its edges
        for (r, route) in fa.routes.iter().enumerate() {
            for t in 0..fa.bins() {
                for &e in route.edges.iter() {
                    prop_assert!(fa.edge_flow(e, t) >= fa.flows[r][t] as u64);
                }
            }
        }
    }

    #[test]
    fn schedule_is_a_function_of_flows_and_seed(
        flows in prop::collection::vec(0u32..6, 1..20),
        seed in any::<u64>(),
    ) {
        let n = net("node a\nnode b\nedge e a b 500 1 30\n");
        let fa = FlowAssignment {
            bin_seconds: 30,
            routes: vec![Route::from_ids("r", &["e"], &n).unwrap()],
            flows: vec![flows],
        };
        prop_assert_eq!(spawn_schedule(&fa, seed), spawn_schedule(&fa, seed));
    }
}
