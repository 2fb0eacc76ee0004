use std::fs;
use std::path::Path;

use mergewatch::safety::khat;
use mergewatch::scenario::{
    percent_reduction, read_events, read_load, read_samples, run_grid, run_scenario, simulate,
    ScenarioConfig,
};
use mergewatch::sim::AvKind;
use mergewatch::synthetic::RampDemand;
use mergewatch::Error;

fn busy(dir: &Path, kind: AvKind, p: f64) -> ScenarioConfig {
    RampDemand::busy_hour()
        .write_scenario(dir, "busy", kind, p, 21, None)
        .unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn zero_demand_runs_empty() {
    let dir = tempfile::tempdir().unwrap();
    let demand = RampDemand {
        main_total: 0,
        ramp_total: 0,
        ..RampDemand::busy_hour()
    };
    let cfg = demand
        .write_scenario(dir.path(), "empty", AvKind::Cooperative, 1.0, 0, None)
        .unwrap();
    let r = run_scenario(&cfg, &dir.path().join("out")).unwrap();
    assert_eq!((r.spawned, r.khat_max, r.events), (0, 0, 0));
    assert_eq!(r.flow_residual, Some(0));
    assert!(r.hourly.iter().all(|h| h.q == 0 && h.mu.is_none()));
}

#[test]
fn exports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = busy(dir.path(), AvKind::Cooperative, 0.5);
    run_scenario(&cfg, &dir.path().join("a")).unwrap();
    run_scenario(&cfg, &dir.path().join("b")).unwrap();
    for f in ["schedule.csv", "flows.csv", "events.csv", "samples.csv", "load.csv", "rates.csv", "exits.csv", "report.toml"] {
        assert_eq!(read(&dir.path().join("a").join(f)), read(&dir.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn report_is_recomputable_from_exports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = busy(dir.path(), AvKind::Unconnected, 0.75);
    let out = dir.path().join("out");
    let r = run_scenario(&cfg, &out).unwrap();
    let load = read_load(&out.join("load.csv")).unwrap();
    assert_eq!(load.len(), 3600);
    let s: Vec<u32> = load.iter().map(|l| l.s_t).collect();
    let b1: Vec<u32> = load.iter().map(|l| l.baseline1).collect();
    let b2: Vec<u32> = load.iter().map(|l| l.baseline2).collect();
    assert_eq!(khat(&s), (r.khat_max, r.khat_mean));
    assert_eq!(khat(&b1), (r.baseline1_max, r.baseline1_mean));
    assert_eq!(khat(&b2), (r.baseline2_max, r.baseline2_mean));
    let n: u64 = load.iter().map(|l| l.vehicles as u64).sum();
    let sum: f64 = load.iter().map(|l| l.speed_sum).sum();
    assert_eq!(n, r.vehicle_seconds);
    assert!((sum / n as f64 - r.mean_speed).abs() < 1e-9);
    assert_eq!(load.iter().map(|l| l.guards as u64).sum::<u64>(), r.guard_events);
    assert_eq!(read_events(&out.join("events.csv")).unwrap().len() as u64, r.events);
    assert_eq!(read_samples(&out.join("samples.csv")).unwrap().len() as u64, r.samples);
    let text = fs::read_to_string(out.join("report.toml")).unwrap();
    assert!(text.contains(&format!("khat_max = {}", r.khat_max)));
    assert!(!text.contains("runtime"));
}

#[test]
fn day_has_96_quarter_hour_maxima() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RampDemand::day()
        .write_scenario(dir.path(), "day", AvKind::Unconnected, 1.0, 8, None)
        .unwrap();
    let out = dir.path().join("out");
    run_scenario(&cfg, &out).unwrap();
    let s: Vec<u32> = read_load(&out.join("load.csv")).unwrap().iter().map(|l| l.s_t).collect();
    let mut r = csv::Reader::from_path(out.join("load_15min.csv")).unwrap();
    let bins: Vec<(u32, u32, u32)> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(bins.len(), 96);
    for (i, &(bin, t_start, max)) in bins.iter().enumerate() {
        assert_eq!((bin, t_start), (i as u32, 900 * i as u32));
        let oracle = (t_start..t_start + 900).map(|t| s[t as usize]).max().unwrap();
        assert_eq!(max, oracle);
    }
}

#[test]
fn unconnected_and_connected_traffic_move_identically() {
    let dir = tempfile::tempdir().unwrap();
    let u = busy(dir.path(), AvKind::Unconnected, 0.5);
    let n = u.with(AvKind::Connected, 0.5);
    let (a, b) = (simulate(&u).unwrap(), simulate(&n).unwrap());
    assert_eq!(a.fleet.speed_sum, b.fleet.speed_sum);
    assert_eq!(a.report.mean_speed, b.report.mean_speed);
    assert_eq!(a.exits.len(), b.exits.len());
}

#[test]
fn grid_gains_match_a_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let base = busy(dir.path(), AvKind::Unconnected, 0.25);
    let cfgs: Vec<ScenarioConfig> = [AvKind::Unconnected, AvKind::Connected, AvKind::Cooperative]
        .into_iter()
        .flat_map(|k| [0.25, 0.75].map(|p| base.with(k, p)))
        .collect();
    let out = dir.path().join("grid");
    let table = run_grid(&cfgs, &out).unwrap();
    assert_eq!(table.rows.len(), 6);
    for (row, cfg) in table.rows.iter().zip(&cfgs) {
        assert_eq!(row.label, cfg.label());
        assert!(out.join(&row.label).join("report.toml").exists());
    }
    let mut r = csv::Reader::from_path(out.join("gains.csv")).unwrap();
    let gains: Vec<(f64, Option<f64>, f64, f64)> = r.deserialize().map(|x| x.unwrap()).collect();
    assert_eq!(gains.len(), 2);
    for (p, gain, a1, a2) in gains {
        let at: Vec<_> = table.rows.iter().filter(|g| g.report.penetration == p).collect();
        let k = |kind| at.iter().find(|g| g.report.kind == kind).unwrap().report.khat_max as f64;
        let want = if k(AvKind::Unconnected) > 0.0 {
            Some(100.0 * (k(AvKind::Unconnected) - k(AvKind::Cooperative)) / k(AvKind::Unconnected))
        } else {
            None
        };
        match (gain, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() < 1e-9),
            (g, w) => assert_eq!(g, w),
        }
        let avg1 = at.iter().map(|g| g.report.baseline1_max as f64).sum::<f64>() / 3.0;
        let avg2 = at.iter().map(|g| g.report.baseline2_max as f64).sum::<f64>() / 3.0;
        assert!((a1 - avg1).abs() < 1e-9 && (a2 - avg2).abs() < 1e-9);
    }
    assert_eq!(percent_reduction(4.0, 3.0), Some(25.0));
    assert!(fs::read_to_string(out.join("table.md")).unwrap().contains("| Scenario |"));
}

#[test]
fn grid_rejects_mixed_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let a = busy(dir.path(), AvKind::Unconnected, 0.25);
    let mut b = a.with(AvKind::Cooperative, 0.25);
    b.seed += 1;
    assert!(matches!(run_grid(&[a, b], &dir.path().join("g")), Err(Error::Input(_))));
}

#[test]
fn schedule_file_replaces_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = busy(dir.path(), AvKind::Cooperative, 0.5);
    let first = dir.path().join("first");
    let r1 = run_scenario(&cfg, &first).unwrap();
    let mut again = cfg.clone();
    again.counts = None;
    again.schedule = Some(first.join("schedule.csv"));
    let r2 = run_scenario(&again, &dir.path().join("second")).unwrap();
    assert_eq!(r1.spawned, r2.spawned);
    assert_eq!(r1.khat_max, r2.khat_max);
    assert_eq!(
        read(&first.join("events.csv")),
        read(&dir.path().join("second/events.csv"))
    );
}

fn config_error(extra: &str, replace: Option<(&str, &str)>) -> Error {
    let dir = tempfile::tempdir().unwrap();
    busy(dir.path(), AvKind::Unconnected, 0.5);
    let path = dir.path().join("busy.toml");
    let mut text = fs::read_to_string(&path).unwrap();
    if let Some((from, to)) = replace {
        assert!(text.contains(from), "{from} not in {text}");
        text = text.replace(from, to);
    }
    let text = format!("{extra}{text}");
    fs::write(&path, text).unwrap();
    match ScenarioConfig::load(&path) {
        Ok(cfg) => simulate(&cfg).err().expect("config should be rejected"),
        Err(e) => e,
    }
}

#[test]
fn bad_configs_are_rejected() {
    assert!(matches!(config_error("colour = 3\n", None), Error::Config { .. }));
    assert!(matches!(config_error("", Some(("schema = 1", "schema = 2"))), Error::Validation(_) | Error::Input(_)));
    assert!(matches!(config_error("", Some(("penetration = 0.5", "penetration = 1.5"))), Error::Validation(_) | Error::Input(_)));
    assert!(matches!(config_error("", Some(("horizon_s = 3600", "horizon_s = 3000"))), Error::Validation(_) | Error::Input(_)));
    assert!(matches!(config_error("", Some(("kind = \"UCAV\"", "kind = \"XCAV\""))), Error::Config { .. }));
    assert!(matches!(config_error("", Some(("\"r1\"", "\"r9\""))), Error::Validation(_) | Error::Input(_)));
    let e = config_error("", Some(("ramp.net", "missing.net")));
    assert!(e.to_string().contains("missing.net"), "{e}");
}
